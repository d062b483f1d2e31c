//! Lower bounds on the interference of two plugins.
//!
//! For one head and one query, with `ĥ` from separately trained plugins and
//! `h̃` from jointly trained ones:
//!
//! * interference `MI_s = ‖h̃ᵢⱼ − ĥᵢⱼ‖`
//! * assumption: `‖h̃ᵢⱼ − h̄ᵢⱼ‖ > ‖ĥᵢ − h̄ᵢ‖ + ‖ĥⱼ − h̄ⱼ‖`
//! * bound: `(tᵢ − α)‖Δĥᵢ‖ + (tⱼ − β)‖Δĥⱼ‖`
//!
//! `tᵢ`, `Δĥᵢ` come from plugin `i` alone, `α`, `β`, `h̄ᵢⱼ` from the
//! zero-shot pair. The stated bound is derived with a few approximate steps,
//! so [`BoundEstimate::strict_rhs`] also records the bound that follows from
//! the assumption by the triangle inequality alone:
//! `‖ĥᵢ − h̄ᵢ‖ + ‖ĥⱼ − h̄ⱼ‖ − ‖ĥᵢⱼ − h̄ᵢⱼ‖`.
//!
//! Across heads, `MI_m = ‖concat_k(h̃ᵏ − ĥᵏ)·W_o‖` is compared with
//! `λ̂/√K · Σ_k bound_k`, where `λ̂` is the mean absolute diagonal of `R` in
//! `W_o = QR`.

use super::decompose::{norm, sub, HeadDecomposition, TwoPluginDecomposition};
use crate::error::{Error, Result};
use crate::linalg::Qr;
use crate::tensor::Tensor;

/// Reconstruction residual above which an instance is not trusted.
pub const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct BoundEstimate {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    /// `‖h̃ᵢⱼ − ĥᵢⱼ‖`.
    pub lhs: f64,
    pub rhs: f64,
    pub strict_rhs: f64,
    pub assumption_lhs: f64,
    pub assumption_rhs: f64,
    pub assumption_holds: bool,
    pub mass_conditions: bool,
    pub max_residual: f64,
    pub t_i_minus_alpha: f64,
    pub t_j_minus_beta: f64,
    pub offset_i_norm: f64,
    pub offset_j_norm: f64,
    pub zero_shot_output: Vec<f64>,
    pub joint_output: Vec<f64>,
}

impl BoundEstimate {
    /// Assumption, mass conditions and reconstructions all hold.
    pub fn eligible(&self) -> bool {
        self.assumption_holds && self.mass_conditions && self.max_residual < RESIDUAL_TOL
    }

    pub fn margin(&self) -> f64 {
        self.lhs - self.rhs
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.lhs >= self.rhs - tol
    }

    pub fn strict_holds(&self, tol: f64) -> bool {
        self.lhs >= self.strict_rhs - tol
    }
}

/// `‖h̃ᵢⱼ − h̄ᵢⱼ‖ > ‖ĥᵢ − h̄ᵢ‖ + ‖ĥⱼ − h̄ⱼ‖`, returned with both sides.
pub fn check_assumption(
    single_i: &HeadDecomposition,
    single_j: &HeadDecomposition,
    zero_shot: &TwoPluginDecomposition,
    joint_output: &[f64],
) -> (bool, f64, f64) {
    let lhs = norm(&sub(joint_output, &zero_shot.base));
    let rhs = norm(&sub(&single_i.output, &single_i.base)) + norm(&sub(&single_j.output, &single_j.base));
    (lhs > rhs, lhs, rhs)
}

/// Single-head estimate from the three decompositions and the joint head output.
pub fn single_head_bound(
    single_i: &HeadDecomposition,
    single_j: &HeadDecomposition,
    zero_shot: &TwoPluginDecomposition,
    joint_output: &[f64],
) -> BoundEstimate {
    let (assumption_holds, assumption_lhs, assumption_rhs) = check_assumption(single_i, single_j, zero_shot, joint_output);
    let t_i_minus_alpha = single_i.t - zero_shot.alpha;
    let t_j_minus_beta = single_j.t - zero_shot.beta;
    let rhs = t_i_minus_alpha * single_i.offset_norm + t_j_minus_beta * single_j.offset_norm;
    let strict_rhs = assumption_rhs - norm(&sub(&zero_shot.output, &zero_shot.base));
    BoundEstimate {
        layer: zero_shot.layer,
        head: zero_shot.head,
        query: zero_shot.query,
        lhs: norm(&sub(joint_output, &zero_shot.output)),
        rhs,
        strict_rhs,
        assumption_lhs,
        assumption_rhs,
        assumption_holds,
        mass_conditions: zero_shot.mass_conditions(single_i, single_j),
        max_residual: single_i.residual.max(single_j.residual).max(zero_shot.residual),
        t_i_minus_alpha,
        t_j_minus_beta,
        offset_i_norm: single_i.offset_norm,
        offset_j_norm: single_j.offset_norm,
        zero_shot_output: zero_shot.output.clone(),
        joint_output: joint_output.to_vec(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QrSummary {
    pub lambda_o: f64,
    pub orthogonality_error: f64,
    pub reconstruction_error: f64,
    pub rank_deficient: bool,
}

pub fn qr_summary(wo: &Tensor) -> Result<(Qr, QrSummary)> {
    let qr = Qr::of(wo)?;
    let summary = QrSummary {
        lambda_o: qr.mean_abs_diagonal(),
        orthogonality_error: qr.orthogonality_error(),
        reconstruction_error: qr.reconstruction_error(wo),
        rank_deficient: qr.is_rank_deficient(1e-10),
    };
    Ok((qr, summary))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadBound {
    pub layer: usize,
    pub query: usize,
    pub heads: usize,
    pub lambda_o: f64,
    /// Single-head bound of every head.
    pub per_head: Vec<f64>,
    /// `‖concat(h̃ − ĥ)·W_o‖`.
    pub lhs: f64,
    /// `λ̂·‖concat(h̃ − ĥ)·Q‖`, the approximated left side.
    pub approx: f64,
    /// `lhs − approx`.
    pub residual: f64,
    pub rhs: f64,
    /// Heads whose single-head instance is eligible.
    pub eligible_heads: usize,
}

/// Multi-head estimate for one query; `heads[k]` is head `k`'s estimate.
pub fn multi_head_bound(wo: &Tensor, qr: &Qr, heads: &[BoundEstimate]) -> Result<MultiHeadBound> {
    let k = heads.len();
    if k == 0 {
        return Err(Error::Invalid("no heads".into()));
    }
    let mut diff = Vec::new();
    for h in heads {
        diff.extend(sub(&h.joint_output, &h.zero_shot_output));
    }
    if diff.len() != wo.rows() {
        return Err(Error::Shape { op: "multi_head_bound", detail: format!("{} concatenated dims for W_o {:?}", diff.len(), wo.shape()) });
    }
    let row = Tensor::new(1, diff.len(), diff)?;
    let lhs = norm(row.matmul(wo)?.data());
    let lambda_o = qr.mean_abs_diagonal();
    let approx = lambda_o * norm(row.matmul(&qr.q)?.data());
    let per_head: Vec<f64> = heads.iter().map(|h| h.rhs).collect();
    let rhs = lambda_o / (k as f64).sqrt() * per_head.iter().sum::<f64>();
    Ok(MultiHeadBound {
        layer: heads[0].layer,
        query: heads[0].query,
        heads: k,
        lambda_o,
        per_head,
        lhs,
        approx,
        residual: lhs - approx,
        rhs,
        eligible_heads: heads.iter().filter(|h| h.eligible()).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(s: f64, base: Vec<f64>, offset: Vec<f64>) -> HeadDecomposition {
        let output: Vec<f64> = base.iter().zip(&offset).map(|(b, o)| s * b + (1.0 - s) * o).collect();
        HeadDecomposition {
            layer: 0,
            head: 0,
            query: 0,
            s,
            t: 1.0 - s,
            offset_norm: norm(&offset),
            base,
            offset,
            output,
            residual: 0.0,
        }
    }

    #[test]
    fn closed_form_rhs() {
        // s = 0.8, t = 0.2, α = 0.1, ‖Δĥᵢ‖ = 5 (3-4-5); plugin j: t = 0.3, β = 0.1, ‖Δĥⱼ‖ = 1.
        let si = single(0.8, vec![1.0, 0.0], vec![3.0, 4.0]);
        let sj = single(0.7, vec![1.0, 0.0], vec![0.0, 1.0]);
        let zs = TwoPluginDecomposition {
            layer: 0,
            head: 0,
            query: 0,
            gamma: 0.8,
            alpha: 0.1,
            beta: 0.1,
            base: vec![1.0, 0.0],
            offset_i: vec![3.0, 4.0],
            offset_j: vec![0.0, 1.0],
            output: vec![0.8 + 0.3, 0.4 + 0.1],
            residual: 0.0,
        };
        let est = single_head_bound(&si, &sj, &zs, &[4.0, 4.0]);
        assert!((est.rhs - (0.1 * 5.0 + 0.2 * 1.0)).abs() < 1e-15);
        assert!((est.t_i_minus_alpha - 0.1).abs() < 1e-15);
        assert!(!est.mass_conditions, "gamma equals s_i");
    }

    #[test]
    fn identical_outputs_cannot_satisfy_assumption() {
        let si = single(0.9, vec![1.0, 1.0], vec![2.0, 0.0]);
        let zs = TwoPluginDecomposition {
            layer: 0,
            head: 0,
            query: 0,
            gamma: 1.0,
            alpha: 0.0,
            beta: 0.0,
            base: vec![1.0, 1.0],
            offset_i: vec![0.0; 2],
            offset_j: vec![0.0; 2],
            output: vec![1.0, 1.0],
            residual: 0.0,
        };
        let est = single_head_bound(&si, &si, &zs, &[1.0, 1.0]);
        assert_eq!(est.lhs, 0.0);
        assert!(!est.assumption_holds && !est.eligible());
    }

    #[test]
    fn single_head_reduction_is_lambda_scaled() {
        let wo = Tensor::from_rows(&[&[2.0, 1.0], &[0.0, 3.0]]);
        let (qr, _) = qr_summary(&wo).unwrap();
        let si = single(0.8, vec![1.0, 0.0], vec![0.0, 2.0]);
        let zs = TwoPluginDecomposition {
            layer: 1,
            head: 0,
            query: 2,
            gamma: 0.7,
            alpha: 0.15,
            beta: 0.15,
            base: vec![1.0, 0.0],
            offset_i: vec![0.0, 2.0],
            offset_j: vec![0.0, 2.0],
            output: vec![0.7, 0.6],
            residual: 0.0,
        };
        let est = single_head_bound(&si, &si, &zs, &[1.5, 1.0]);
        let m = multi_head_bound(&wo, &qr, std::slice::from_ref(&est)).unwrap();
        assert_eq!(m.rhs, m.lambda_o * est.rhs);
        assert!((m.lambda_o - 2.5).abs() < 1e-12);
    }
}
