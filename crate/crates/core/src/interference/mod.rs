//! Mutual interference between plugins, its decomposition inside attention
//! heads, lower-bound checks, and gate diagnostics.

mod bound;
mod decompose;

pub use bound::{
    check_assumption, multi_head_bound, qr_summary, single_head_bound, BoundEstimate, MultiHeadBound, QrSummary,
    RESIDUAL_TOL,
};
pub use decompose::{decompose_head, decompose_two, HeadDecomposition, HeadInstance, TwoPluginDecomposition, MASS_FLOOR};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plugins::{combine_plugins, forward_with_plugins, Family, Plugin, PluginCombo};
use crate::taskgen::{AspectValue, Example};
use crate::transformer::BaseModel;

/// Per-layer interference of a combo: separately vs jointly trained plugins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIReport {
    pub family: Family,
    pub aspects: Vec<String>,
    /// `per_layer[j]` belongs to encoder layer `j + 1`.
    pub per_layer: Vec<f64>,
    pub examples: usize,
}

fn values_for(combo: &PluginCombo, ex: &Example) -> Result<Vec<AspectValue>> {
    combo
        .aspects()
        .into_iter()
        .map(|a| ex.value(a).cloned().ok_or_else(|| Error::Invalid(format!("example lacks a {a} label"))))
        .collect()
}

/// Mean over examples of the mean L2 distance between hidden states at
/// source positions, per encoder layer.
pub fn measure_mi(model: &BaseModel, separate: &PluginCombo, joint: &PluginCombo, eval: &[Example]) -> Result<MIReport> {
    let family = separate.family().ok_or_else(|| Error::Invalid("empty combo".into()))?;
    if joint.family() != Some(family) || joint.aspects() != separate.aspects() {
        return Err(Error::Invalid("separate and joint combos differ in family or aspects".into()));
    }
    if eval.is_empty() {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    let layers = model.config.enc_layers;
    let mut sums = vec![0.0; layers];
    for ex in eval {
        let values = values_for(separate, ex)?;
        let a = forward_with_plugins(model, separate, &ex.x, &values)?;
        let b = forward_with_plugins(model, joint, &ex.x, &values)?;
        let rows = a.layout.source.clone();
        for j in 0..layers {
            let (ha, hb) = (&a.trace.hidden[j], &b.trace.hidden[j]);
            let mut total = 0.0;
            for r in rows.clone() {
                total += decompose::norm(&decompose::sub(ha.row(r), hb.row(r)));
            }
            sums[j] += total / rows.len() as f64;
        }
    }
    Ok(MIReport {
        family,
        aspects: separate.aspects().iter().map(|a| a.name().to_string()).collect(),
        per_layer: sums.into_iter().map(|s| s / eval.len() as f64).collect(),
        examples: eval.len(),
    })
}

/// One (family, seed) curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveEntry {
    pub family: Family,
    pub seed: u64,
    pub report: MIReport,
}

/// `family,seed,layer,mi` rows, layers numbered from 1.
pub fn mi_curve_csv(entries: &[CurveEntry]) -> String {
    let mut out = String::from("family,seed,layer,mi\n");
    for e in entries {
        for (j, mi) in e.report.per_layer.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", e.family, e.seed, j + 1, mi);
        }
    }
    out
}

/// Mean and sample standard deviation over seeds, per family and layer.
pub fn mi_curve_summary(entries: &[CurveEntry]) -> Vec<(Family, usize, f64, f64)> {
    let mut out = Vec::new();
    for family in Family::ALL {
        let curves: Vec<&MIReport> = entries.iter().filter(|e| e.family == family).map(|e| &e.report).collect();
        let Some(first) = curves.first() else { continue };
        for j in 0..first.per_layer.len() {
            let xs: Vec<f64> = curves.iter().map(|c| c.per_layer[j]).collect();
            let (mean, sd) = mean_sd(&xs);
            out.push((family, j + 1, mean, sd));
        }
    }
    out
}

pub fn mi_curve_summary_csv(entries: &[CurveEntry]) -> String {
    let mut out = String::from("family,layer,mean,sd\n");
    for (f, j, m, s) in mi_curve_summary(entries) {
        let _ = writeln!(out, "{f},{j},{m},{s}");
    }
    out
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Bound instances of one analysis run.
#[derive(Clone, Debug)]
pub struct BoundAnalysis {
    pub heads: Vec<BoundEstimate>,
    pub multi: Vec<MultiHeadBound>,
    /// QR summary of `W_o` per encoder layer.
    pub qr: Vec<QrSummary>,
}

impl BoundAnalysis {
    /// Share of head instances satisfying the interaction assumption.
    pub fn assumption_fraction(&self) -> f64 {
        if self.heads.is_empty() {
            return 0.0;
        }
        self.heads.iter().filter(|h| h.assumption_holds).count() as f64 / self.heads.len() as f64
    }

    pub fn eligible(&self) -> impl Iterator<Item = &BoundEstimate> {
        self.heads.iter().filter(|h| h.eligible())
    }

    /// `layer,head,query_pos,lhs,rhs,assumption,margin`; layers from 1.
    pub fn bound_csv(&self) -> String {
        let mut out = String::from("layer,head,query_pos,lhs,rhs,assumption,margin\n");
        for h in &self.heads {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                h.layer + 1,
                h.head,
                h.query,
                h.lhs,
                h.rhs,
                h.eligible(),
                h.margin()
            );
        }
        out
    }

    /// Every component of every head instance.
    pub fn detail_csv(&self) -> String {
        let mut out = String::from(
            "layer,head,query_pos,lhs,rhs,strict_rhs,assumption_lhs,assumption_rhs,assumption_holds,mass_conditions,max_residual,t_i_minus_alpha,t_j_minus_beta,offset_i_norm,offset_j_norm\n",
        );
        for h in &self.heads {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                h.layer + 1,
                h.head,
                h.query,
                h.lhs,
                h.rhs,
                h.strict_rhs,
                h.assumption_lhs,
                h.assumption_rhs,
                h.assumption_holds,
                h.mass_conditions,
                h.max_residual,
                h.t_i_minus_alpha,
                h.t_j_minus_beta,
                h.offset_i_norm,
                h.offset_j_norm
            );
        }
        out
    }

    /// Multi-head rows, per-head terms joined by `;`.
    pub fn multihead_csv(&self) -> String {
        let mut out = String::from("layer,query_pos,heads,lambda_o,lhs,approx,residual,rhs,eligible_heads,per_head\n");
        for m in &self.multi {
            let terms: Vec<String> = m.per_head.iter().map(|t| t.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                m.layer + 1,
                m.query,
                m.heads,
                m.lambda_o,
                m.lhs,
                m.approx,
                m.residual,
                m.rhs,
                m.eligible_heads,
                terms.join(";")
            );
        }
        out
    }

    pub fn qr_csv(&self) -> String {
        let mut out = String::from("layer,lambda_o,orthogonality_error,reconstruction_error,rank_deficient\n");
        for (j, q) in self.qr.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                j + 1,
                q.lambda_o,
                q.orthogonality_error,
                q.reconstruction_error,
                q.rank_deficient
            );
        }
        out
    }
}

/// Runs every bound check for a pair of aspects over `eval`.
///
/// `separate` and `joint` are `[plugin i, plugin j]`. Each example is
/// encoded four times: plugin i alone, plugin j alone, the zero-shot pair
/// and the joint pair. Every (layer, head, source position) is an instance.
pub fn analyze_bounds(model: &BaseModel, separate: [&Plugin; 2], joint: [&Plugin; 2], eval: &[Example]) -> Result<BoundAnalysis> {
    let alone_i = combine_plugins(&[separate[0].clone()])?;
    let alone_j = combine_plugins(&[separate[1].clone()])?;
    let zero_shot = combine_plugins(&[separate[0].clone(), separate[1].clone()])?;
    let joint = combine_plugins(&[joint[0].clone(), joint[1].clone()])?;
    if joint.aspects() != zero_shot.aspects() {
        return Err(Error::Invalid("joint plugins cover different aspects".into()));
    }
    let config = &model.config;
    let mut qrs = Vec::with_capacity(config.enc_layers);
    let mut summaries = Vec::with_capacity(config.enc_layers);
    for layer in &model.params.encoder {
        let (qr, s) = qr_summary(&layer.attn.wo)?;
        if s.rank_deficient {
            return Err(Error::Degenerate("rank-deficient output projection".into()));
        }
        qrs.push(qr);
        summaries.push(s);
    }
    let mut heads = Vec::new();
    let mut multi = Vec::new();
    for ex in eval {
        let values = values_for(&zero_shot, ex)?;
        let fi = forward_with_plugins(model, &alone_i, &ex.x, &values[..1])?;
        let fj = forward_with_plugins(model, &alone_j, &ex.x, &values[1..])?;
        let fz = forward_with_plugins(model, &zero_shot, &ex.x, &values)?;
        let fjoint = forward_with_plugins(model, &joint, &ex.x, &values)?;
        for layer in 0..config.enc_layers {
            for q in fz.layout.source.clone() {
                let mut per_head = Vec::with_capacity(config.heads);
                for head in 0..config.heads {
                    let si = decompose_head(&HeadInstance::from_forward(&fi, layer, head, q)?)?;
                    let sj = decompose_head(&HeadInstance::from_forward(&fj, layer, head, q)?)?;
                    let z = decompose_two(&HeadInstance::from_forward(&fz, layer, head, q)?)?;
                    let joint_out = fjoint.trace.head_outputs[layer][head].row(q);
                    per_head.push(single_head_bound(&si, &sj, &z, joint_out));
                }
                multi.push(multi_head_bound(&model.params.encoder[layer].attn.wo, &qrs[layer], &per_head)?);
                heads.extend(per_head);
            }
        }
    }
    Ok(BoundAnalysis { heads, multi, qr: summaries })
}

/// Per-layer gate and shift magnitudes of a gated plugin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    /// Layer number, from 1.
    pub layer: usize,
    /// Mean of σ(G) over all entries.
    pub gate_mean: f64,
    /// Mean over rows of the L1 norm of P.
    pub p_l1_mean: f64,
}

pub fn gate_stats(plugin: &Plugin) -> Result<Vec<GateStats>> {
    if plugin.family != Family::Gated {
        return Err(Error::FamilyMismatch { expected: "gated".into(), found: plugin.family.to_string() });
    }
    let layers = (plugin.tensors.len() - 1) / 2;
    Ok((0..layers)
        .map(|j| {
            let (p, g) = plugin.gate_layer(j).expect("gated");
            let gate_mean = g.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).sum::<f64>() / g.len() as f64;
            let p_l1_mean = (0..p.rows()).map(|r| p.row(r).iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>() / p.rows() as f64;
            GateStats { layer: j + 1, gate_mean, p_l1_mean }
        })
        .collect())
}

pub fn gates_csv(stats: &[GateStats]) -> String {
    let mut out = String::from("layer,gate_mean,p_l1_mean\n");
    for s in stats {
        let _ = writeln!(out, "{},{},{}", s.layer, s.gate_mean, s.p_l1_mean);
    }
    out
}

/// Pearson correlation; `None` when either side is constant.
pub fn correlation(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (mx, _) = mean_sd(xs);
    let (my, _) = mean_sd(ys);
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::Aspect;
    use crate::transformer::ModelConfig;

    #[test]
    fn fresh_gates_are_neutral() {
        let config = ModelConfig::default();
        let mut p = Plugin::init(Aspect::Shift, Family::Gated, &config, 2);
        for s in gate_stats(&p).unwrap() {
            assert_eq!(s.gate_mean, 0.5);
        }
        for j in 0..config.enc_layers {
            p.gate_layer_mut(j).unwrap().0.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(gate_stats(&p).unwrap().iter().all(|s| s.p_l1_mean == 0.0));
        let prefix = Plugin::init(Aspect::Shift, Family::Prefix, &config, 2);
        assert!(gate_stats(&prefix).is_err());
        assert!(gates_csv(&gate_stats(&p).unwrap()).starts_with("layer,gate_mean,p_l1_mean\n1,0.5,0\n"));
    }

    #[test]
    fn correlation_basics() {
        assert!((correlation(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(correlation(&[1.0, 1.0], &[2.0, 3.0]), None);
    }
}
