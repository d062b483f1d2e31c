//! Householder QR factorisation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Qr {
    /// m×m orthogonal factor.
    pub q: Tensor,
    /// m×n upper-triangular factor.
    pub r: Tensor,
}

impl Qr {
    /// Factorises `a` (m×n, m ≥ n) as `a = q·r` with Householder reflections.
    pub fn of(a: &Tensor) -> Result<Qr> {
        let (m, n) = a.shape();
        if m < n {
            return Err(Error::Shape { op: "qr", detail: format!("needs rows >= cols, got {m}x{n}") });
        }
        let mut r = a.clone();
        let mut q = Tensor::identity(m);
        let mut v = vec![0.0; m];
        for j in 0..n.min(m - 1) {
            let norm = (j..m).map(|i| r.get(i, j).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let x0 = r.get(j, j);
            let alpha = if x0 >= 0.0 { -norm } else { norm };
            for i in j..m {
                v[i] = r.get(i, j);
            }
            v[j] -= alpha;
            let vnorm = (j..m).map(|i| v[i] * v[i]).sum::<f64>().sqrt();
            if vnorm == 0.0 {
                continue;
            }
            for x in &mut v[j..m] {
                *x /= vnorm;
            }
            // R <- (I - 2vvᵀ) R
            for c in 0..n {
                let dot: f64 = (j..m).map(|i| v[i] * r.get(i, c)).sum();
                for i in j..m {
                    let val = r.get(i, c) - 2.0 * v[i] * dot;
                    r.set(i, c, val);
                }
            }
            // Q <- Q (I - 2vvᵀ)
            for row in 0..m {
                let dot: f64 = (j..m).map(|i| q.get(row, i) * v[i]).sum();
                for i in j..m {
                    let val = q.get(row, i) - 2.0 * dot * v[i];
                    q.set(row, i, val);
                }
            }
            for i in j + 1..m {
                r.set(i, j, 0.0);
            }
        }
        Ok(Qr { q, r })
    }

    /// Mean absolute value of the diagonal of `r`.
    pub fn mean_abs_diagonal(&self) -> f64 {
        let k = self.r.rows().min(self.r.cols());
        (0..k).map(|i| self.r.get(i, i).abs()).sum::<f64>() / k as f64
    }

    /// True when some |r_ii| falls below `rel_tol` times the largest one.
    pub fn is_rank_deficient(&self, rel_tol: f64) -> bool {
        let k = self.r.rows().min(self.r.cols());
        let diag: Vec<f64> = (0..k).map(|i| self.r.get(i, i).abs()).collect();
        let max = diag.iter().copied().fold(0.0, f64::max);
        max == 0.0 || diag.iter().any(|&d| d < rel_tol * max)
    }

    /// max |QᵀQ − I|.
    pub fn orthogonality_error(&self) -> f64 {
        let qtq = self.q.transpose().matmul(&self.q).expect("square");
        qtq.max_abs_diff(&Tensor::identity(self.q.rows()))
    }

    /// max |QR − A|.
    pub fn reconstruction_error(&self, a: &Tensor) -> f64 {
        self.q.matmul(&self.r).expect("conformable").max_abs_diff(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn random_square() {
        let mut rng = Rng::new(12);
        let a = Tensor::randn(8, 8, 1.0, &mut rng);
        let qr = Qr::of(&a).unwrap();
        assert!(qr.orthogonality_error() < 1e-12);
        assert!(qr.reconstruction_error(&a) < 1e-12);
        for i in 0..8 {
            for j in 0..i {
                assert_eq!(qr.r.get(i, j), 0.0);
            }
        }
        assert!(!qr.is_rank_deficient(1e-10));
    }

    #[test]
    fn orthogonal_input_has_unit_diagonal() {
        // A rotation: R is ±I, so the mean |diag| is 1.
        let (c, s) = (0.6, 0.8);
        let a = Tensor::from_rows(&[&[c, -s], &[s, c]]);
        let qr = Qr::of(&a).unwrap();
        assert!((qr.mean_abs_diagonal() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn tall_matrix() {
        let mut rng = Rng::new(13);
        let a = Tensor::randn(6, 3, 1.0, &mut rng);
        let qr = Qr::of(&a).unwrap();
        assert!(qr.reconstruction_error(&a) < 1e-12);
        assert!(Qr::of(&a.transpose()).is_err());
    }

    #[test]
    fn detects_rank_deficiency() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(Qr::of(&a).unwrap().is_rank_deficient(1e-10));
    }
}
