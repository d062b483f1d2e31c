//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Which parameter entries to perturb.
#[derive(Clone, Copy, Debug)]
pub enum EntrySelection {
    All,
    /// `count` distinct entries drawn uniformly over all parameters.
    Sample { count: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (parameter index, flat entry index) of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
    pub passed: bool,
}

fn eval_loss<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let v = g.value(loss);
    if v.shape() != (1, 1) {
        return Err(Error::NonScalarLoss { rows: v.rows(), cols: v.cols() });
    }
    let l = v.item();
    if !l.is_finite() {
        return Err(Error::NonFinite("grad_check loss"));
    }
    Ok(l)
}

/// Loss value and reverse-mode gradient for every tensor in `params`.
pub fn analytic_gradients<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let l = g.value(loss).item();
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
        .collect();
    Ok((l, grads))
}

fn select_entries(params: &[Tensor], selection: EntrySelection) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(pi, p)| (0..p.len()).map(move |e| (pi, e))).collect();
    match selection {
        EntrySelection::All => all,
        EntrySelection::Sample { count, seed } => {
            let mut all = all;
            let mut rng = Rng::derive(seed, "gradcheck/entries");
            let count = count.min(all.len());
            // Partial Fisher–Yates: the first `count` slots become the sample.
            for i in 0..count {
                let j = i + rng.below(all.len() - i);
                all.swap(i, j);
            }
            all.truncate(count);
            all.sort_unstable();
            all
        }
    }
}

/// Compares supplied gradients against central differences of `f`.
pub fn compare_gradients<F>(
    f: &F,
    params: &[Tensor],
    analytic: &[Tensor],
    step: f64,
    tol: f64,
    selection: EntrySelection,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && tol > 0.0) {
        return Err(Error::Invalid(format!("grad_check needs positive step and tol, got {step}, {tol}")));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report =
        GradCheckReport { checked: 0, max_rel_error: 0.0, max_abs_error: 0.0, worst: None, tol, passed: true };
    for (pi, e) in select_entries(params, selection) {
        let orig = work[pi].data()[e];
        work[pi].data_mut()[e] = orig + step;
        let plus = eval_loss(f, &work)?;
        work[pi].data_mut()[e] = orig - step;
        let minus = eval_loss(f, &work)?;
        work[pi].data_mut()[e] = orig;

        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[pi].data()[e];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = Some((pi, e));
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

/// Reverse-mode gradients of `f` checked against central differences.
pub fn grad_check<F>(f: &F, params: &[Tensor], step: f64, tol: f64, selection: EntrySelection) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(f, params)?;
    compare_gradients(f, params, &analytic, step, tol, selection)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_at_three() {
        let f = |g: &mut Graph, p: &[Var]| {
            let sq = g.mul(p[0], p[0])?;
            g.sum(sq)
        };
        let params = [Tensor::scalar(3.0)];
        let (_, grads) = analytic_gradients(&f, &params).unwrap();
        assert_eq!(grads[0].item(), 6.0);
        let r = grad_check(&f, &params, 1e-5, 1e-8, EntrySelection::All).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_abs_error < 1e-8);
    }

    #[test]
    fn sigmoid_chain_passes() {
        let mut rng = Rng::new(4);
        let f = |g: &mut Graph, p: &[Var]| {
            let a = g.matmul(p[0], p[1])?;
            let s = g.sigmoid(a)?;
            let s2 = g.sigmoid(s)?;
            let m = g.mul(s2, s)?;
            g.mean(m)
        };
        let params = [Tensor::randn(3, 4, 1.0, &mut rng), Tensor::randn(4, 2, 1.0, &mut rng)];
        let r = grad_check(&f, &params, 1e-5, 1e-4, EntrySelection::All).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 20);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut rng = Rng::new(8);
        let f = |g: &mut Graph, p: &[Var]| {
            let s = g.sigmoid(p[0])?;
            g.sum(s)
        };
        let params = [Tensor::randn(2, 3, 1.0, &mut rng)];
        let (_, mut grads) = analytic_gradients(&f, &params).unwrap();
        for v in grads[0].data_mut() {
            *v *= 1.1;
        }
        let r = compare_gradients(&f, &params, &grads, 1e-5, 1e-4, EntrySelection::All).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.05);
    }

    #[test]
    fn rejects_bad_step() {
        let f = |g: &mut Graph, p: &[Var]| g.sum(p[0]);
        assert!(grad_check(&f, &[Tensor::scalar(1.0)], 0.0, 1e-4, EntrySelection::All).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let params = [Tensor::zeros(10, 10), Tensor::zeros(3, 3)];
        let a = select_entries(&params, EntrySelection::Sample { count: 17, seed: 1 });
        let b = select_entries(&params, EntrySelection::Sample { count: 17, seed: 1 });
        assert_eq!(a, b);
        assert_eq!(a.len(), 17);
        let mut dedup = a.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 17);
    }
}
