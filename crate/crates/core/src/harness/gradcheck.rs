use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plugins::{build_input, encode_with_plugins, BoundCombo, Family, Plugin};
use crate::rng::Rng;
use crate::taskgen::{compose, Aspect, AspectValue};
use crate::tensor::{grad_check, EntrySelection, GradCheckReport, Graph, Tensor, Var};
use crate::transformer::{sequence_loss, BaseModel, ModelConfig, ModelParams};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

impl GradcheckCase {
    fn from_report(name: &str, r: &GradCheckReport) -> Self {
        Self {
            name: name.to_string(),
            checked: r.checked,
            max_rel_error: r.max_rel_error,
            max_abs_error: r.max_abs_error,
            passed: r.passed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSuite {
    pub cases: Vec<GradcheckCase>,
    pub checked: usize,
    pub max_rel_error: f64,
    pub step: f64,
    pub tol: f64,
    pub passed: bool,
}

fn rebuild(template: &ModelParams<Tensor>, vars: &[Var]) -> Result<ModelParams<Var>> {
    let mut it = vars.iter();
    template.try_map(&mut |_, _| it.next().copied().ok_or_else(|| Error::Invalid("too few variables".into())))
}

/// Reverse-mode gradients of the sequence loss against central differences:
/// once over the base encoder–decoder parameters, once over each plugin
/// family's parameters with the base held fixed.
pub fn gradcheck_suite(config: &ModelConfig, seed: u64, entries_per_case: usize) -> Result<GradcheckSuite> {
    let mut base = BaseModel::init(config.clone(), seed)?;
    // Perturb the layer-norm affines and biases off their initial constants.
    let mut rng = Rng::derive(seed, "gradcheck/perturb");
    base.params.visit_mut(&mut |_, t| {
        for v in t.data_mut() {
            *v += 0.05 * rng.normal();
        }
    });
    let x = [12, 17, 25, 31, 14];
    let value = AspectValue::label("+1");
    let target = compose(&x, &[(Aspect::Shift, value.clone())])?;
    let mut cases = Vec::new();

    let plain = build_input(&x, &[])?;
    let mut leaves = Vec::new();
    base.params.visit(&mut |_, t| leaves.push(t.clone()));
    let stack = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let p = rebuild(&base.params, vars)?;
        let bound = BoundCombo { family: None, vars: Vec::new() };
        let enc = encode_with_plugins(g, &p, config, &bound, &plain)?;
        sequence_loss(g, &p, config, &target, enc.output)
    };
    let r = grad_check(
        &stack,
        &leaves,
        GRADCHECK_STEP,
        GRADCHECK_TOL,
        EntrySelection::Sample { count: entries_per_case, seed },
    )?;
    cases.push(GradcheckCase::from_report("stack", &r));

    let input = build_input(&x, &[(Aspect::Shift, value)])?;
    for family in Family::ALL {
        let mut plugin = Plugin::init(Aspect::Shift, family, config, seed);
        for t in &mut plugin.tensors {
            for v in t.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
        let f = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
            let p = base.params.bind(g, false);
            let bound = BoundCombo { family: Some(family), vars: vec![vars.to_vec()] };
            let enc = encode_with_plugins(g, &p, config, &bound, &input)?;
            sequence_loss(g, &p, config, &target, enc.output)
        };
        let r = grad_check(
            &f,
            &plugin.tensors,
            GRADCHECK_STEP,
            GRADCHECK_TOL,
            EntrySelection::Sample { count: entries_per_case, seed },
        )?;
        cases.push(GradcheckCase::from_report(family.tag(), &r));
    }
    Ok(GradcheckSuite {
        checked: cases.iter().map(|c| c.checked).sum(),
        max_rel_error: cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max),
        passed: cases.iter().all(|c| c.passed),
        cases,
        step: GRADCHECK_STEP,
        tol: GRADCHECK_TOL,
    })
}

/// Runs [`gradcheck_suite`] and fails with a verification error if any case fails.
pub fn cli_gradcheck(config: &ModelConfig, seed: u64, entries_per_case: usize) -> Result<GradcheckSuite> {
    let suite = gradcheck_suite(config, seed, entries_per_case)?;
    if !suite.passed {
        return Err(Error::Verification(format!(
            "gradient check failed: max relative error {:.3e} >= {:.0e}",
            suite.max_rel_error, suite.tol
        )));
    }
    Ok(suite)
}
