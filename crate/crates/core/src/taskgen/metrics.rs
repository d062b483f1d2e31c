//! Constraint accuracy, CSR and performance gaps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Aspect, Example};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Verifier accuracy per aspect; CSR for `KEYWORD`.
    pub per_aspect: BTreeMap<String, f64>,
    /// Mean of the per-aspect scores.
    pub average: f64,
    pub count: usize,
}

/// Scores `outputs[i]` against `examples[i]` for each aspect in `aspects`.
pub fn evaluate(outputs: &[Vec<usize>], examples: &[Example], aspects: &[Aspect]) -> Result<Metrics> {
    if outputs.len() != examples.len() {
        return Err(Error::Invalid(format!("{} outputs for {} examples", outputs.len(), examples.len())));
    }
    let mut per_aspect = BTreeMap::new();
    for &a in aspects {
        let mut total = 0.0;
        for (y, ex) in outputs.iter().zip(examples) {
            let v = ex.value(a).ok_or_else(|| Error::Invalid(format!("example lacks a {a} label")))?;
            total += a.verify(&ex.x, y, v)?;
        }
        let score = if examples.is_empty() { 0.0 } else { total / examples.len() as f64 };
        per_aspect.insert(a.name().to_string(), score);
    }
    let average = if aspects.is_empty() {
        0.0
    } else {
        aspects.iter().map(|a| per_aspect[a.name()]).sum::<f64>() / aspects.len() as f64
    };
    Ok(Metrics { per_aspect, average, count: examples.len() })
}

/// `multi − single` for every aspect scored in `multi`.
pub fn performance_gap(single: &Metrics, multi: &Metrics) -> Result<BTreeMap<String, f64>> {
    multi
        .per_aspect
        .iter()
        .map(|(name, m)| {
            let s = single.per_aspect.get(name).ok_or_else(|| Error::UnknownAspect(name.clone()))?;
            Ok((name.clone(), m - s))
        })
        .collect()
}
