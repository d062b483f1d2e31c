//! Splitting a plugged attention head into base and plugin parts.
//!
//! With attention weights `w` over keys owned by the source or by plugins,
//! the head output `h = Σ w_k v_k` splits into masses and value-weighted
//! averages per owner group:
//!
//! * one plugin: `h = s·h̄ + t·Δh`
//! * two plugins: `h = γ·h̄ + α·Δh₁ + β·Δh₂`
//!
//! `h̄` is the output renormalised over source keys, which is what the head
//! would produce if the plugin keys were absent.

use crate::error::{Error, Result};
use crate::plugins::{KeyOwner, PluginForward};
use crate::tensor::Tensor;

/// Below this mass a group is treated as absent.
pub const MASS_FLOOR: f64 = 1e-12;

/// Attention of one query in one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadInstance {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    pub weights: Vec<f64>,
    /// keys × head_dim.
    pub values: Tensor,
    /// Observed head output.
    pub output: Vec<f64>,
    pub owners: Vec<KeyOwner>,
}

impl HeadInstance {
    pub fn from_forward(fwd: &PluginForward, layer: usize, head: usize, query: usize) -> Result<Self> {
        let w = fwd.trace.attention.get(layer).and_then(|l| l.get(head)).ok_or_else(|| {
            Error::Invalid(format!("no head {head} in layer {layer}"))
        })?;
        if query >= w.rows() {
            return Err(Error::Invalid(format!("query {query} outside {} rows", w.rows())));
        }
        let owners = fwd.layout.key_owners();
        if owners.len() != w.cols() {
            return Err(Error::Shape { op: "decompose", detail: format!("{} owners for {} keys", owners.len(), w.cols()) });
        }
        Ok(Self {
            layer,
            head,
            query,
            weights: w.row(query).to_vec(),
            values: fwd.trace.head_values[layer][head].clone(),
            output: fwd.trace.head_outputs[layer][head].row(query).to_vec(),
            owners,
        })
    }

    /// Mass and unnormalised value sum of the keys selected by `pick`.
    fn group(&self, pick: impl Fn(KeyOwner) -> bool) -> (f64, Vec<f64>) {
        let mut mass = 0.0;
        let mut acc = vec![0.0; self.values.cols()];
        for (k, (&w, &o)) in self.weights.iter().zip(&self.owners).enumerate() {
            if pick(o) {
                mass += w;
                for (a, v) in acc.iter_mut().zip(self.values.row(k)) {
                    *a += w * v;
                }
            }
        }
        (mass, acc)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn scaled(v: &[f64], c: f64) -> Vec<f64> {
    v.iter().map(|x| x * c).collect()
}

fn average(mass: f64, acc: &[f64]) -> Vec<f64> {
    if mass > 0.0 {
        scaled(acc, 1.0 / mass)
    } else {
        vec![0.0; acc.len()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadDecomposition {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    /// Mass on source keys.
    pub s: f64,
    /// Mass on plugin keys.
    pub t: f64,
    pub base: Vec<f64>,
    pub offset: Vec<f64>,
    pub offset_norm: f64,
    /// `h` as observed.
    pub output: Vec<f64>,
    /// `‖h − (s·h̄ + t·Δh)‖`.
    pub residual: f64,
}

/// `h = s·h̄ + t·Δh`; every non-source key counts as plugin.
pub fn decompose_head(inst: &HeadInstance) -> Result<HeadDecomposition> {
    let (s, base_acc) = inst.group(|o| o == KeyOwner::Base);
    let (t, plug_acc) = inst.group(|o| o != KeyOwner::Base);
    if s < MASS_FLOOR {
        return Err(Error::Degenerate(format!("no attention mass on source keys (layer {}, head {})", inst.layer, inst.head)));
    }
    let base = average(s, &base_acc);
    if t < MASS_FLOOR && norm(&plug_acc) > 0.0 && norm(&sub(&inst.output, &base)) > 1e-12 {
        return Err(Error::Degenerate("plugin mass vanishes but output moved".into()));
    }
    let offset = average(t, &plug_acc);
    let recon: Vec<f64> = base.iter().zip(&offset).map(|(b, o)| s * b + t * o).collect();
    Ok(HeadDecomposition {
        layer: inst.layer,
        head: inst.head,
        query: inst.query,
        s,
        t,
        offset_norm: norm(&offset),
        residual: norm(&sub(&inst.output, &recon)),
        base,
        offset,
        output: inst.output.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoPluginDecomposition {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub base: Vec<f64>,
    pub offset_i: Vec<f64>,
    pub offset_j: Vec<f64>,
    pub output: Vec<f64>,
    /// `‖h − (γ·h̄ + α·Δh₁ + β·Δh₂)‖`.
    pub residual: f64,
}

impl TwoPluginDecomposition {
    /// `|γ + α + β − 1|`.
    pub fn mass_error(&self) -> f64 {
        (self.gamma + self.alpha + self.beta - 1.0).abs()
    }

    /// Conditions γ < s_i, γ < s_j, α < t_i, β < t_j against the single-plugin runs.
    pub fn mass_conditions(&self, single_i: &HeadDecomposition, single_j: &HeadDecomposition) -> bool {
        self.gamma < single_i.s && self.gamma < single_j.s && self.alpha < single_i.t && self.beta < single_j.t
    }
}

/// `h = γ·h̄ + α·Δh₁ + β·Δh₂` for a combo of exactly two plugins.
pub fn decompose_two(inst: &HeadInstance) -> Result<TwoPluginDecomposition> {
    if inst.owners.iter().any(|o| matches!(o, KeyOwner::Plugin(i) if *i > 1)) {
        return Err(Error::Invalid("decompose_two needs at most two plugins".into()));
    }
    let (gamma, base_acc) = inst.group(|o| o == KeyOwner::Base);
    let (alpha, acc_i) = inst.group(|o| o == KeyOwner::Plugin(0));
    let (beta, acc_j) = inst.group(|o| o == KeyOwner::Plugin(1));
    if gamma < MASS_FLOOR {
        return Err(Error::Degenerate("no attention mass on source keys".into()));
    }
    let base = average(gamma, &base_acc);
    let offset_i = average(alpha, &acc_i);
    let offset_j = average(beta, &acc_j);
    let recon: Vec<f64> =
        (0..base.len()).map(|c| gamma * base[c] + alpha * offset_i[c] + beta * offset_j[c]).collect();
    Ok(TwoPluginDecomposition {
        layer: inst.layer,
        head: inst.head,
        query: inst.query,
        gamma,
        alpha,
        beta,
        residual: norm(&sub(&inst.output, &recon)),
        base,
        offset_i,
        offset_j,
        output: inst.output.clone(),
    })
}
