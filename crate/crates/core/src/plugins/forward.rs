//! Family-dispatched forward pass with plugins attached.

use std::ops::Range;

use super::{Family, PluginCombo};
use crate::error::{Error, Result};
use crate::taskgen::{Aspect, AspectValue, MAX_KEYWORDS};
use crate::tensor::{Graph, Tensor, Var};
use crate::transformer::{
    encode, greedy_decode_with, ActivationTrace, BaseModel, EncoderOutput, GateRows, Injection, ModelConfig,
    ModelParams, PluginRowPolicy, PrefixKv, SegmentedInput,
};

/// Who contributed an attention key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyOwner {
    /// The source `x`.
    Base,
    /// Plugin `i` of the combo: its constraint text and its own rows.
    Plugin(usize),
}

/// Where each part of the encoder input lives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputLayout {
    pub family: Option<Family>,
    pub source: Range<usize>,
    /// Constraint text rows of each plugin.
    pub constraints: Vec<Range<usize>>,
    /// Continuous prompt rows of each plugin (empty for prefixes).
    pub prompts: Vec<Range<usize>>,
    pub text_rows: usize,
    /// Prefix keys per plugin (0 unless the family is prefix).
    pub prefix_len: usize,
}

impl InputLayout {
    pub fn rows(&self) -> usize {
        self.text_rows + self.prompts.iter().map(|r| r.len()).sum::<usize>()
    }

    /// Owner of every key seen by encoder self-attention, in key order.
    pub fn key_owners(&self) -> Vec<KeyOwner> {
        let n = self.constraints.len();
        let mut out = Vec::new();
        for i in 0..n {
            out.extend(std::iter::repeat(KeyOwner::Plugin(i)).take(self.prefix_len));
        }
        out.extend(self.source.clone().map(|_| KeyOwner::Base));
        for (i, r) in self.constraints.iter().enumerate() {
            out.extend(r.clone().map(|_| KeyOwner::Plugin(i)));
        }
        for (i, r) in self.prompts.iter().enumerate() {
            out.extend(r.clone().map(|_| KeyOwner::Plugin(i)));
        }
        out
    }
}

/// Source segment followed by each aspect's constraint text, in the given order.
pub fn build_input(x: &[usize], requests: &[(Aspect, AspectValue)]) -> Result<SegmentedInput> {
    let mut input = SegmentedInput::source(x);
    for (i, (a, v)) in requests.iter().enumerate() {
        if requests[..i].iter().any(|(b, _)| b == a) {
            return Err(Error::DuplicateAspect(a.name().into()));
        }
        input.push(&a.render_constraint(v)?, a.segment_id());
    }
    Ok(input)
}

pub fn input_layout(input: &SegmentedInput, combo: &PluginCombo, config: &ModelConfig) -> InputLayout {
    let family = combo.family();
    let text_rows = input.len();
    let p = config.prompt_len;
    let prompts = match family {
        Some(f) if f.has_input_rows() => (0..combo.len()).map(|i| text_rows + i * p..text_rows + (i + 1) * p).collect(),
        _ => Vec::new(),
    };
    InputLayout {
        family,
        source: input.segment_range(0),
        constraints: (1..input.segments.len()).map(|i| input.segment_range(i)).collect(),
        prompts,
        text_rows,
        prefix_len: if family == Some(Family::Prefix) { p } else { 0 },
    }
}

/// Plugin tensors bound into a graph.
#[derive(Clone, Debug)]
pub struct BoundCombo {
    pub family: Option<Family>,
    pub vars: Vec<Vec<Var>>,
}

impl BoundCombo {
    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.iter().flatten().copied().collect()
    }
}

pub fn bind_combo(g: &mut Graph, combo: &PluginCombo, trainable: bool) -> BoundCombo {
    BoundCombo {
        family: combo.family(),
        vars: combo.plugins().iter().map(|p| p.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect()).collect(),
    }
}

fn concat(g: &mut Graph, parts: Vec<Var>) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat_rows(&parts)
    }
}

/// Concatenates the bound plugins into an encoder [`Injection`].
pub fn injection(g: &mut Graph, bound: &BoundCombo, config: &ModelConfig) -> Result<Injection> {
    let Some(family) = bound.family else { return Ok(Injection::none()) };
    let mut inj = Injection::none();
    match family {
        Family::Prompt | Family::Gated => {
            inj.prompt_rows = Some(concat(g, bound.vars.iter().map(|v| v[0]).collect())?);
        }
        Family::Prefix => {}
    }
    match family {
        Family::Prompt => {}
        Family::Prefix => {
            for j in 0..config.enc_layers {
                let mut heads = Vec::with_capacity(config.heads);
                for k in 0..config.heads {
                    let i = 2 * (j * config.heads + k);
                    let keys = concat(g, bound.vars.iter().map(|v| v[i]).collect())?;
                    let values = concat(g, bound.vars.iter().map(|v| v[i + 1]).collect())?;
                    heads.push(PrefixKv { keys, values });
                }
                inj.prefixes.push(heads);
            }
        }
        Family::Gated => {
            for j in 0..config.enc_layers {
                let shift = concat(g, bound.vars.iter().map(|v| v[1 + 2 * j]).collect())?;
                let gate = concat(g, bound.vars.iter().map(|v| v[2 + 2 * j]).collect())?;
                inj.gates.push(GateRows { gate, shift });
            }
        }
    }
    Ok(inj)
}

pub fn policy(family: Option<Family>) -> PluginRowPolicy {
    if family == Some(Family::Gated) {
        PluginRowPolicy::Replace
    } else {
        PluginRowPolicy::Standard
    }
}

pub fn encode_with_plugins(
    g: &mut Graph,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    bound: &BoundCombo,
    input: &SegmentedInput,
) -> Result<EncoderOutput> {
    let inj = injection(g, bound, config)?;
    encode(g, params, config, input, &inj, policy(bound.family))
}

fn requests(combo: &PluginCombo, values: &[AspectValue]) -> Result<Vec<(Aspect, AspectValue)>> {
    if values.len() != combo.len() {
        return Err(Error::Invalid(format!("{} values for {} plugins", values.len(), combo.len())));
    }
    Ok(combo.aspects().into_iter().zip(values.iter().cloned()).collect())
}

/// Encoder activations of one input under a combo.
#[derive(Clone, Debug)]
pub struct PluginForward {
    pub trace: ActivationTrace,
    pub layout: InputLayout,
    pub output: Tensor,
}

/// Encodes `x` with the combo attached; `values[i]` is the requested value of plugin `i`.
pub fn forward_with_plugins(model: &BaseModel, combo: &PluginCombo, x: &[usize], values: &[AspectValue]) -> Result<PluginForward> {
    let input = build_input(x, &requests(combo, values)?)?;
    let mut g = Graph::new();
    let params = model.params.bind(&mut g, false);
    let bound = bind_combo(&mut g, combo, false);
    let enc = encode_with_plugins(&mut g, &params, &model.config, &bound, &input)?;
    Ok(PluginForward {
        trace: ActivationTrace::capture(&g, &enc)?,
        layout: input_layout(&input, combo, &model.config),
        output: g.value(enc.output).clone(),
    })
}

/// Longest body any task target can have for a source of length `n`.
pub fn max_body_len(n: usize) -> usize {
    n + 1 + MAX_KEYWORDS
}

/// Greedy output for `x` with the combo attached.
pub fn decode_with_plugins(model: &BaseModel, combo: &PluginCombo, x: &[usize], values: &[AspectValue]) -> Result<Vec<usize>> {
    let input = build_input(x, &requests(combo, values)?)?;
    let mut g = Graph::new();
    let params = model.params.bind(&mut g, false);
    let bound = bind_combo(&mut g, combo, false);
    let enc = encode_with_plugins(&mut g, &params, &model.config, &bound, &input)?;
    let steps = (max_body_len(x.len()) + 1).min(model.config.max_len);
    greedy_decode_with(&mut g, &params, &model.config, enc.output, steps)
}
