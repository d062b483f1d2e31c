//! Separate and joint plugin training.

use std::time::Instant;

use super::forward::{bind_combo, build_input, decode_with_plugins, encode_with_plugins};
use super::{combine_plugins, Family, Plugin, PluginCombo};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::taskgen::{evaluate, Aspect, AspectValue, Example, Metrics};
use crate::tensor::{Graph, Tensor};
use crate::transformer::{sequence_loss, BaseModel, ModelConfig, TrainSettings};

#[derive(Clone, Debug)]
pub struct TrainedPlugins {
    pub plugins: Vec<Plugin>,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Wall-clock seconds spent optimising.
    pub seconds: f64,
}

fn values_of(ex: &Example, aspects: &[Aspect]) -> Result<Vec<(Aspect, AspectValue)>> {
    aspects
        .iter()
        .map(|&a| {
            ex.value(a)
                .cloned()
                .map(|v| (a, v))
                .ok_or_else(|| Error::Invalid(format!("training example lacks a {a} label")))
        })
        .collect()
}

/// Adam on the plugin tensors only; the base is bound as constants.
fn optimize(model: &BaseModel, combo: PluginCombo, corpus: &[Example], settings: &TrainSettings, seed: u64) -> Result<TrainedPlugins> {
    if !model.is_frozen() {
        return Err(Error::Invalid("plugins train against a frozen base model".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Invalid("empty training corpus".into()));
    }
    settings.validate()?;
    let config: &ModelConfig = &model.config;
    for p in combo.plugins() {
        p.check(config)?;
    }
    let aspects = combo.aspects();
    let started = Instant::now();
    let mut sampler = Rng::derive(seed, "plugin-batches");
    let mut plugins = combo.into_plugins();
    let mut adam = Adam::new(settings.adam.clone(), plugins.iter().flat_map(|p| p.tensors.iter().map(Tensor::len)));
    let mut losses = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let current = combine_plugins(&plugins)?;
        let mut g = Graph::new();
        let params = model.params.bind(&mut g, false);
        let bound = bind_combo(&mut g, &current, true);
        let mut total = None;
        for _ in 0..settings.batch_size {
            let ex = &corpus[sampler.below(corpus.len())];
            let input = build_input(&ex.x, &values_of(ex, &aspects)?)?;
            let enc = encode_with_plugins(&mut g, &params, config, &bound, &input).map_err(crate::transformer::divergence(step))?;
            let l = sequence_loss(&mut g, &params, config, &ex.y, enc.output).map_err(crate::transformer::divergence(step))?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let loss = g.scale(total.expect("batch is nonempty"), 1.0 / settings.batch_size as f64)?;
        losses.push(g.value(loss).item());
        g.backward(loss)?;
        let grads: Vec<Tensor> = bound
            .all_vars()
            .into_iter()
            .map(|v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v).0, g.shape(v).1)))
            .collect();
        let mut slots: Vec<&mut Tensor> = plugins.iter_mut().flat_map(|p| p.tensors.iter_mut()).collect();
        adam.step_with_lr(&mut slots, &grads, settings.lr_at(step));
    }
    Ok(TrainedPlugins { plugins, losses, seconds: started.elapsed().as_secs_f64() })
}

/// Trains a fresh plugin for `aspect` on single-aspect data.
pub fn train_plugin(
    model: &BaseModel,
    aspect: Aspect,
    family: Family,
    corpus: &[Example],
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainedPlugins> {
    let init = Plugin::init(aspect, family, &model.config, seed);
    optimize(model, combine_plugins(&[init])?, corpus, settings, seed)
}

/// Optimises all plugins of `start` together on multi-aspect data.
///
/// Starting from separately trained plugins gives the joint reference used
/// for interference measurements; starting from a fresh single plugin
/// reproduces [`train_plugin`].
pub fn joint_train_plugins(
    model: &BaseModel,
    start: &[Plugin],
    corpus: &[Example],
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainedPlugins> {
    optimize(model, combine_plugins(start)?, corpus, settings, seed)
}

/// Greedy outputs and metrics of a combo on `examples`, scored on the combo's aspects.
pub fn evaluate_combo(model: &BaseModel, combo: &PluginCombo, examples: &[Example]) -> Result<(Metrics, Vec<Vec<usize>>)> {
    let aspects = combo.aspects();
    let mut outputs = Vec::with_capacity(examples.len());
    for ex in examples {
        let values: Vec<AspectValue> = values_of(ex, &aspects)?.into_iter().map(|(_, v)| v).collect();
        outputs.push(decode_with_plugins(model, combo, &ex.x, &values)?);
    }
    Ok((evaluate(&outputs, examples, &aspects)?, outputs))
}
