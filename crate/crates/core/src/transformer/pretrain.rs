//! Base-model pretraining.

use serde::{Deserialize, Serialize};

use super::layers::{encode, sequence_loss, Injection, PluginRowPolicy};
use super::{greedy_decode, BaseModel, ModelConfig, SegmentedInput};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};

/// One supervised example: encoder input and target body (EOS is implicit).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    pub input: SegmentedInput,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Steps of linear warm-up from zero to `adam.lr`.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Decay the rate linearly to zero after warm-up.
    #[serde(default)]
    pub linear_decay: bool,
}

impl TrainSettings {
    /// Constant learning rate, no warm-up.
    pub fn constant(steps: usize, batch_size: usize, lr: f64) -> Self {
        Self { steps, batch_size, adam: AdamConfig::with_lr(lr), warmup_steps: 0, linear_decay: false }
    }

    /// Learning rate used at `step` (counted from zero).
    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.adam.lr;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.linear_decay {
            let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
            return peak * (1.0 - (step - self.warmup_steps) as f64 / span).max(0.0);
        }
        peak
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean batch loss at every step.
    pub losses: Vec<f64>,
}

pub(crate) fn divergence(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(op) => Error::Divergence(format!("non-finite value in {op} at step {step}")),
        other => other,
    }
}

/// Trains every base parameter on `corpus`, then freezes the model.
pub fn pretrain_base(
    config: &ModelConfig,
    corpus: &[TrainingPair],
    settings: &TrainSettings,
    seed: u64,
) -> Result<(BaseModel, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Invalid("empty pretraining corpus".into()));
    }
    settings.validate()?;
    let mut model = BaseModel::init(config.clone(), seed)?;
    let mut sampler = Rng::derive(seed, "pretrain/batches");
    let mut sizes = Vec::new();
    model.params.visit(&mut |_, t| sizes.push(t.len()));
    let mut adam = Adam::new(settings.adam.clone(), sizes);
    let mut losses = Vec::with_capacity(settings.steps);

    for step in 0..settings.steps {
        let mut g = Graph::new();
        let params = model.params.bind(&mut g, true);
        let mut total = None;
        for _ in 0..settings.batch_size {
            let ex = &corpus[sampler.below(corpus.len())];
            let enc = encode(&mut g, &params, config, &ex.input, &Injection::none(), PluginRowPolicy::Standard)
                .map_err(divergence(step))?;
            let l = sequence_loss(&mut g, &params, config, &ex.target, enc.output).map_err(divergence(step))?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let loss = g.scale(total.expect("batch is nonempty"), 1.0 / settings.batch_size as f64)?;
        losses.push(g.value(loss).item());
        g.backward(loss)?;
        let grads: Vec<Tensor> = params
            .vars()
            .into_iter()
            .map(|v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v).0, g.shape(v).1)))
            .collect();
        adam.step_with_lr(&mut model.params.leaves_mut(), &grads, settings.lr_at(step));
    }
    model.freeze();
    Ok((model, PretrainReport { losses }))
}

/// Fraction of target tokens reproduced at the right position by greedy decoding,
/// normalised by the longer of output and target (EOS counted).
pub fn token_accuracy(model: &BaseModel, pairs: &[TrainingPair]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for ex in pairs {
        let out = greedy_decode(model, &ex.input, (ex.target.len() + 2).min(model.config.max_len))?;
        let hits = out.iter().zip(&ex.target).filter(|(a, b)| a == b).count();
        let eos_ok = out.len() == ex.target.len();
        correct += hits + eos_ok as usize;
        total += out.len().max(ex.target.len()) + 1;
    }
    Ok(if total == 0 { 1.0 } else { correct as f64 / total as f64 })
}
