//! Plugins: per-aspect trainable parameters attached to a frozen base.
//!
//! Three families share one container type:
//!
//! * `prompt`: `p` input rows appended after the embedded text.
//! * `prefix`: per encoder layer and head, `p` extra key and value rows.
//! * `gated`: input rows plus, per encoder layer, an additive vector and a
//!   gate logit for every plugin row; post-attention plugin rows become
//!   `σ(G)⊙(A + P)`.
//!
//! Plugins combine by concatenation in [`PluginCombo`].

mod forward;
mod io;
mod train;

pub use forward::{
    bind_combo, build_input, decode_with_plugins, encode_with_plugins, forward_with_plugins, injection, input_layout,
    BoundCombo, InputLayout, KeyOwner, PluginForward,
};
pub use io::{load_plugin, read_plugin, save_plugin, write_plugin, PLUGIN_MAGIC};
pub use train::{evaluate_combo, joint_train_plugins, train_plugin, TrainedPlugins};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::taskgen::{vocab, Aspect, AspectKind};
use crate::tensor::Tensor;
use crate::transformer::ModelConfig;

/// Standard deviation of every initial prompt, prefix and shift entry.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Prompt,
    Prefix,
    Gated,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Prompt, Family::Prefix, Family::Gated];

    pub fn tag(self) -> &'static str {
        match self {
            Family::Prompt => "prompt",
            Family::Prefix => "prefix",
            Family::Gated => "gated",
        }
    }

    /// Name and shape of every parameter block, in storage order.
    pub fn layout(self, config: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let (p, d, hd) = (config.prompt_len, config.d_model, config.head_dim());
        let mut out = Vec::new();
        match self {
            Family::Prompt => out.push(("prompt".to_string(), (p, d))),
            Family::Prefix => {
                for j in 0..config.enc_layers {
                    for k in 0..config.heads {
                        out.push((format!("layer{j}.head{k}.keys"), (p, hd)));
                        out.push((format!("layer{j}.head{k}.values"), (p, hd)));
                    }
                }
            }
            Family::Gated => {
                out.push(("prompt".to_string(), (p, d)));
                for j in 0..config.enc_layers {
                    out.push((format!("layer{j}.shift"), (p, d)));
                    out.push((format!("layer{j}.gate"), (p, d)));
                }
            }
        }
        out
    }

    pub fn has_input_rows(self) -> bool {
        self != Family::Prefix
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown family `{s}` (prompt, prefix, gated)")))
    }
}

/// How an aspect's constraint text is rendered, as stored in plugin files.
pub fn constraint_template(aspect: Aspect) -> String {
    match aspect.kind() {
        AspectKind::Categorical(labels) => {
            let head = match aspect {
                Aspect::Shift => vocab::A_SHIFT,
                Aspect::Mark => vocab::A_MARK,
                _ => vocab::A_ORDER,
            };
            format!("[{head}, VALUE] VALUE in {}", labels.join("|"))
        }
        AspectKind::FreeForm => "KEYWORDS".to_string(),
    }
}

/// Trainable parameters of one aspect.
#[derive(Clone, Debug, PartialEq)]
pub struct Plugin {
    pub aspect: Aspect,
    pub family: Family,
    /// Blocks in [`Family::layout`] order.
    pub tensors: Vec<Tensor>,
}

impl Plugin {
    /// Prompt, prefix and shift entries ~ N(0, 0.02²); gate logits 0.
    pub fn init(aspect: Aspect, family: Family, config: &ModelConfig, seed: u64) -> Self {
        let mut rng = Rng::derive(seed, &format!("plugin-init/{family}/{aspect}"));
        let tensors = family
            .layout(config)
            .into_iter()
            .map(|(name, (r, c))| {
                if name.ends_with(".gate") {
                    Tensor::zeros(r, c)
                } else {
                    Tensor::randn(r, c, INIT_STD, &mut rng)
                }
            })
            .collect();
        Self { aspect, family, tensors }
    }

    /// Checks block shapes against `config`.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let layout = self.family.layout(config);
        if layout.len() != self.tensors.len()
            || layout.iter().zip(&self.tensors).any(|((_, s), t)| *s != t.shape())
        {
            return Err(Error::Format(format!("{} plugin for {} does not fit the model config", self.family, self.aspect)));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.tensors[0].rows()
    }

    pub fn prompt(&self) -> Option<&Tensor> {
        self.family.has_input_rows().then(|| &self.tensors[0])
    }

    /// (shift P, gate logits G) of encoder layer `j`, gated family only.
    pub fn gate_layer(&self, j: usize) -> Option<(&Tensor, &Tensor)> {
        (self.family == Family::Gated).then(|| (&self.tensors[1 + 2 * j], &self.tensors[2 + 2 * j]))
    }

    pub fn gate_layer_mut(&mut self, j: usize) -> Option<(&mut Tensor, &mut Tensor)> {
        if self.family != Family::Gated {
            return None;
        }
        let (a, b) = self.tensors[1 + 2 * j..3 + 2 * j].split_at_mut(1);
        Some((&mut a[0], &mut b[0]))
    }

    /// (keys, values) of head `k` in encoder layer `j`, prefix family only.
    pub fn prefix(&self, heads: usize, j: usize, k: usize) -> Option<(&Tensor, &Tensor)> {
        let i = 2 * (j * heads + k);
        (self.family == Family::Prefix).then(|| (&self.tensors[i], &self.tensors[i + 1]))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Ordered, same-family plugins with distinct aspects.
#[derive(Clone, Debug, PartialEq)]
pub struct PluginCombo {
    plugins: Vec<Plugin>,
}

impl PluginCombo {
    pub fn empty() -> Self {
        Self { plugins: Vec::new() }
    }

    pub fn plugins(&self) -> &[Plugin] {
        &self.plugins
    }

    pub fn len(&self) -> usize {
        self.plugins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plugins.is_empty()
    }

    pub fn family(&self) -> Option<Family> {
        self.plugins.first().map(|p| p.family)
    }

    pub fn aspects(&self) -> Vec<Aspect> {
        self.plugins.iter().map(|p| p.aspect).collect()
    }

    pub fn into_plugins(self) -> Vec<Plugin> {
        self.plugins
    }
}

/// Concatenates plugins in the given order without touching their parameters.
pub fn combine_plugins(plugins: &[Plugin]) -> Result<PluginCombo> {
    if let Some(first) = plugins.first() {
        for p in plugins {
            if p.family != first.family {
                return Err(Error::FamilyMismatch { expected: first.family.to_string(), found: p.family.to_string() });
            }
        }
        for (i, p) in plugins.iter().enumerate() {
            if plugins[..i].iter().any(|q| q.aspect == p.aspect) {
                return Err(Error::DuplicateAspect(p.aspect.name().into()));
            }
        }
    }
    Ok(PluginCombo { plugins: plugins.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts_match_family() {
        let c = ModelConfig::default();
        assert_eq!(Family::Prompt.layout(&c), vec![("prompt".to_string(), (4, 32))]);
        assert_eq!(Family::Prefix.layout(&c).len(), 2 * 4 * 4);
        assert!(Family::Prefix.layout(&c).iter().all(|(_, s)| *s == (4, 8)));
        assert_eq!(Family::Gated.layout(&c).len(), 1 + 2 * 4);
    }

    #[test]
    fn init_statistics() {
        let c = ModelConfig::default();
        let p = Plugin::init(Aspect::Mark, Family::Gated, &c, 5);
        p.check(&c).unwrap();
        for j in 0..c.enc_layers {
            assert!(p.gate_layer(j).unwrap().1.data().iter().all(|&g| g == 0.0));
        }
        let d = p.tensors[0].data();
        let sd = (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
        assert!((sd - INIT_STD).abs() < 0.006, "{sd}");
    }

    #[test]
    fn combine_validates() {
        let c = ModelConfig::default();
        let a = Plugin::init(Aspect::Shift, Family::Gated, &c, 1);
        let b = Plugin::init(Aspect::Mark, Family::Gated, &c, 1);
        let pre = Plugin::init(Aspect::Mark, Family::Prefix, &c, 1);
        let combo = combine_plugins(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(combo.plugins(), &[a.clone(), b]);
        assert!(matches!(combine_plugins(&[a.clone(), pre]), Err(Error::FamilyMismatch { .. })));
        assert!(matches!(combine_plugins(&[a.clone(), a]), Err(Error::DuplicateAspect(_))));
        assert!("gated".parse::<Family>().is_ok() && "lora".parse::<Family>().is_err());
    }
}
