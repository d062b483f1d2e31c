//! Frozen toy encoder–decoder backbone.
//!
//! Post-layer-norm Transformer with per-segment position restarts and
//! segment embeddings on the encoder side. The encoder accepts an
//! [`EncoderHook`] so plugin families can append prompt rows, inject
//! attention prefixes, or gate post-attention plugin states without the
//! backbone knowing which family is in use.

mod checkpoint;
mod decode;
mod layers;
mod params;
mod pretrain;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use decode::{argmax_lowest, greedy_decode, greedy_decode_with};
pub use layers::{
    apply_gate, build_embeddings, decoder_forward, encode, encoder_layer_forward, multi_head_attention, sequence_loss,
    ActivationTrace, AttentionOutput, EncoderOutput, GateRows, HeadRecord, Injection, LayerContext, LayerRecord,
    PluginRowPolicy, PrefixKv,
};
pub use params::{
    AttentionParams, DecoderLayerParams, EncoderLayerParams, FeedForwardParams, ModelParams, NormParams,
};
pub use pretrain::{pretrain_base, token_accuracy, PretrainReport, TrainSettings, TrainingPair};
pub(crate) use pretrain::divergence;
pub(crate) use checkpoint::{read_block_any, read_str, read_u64, write_block, write_str, write_u64};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_len: usize,
    /// Continuous vectors per plugin per layer.
    pub prompt_len: usize,
    pub segments_max: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            heads: 4,
            enc_layers: 4,
            dec_layers: 2,
            max_len: 48,
            prompt_len: 4,
            segments_max: 6,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("max_len", self.max_len),
            ("prompt_len", self.prompt_len),
            ("segments_max", self.segments_max),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        if self.vocab_size <= EOS {
            return Err(Error::Config("vocab_size must leave room for PAD/BOS/EOS".into()));
        }
        Ok(())
    }
}

/// One textual segment of the encoder input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub tokens: Vec<usize>,
    pub segment_id: usize,
}

/// Encoder input as ordered segments; positions restart at 1 in each.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SegmentedInput {
    pub segments: Vec<Segment>,
}

impl SegmentedInput {
    /// A lone source segment with segment id 0.
    pub fn source(tokens: &[usize]) -> Self {
        Self { segments: vec![Segment { tokens: tokens.to_vec(), segment_id: 0 }] }
    }

    pub fn push(&mut self, tokens: &[usize], segment_id: usize) {
        self.segments.push(Segment { tokens: tokens.to_vec(), segment_id });
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_ids(&self) -> Vec<usize> {
        self.segments.iter().flat_map(|s| s.tokens.iter().copied()).collect()
    }

    /// 1-based positions, restarting in each segment.
    pub fn positions(&self) -> Vec<usize> {
        self.segments.iter().flat_map(|s| 1..=s.tokens.len()).collect()
    }

    pub fn segment_ids(&self) -> Vec<usize> {
        self.segments.iter().flat_map(|s| std::iter::repeat(s.segment_id).take(s.tokens.len())).collect()
    }

    /// Rows occupied by segment `index` in the embedded input.
    pub fn segment_range(&self, index: usize) -> std::ops::Range<usize> {
        let start: usize = self.segments[..index].iter().map(|s| s.tokens.len()).sum();
        start..start + self.segments[index].tokens.len()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let len = self.len();
        if len == 0 {
            return Err(Error::Invalid("empty encoder input".into()));
        }
        if len > config.max_len {
            return Err(Error::LengthOverflow { len, max: config.max_len });
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.segment_id >= config.segments_max {
                return Err(Error::Invalid(format!("segment id {} >= segments_max {}", s.segment_id, config.segments_max)));
            }
            if self.segments[..i].iter().any(|o| o.segment_id == s.segment_id) {
                return Err(Error::Invalid(format!("segment id {} used twice", s.segment_id)));
            }
            if let Some(&t) = s.tokens.iter().find(|&&t| t >= config.vocab_size) {
                return Err(Error::UnknownToken(t));
            }
        }
        Ok(())
    }
}

/// Pretrained encoder–decoder weights plus their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
    frozen: bool,
}

impl BaseModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, "base/init");
        let params = ModelParams::init(&config, &mut rng);
        Ok(Self { config, params, frozen: false })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<Tensor>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let expected = ModelParams::init(&config, &mut Rng::new(0)).layout();
        if params.layout() != expected {
            return Err(Error::Format("parameter layout does not match config".into()));
        }
        Ok(Self { config, params, frozen })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }
}
