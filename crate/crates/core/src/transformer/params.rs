//! Parameter trees for the base model.
//!
//! Every structure is generic over its leaf type: `Tensor` for stored
//! weights, [`Var`](crate::tensor::Var) once bound into a graph. Visitation
//! order is fixed and defines the checkpoint block order.

use super::ModelConfig;
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

macro_rules! leaf_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)+
        }

        impl<T> $name<T> {
            pub fn try_map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> Result<U>) -> Result<$name<U>> {
                Ok($name { $($field: f(&format!("{prefix}.{}", stringify!($field)), &self.$field)?,)+ })
            }

            pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
                $(f(&format!("{prefix}.{}", stringify!($field)), &self.$field);)+
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $(f(&format!("{prefix}.{}", stringify!($field)), &mut self.$field);)+
            }

            pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
                $(out.push(&mut self.$field);)+
            }
        }
    };
}

leaf_struct!(
    /// Projections of one attention block; all d×d, applied as `x·W`.
    AttentionParams { wq, wk, wv, wo }
);
leaf_struct!(
    /// Layer-norm gain and bias, both 1×d.
    NormParams { gain, bias }
);
leaf_struct!(
    /// Position-wise feed-forward: d×4d, 1×4d, 4d×d, 1×d.
    FeedForwardParams { w1, b1, w2, b2 }
);

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams<T> {
    pub attn: AttentionParams<T>,
    pub attn_norm: NormParams<T>,
    pub ffn: FeedForwardParams<T>,
    pub ffn_norm: NormParams<T>,
}

impl<T> EncoderLayerParams<T> {
    pub fn try_map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> Result<U>) -> Result<EncoderLayerParams<U>> {
        Ok(EncoderLayerParams {
            attn: self.attn.try_map(&format!("{prefix}.attn"), f)?,
            attn_norm: self.attn_norm.try_map(&format!("{prefix}.attn_norm"), f)?,
            ffn: self.ffn.try_map(&format!("{prefix}.ffn"), f)?,
            ffn_norm: self.ffn_norm.try_map(&format!("{prefix}.ffn_norm"), f)?,
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.attn_norm.visit(&format!("{prefix}.attn_norm"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
        self.ffn_norm.visit(&format!("{prefix}.ffn_norm"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.attn_norm.visit_mut(&format!("{prefix}.attn_norm"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
        self.ffn_norm.visit_mut(&format!("{prefix}.ffn_norm"), f);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.attn.collect_mut(out);
        self.attn_norm.collect_mut(out);
        self.ffn.collect_mut(out);
        self.ffn_norm.collect_mut(out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayerParams<T> {
    pub self_attn: AttentionParams<T>,
    pub self_norm: NormParams<T>,
    pub cross_attn: AttentionParams<T>,
    pub cross_norm: NormParams<T>,
    pub ffn: FeedForwardParams<T>,
    pub ffn_norm: NormParams<T>,
}

impl<T> DecoderLayerParams<T> {
    pub fn try_map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> Result<U>) -> Result<DecoderLayerParams<U>> {
        Ok(DecoderLayerParams {
            self_attn: self.self_attn.try_map(&format!("{prefix}.self_attn"), f)?,
            self_norm: self.self_norm.try_map(&format!("{prefix}.self_norm"), f)?,
            cross_attn: self.cross_attn.try_map(&format!("{prefix}.cross_attn"), f)?,
            cross_norm: self.cross_norm.try_map(&format!("{prefix}.cross_norm"), f)?,
            ffn: self.ffn.try_map(&format!("{prefix}.ffn"), f)?,
            ffn_norm: self.ffn_norm.try_map(&format!("{prefix}.ffn_norm"), f)?,
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.self_norm.visit(&format!("{prefix}.self_norm"), f);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), f);
        self.cross_norm.visit(&format!("{prefix}.cross_norm"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
        self.ffn_norm.visit(&format!("{prefix}.ffn_norm"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        self.self_norm.visit_mut(&format!("{prefix}.self_norm"), f);
        self.cross_attn.visit_mut(&format!("{prefix}.cross_attn"), f);
        self.cross_norm.visit_mut(&format!("{prefix}.cross_norm"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
        self.ffn_norm.visit_mut(&format!("{prefix}.ffn_norm"), f);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.self_attn.collect_mut(out);
        self.self_norm.collect_mut(out);
        self.cross_attn.collect_mut(out);
        self.cross_norm.collect_mut(out);
        self.ffn.collect_mut(out);
        self.ffn_norm.collect_mut(out);
    }
}

/// All base-model weights, in checkpoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub segment_embedding: T,
    pub encoder: Vec<EncoderLayerParams<T>>,
    pub decoder: Vec<DecoderLayerParams<T>>,
    pub output_w: T,
    pub output_b: T,
}

impl<T> ModelParams<T> {
    pub fn try_map<U>(&self, f: &mut dyn FnMut(&str, &T) -> Result<U>) -> Result<ModelParams<U>> {
        Ok(ModelParams {
            token_embedding: f("token_embedding", &self.token_embedding)?,
            position_embedding: f("position_embedding", &self.position_embedding)?,
            segment_embedding: f("segment_embedding", &self.segment_embedding)?,
            encoder: self
                .encoder
                .iter()
                .enumerate()
                .map(|(i, l)| l.try_map(&format!("encoder.{i}"), f))
                .collect::<Result<_>>()?,
            decoder: self
                .decoder
                .iter()
                .enumerate()
                .map(|(i, l)| l.try_map(&format!("decoder.{i}"), f))
                .collect::<Result<_>>()?,
            output_w: f("output.w", &self.output_w)?,
            output_b: f("output.b", &self.output_b)?,
        })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &T)) {
        f("token_embedding", &self.token_embedding);
        f("position_embedding", &self.position_embedding);
        f("segment_embedding", &self.segment_embedding);
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&format!("encoder.{i}"), f);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&format!("decoder.{i}"), f);
        }
        f("output.w", &self.output_w);
        f("output.b", &self.output_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        f("token_embedding", &mut self.token_embedding);
        f("position_embedding", &mut self.position_embedding);
        f("segment_embedding", &mut self.segment_embedding);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&format!("encoder.{i}"), f);
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&format!("decoder.{i}"), f);
        }
        f("output.w", &mut self.output_w);
        f("output.b", &mut self.output_b);
    }

    /// Exclusive references to every leaf, in visitation order.
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding, &mut self.segment_embedding];
        for l in &mut self.encoder {
            l.collect_mut(&mut out);
        }
        for l in &mut self.decoder {
            l.collect_mut(&mut out);
        }
        out.push(&mut self.output_w);
        out.push(&mut self.output_b);
        out
    }
}

impl ModelParams<Tensor> {
    /// Fresh weights: matrices ~ N(0, 1/fan_in), embeddings ~ N(0, 1/d),
    /// norm gains 1, biases 0.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let d = config.d_model;
        let f = config.ffn_dim();
        let mat = |rows: usize, cols: usize, rng: &mut Rng| Tensor::randn(rows, cols, (1.0 / rows as f64).sqrt(), rng);
        let emb = |rows: usize, rng: &mut Rng| Tensor::randn(rows, d, (1.0 / d as f64).sqrt(), rng);
        let norm = || NormParams { gain: Tensor::full(1, d, 1.0), bias: Tensor::zeros(1, d) };
        let attn = |rng: &mut Rng| AttentionParams { wq: mat(d, d, rng), wk: mat(d, d, rng), wv: mat(d, d, rng), wo: mat(d, d, rng) };
        let ffn = |rng: &mut Rng| FeedForwardParams { w1: mat(d, f, rng), b1: Tensor::zeros(1, f), w2: mat(f, d, rng), b2: Tensor::zeros(1, d) };

        let token_embedding = emb(config.vocab_size, rng);
        let position_embedding = emb(config.max_len, rng);
        let segment_embedding = emb(config.segments_max, rng);
        let encoder = (0..config.enc_layers)
            .map(|_| EncoderLayerParams { attn: attn(rng), attn_norm: norm(), ffn: ffn(rng), ffn_norm: norm() })
            .collect();
        let decoder = (0..config.dec_layers)
            .map(|_| DecoderLayerParams {
                self_attn: attn(rng),
                self_norm: norm(),
                cross_attn: attn(rng),
                cross_norm: norm(),
                ffn: ffn(rng),
                ffn_norm: norm(),
            })
            .collect();
        ModelParams {
            token_embedding,
            position_embedding,
            segment_embedding,
            encoder,
            decoder,
            output_w: mat(d, config.vocab_size, rng),
            output_b: Tensor::zeros(1, config.vocab_size),
        }
    }

    /// Adds every tensor to `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelParams<Var> {
        self.try_map(&mut |_, t| Ok(g.leaf(t.clone(), trainable))).expect("binding cannot fail")
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// (name, shape) of every tensor, in checkpoint order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.shape())));
        out
    }
}

impl ModelParams<Var> {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.visit(&mut |_, v| out.push(*v));
        out
    }
}
