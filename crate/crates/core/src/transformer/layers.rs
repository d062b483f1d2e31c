//! Forward pass of the backbone, written against a [`Graph`].

use super::params::{AttentionParams, DecoderLayerParams, EncoderLayerParams, FeedForwardParams, ModelParams, NormParams};
use super::{ModelConfig, SegmentedInput, BOS};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var, LAYER_NORM_EPS};

/// Extra key/value rows for one attention head, prepended to the input keys.
#[derive(Clone, Copy, Debug)]
pub struct PrefixKv {
    pub keys: Var,
    pub values: Var,
}

/// Gate logits and additive vectors for the plugin rows of one layer.
#[derive(Clone, Copy, Debug)]
pub struct GateRows {
    pub gate: Var,
    pub shift: Var,
}

/// Everything a plugin combination injects into the encoder.
///
/// `prefixes[j][k]` feeds head `k` of layer `j`; `gates[j]` rewrites the
/// post-attention plugin rows of layer `j`. Empty vectors mean "none".
#[derive(Clone, Debug, Default)]
pub struct Injection {
    pub prompt_rows: Option<Var>,
    pub prefixes: Vec<Vec<PrefixKv>>,
    pub gates: Vec<GateRows>,
}

impl Injection {
    pub fn none() -> Self {
        Self::default()
    }
}

/// Per-head attention record.
#[derive(Clone, Copy, Debug)]
pub struct HeadRecord {
    /// queries × keys, rows sum to 1. Prefix keys come first.
    pub weights: Var,
    /// keys × head_dim.
    pub values: Var,
    /// queries × head_dim, before the output projection.
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub heads: Vec<HeadRecord>,
}

#[derive(Clone, Debug)]
pub struct LayerRecord {
    pub input: Var,
    pub attention: AttentionOutput,
    /// Attention sublayer output A for all rows.
    pub post_attention: Var,
    /// Plugin rows after gating (Ã), when the layer has plugin rows.
    pub gated: Option<Var>,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub embeddings: Var,
    pub output: Var,
    /// Rows that came from text segments; plugin rows follow them.
    pub text_rows: usize,
    pub layers: Vec<LayerRecord>,
}

/// How plugin rows are treated inside an encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PluginRowPolicy {
    /// Plugin rows are ordinary positions: residual and layer norm apply.
    Standard,
    /// Plugin rows are replaced by the gated attention output, no residual.
    Replace,
}

/// Context for one encoder layer.
pub struct LayerContext<'a> {
    pub text_rows: usize,
    pub prefixes: &'a [PrefixKv],
    pub gate: Option<GateRows>,
    pub policy: PluginRowPolicy,
}

/// Host copies of the per-layer encoder activations.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub embeddings: Tensor,
    /// Hidden state after each encoder layer.
    pub hidden: Vec<Tensor>,
    pub post_attention: Vec<Tensor>,
    /// A with plugin rows replaced by Ã (equal to A when nothing is gated).
    pub gated: Vec<Tensor>,
    /// `attention[j][k]`: weights of head `k` in layer `j`.
    pub attention: Vec<Vec<Tensor>>,
    /// `head_values[j][k]`: value rows seen by head `k` of layer `j`, prefix rows first.
    pub head_values: Vec<Vec<Tensor>>,
    /// `head_outputs[j][k]`: head output before the output projection.
    pub head_outputs: Vec<Vec<Tensor>>,
    pub text_rows: usize,
}

impl ActivationTrace {
    pub fn capture(g: &Graph, enc: &EncoderOutput) -> Result<Self> {
        let mut gated = Vec::with_capacity(enc.layers.len());
        for l in &enc.layers {
            let a = g.value(l.post_attention);
            match l.gated {
                Some(v) => {
                    let mut rows = a.slice_rows(0, enc.text_rows).into_data();
                    rows.extend_from_slice(g.value(v).data());
                    gated.push(Tensor::new(a.rows(), a.cols(), rows)?);
                }
                None => gated.push(a.clone()),
            }
        }
        Ok(Self {
            embeddings: g.value(enc.embeddings).clone(),
            hidden: enc.layers.iter().map(|l| g.value(l.output).clone()).collect(),
            post_attention: enc.layers.iter().map(|l| g.value(l.post_attention).clone()).collect(),
            gated,
            attention: enc
                .layers
                .iter()
                .map(|l| l.attention.heads.iter().map(|h| g.value(h.weights).clone()).collect())
                .collect(),
            head_values: enc
                .layers
                .iter()
                .map(|l| l.attention.heads.iter().map(|h| g.value(h.values).clone()).collect())
                .collect(),
            head_outputs: enc
                .layers
                .iter()
                .map(|l| l.attention.heads.iter().map(|h| g.value(h.output).clone()).collect())
                .collect(),
            text_rows: enc.text_rows,
        })
    }
}

/// Token + position + segment embeddings of a validated input.
pub fn build_embeddings(g: &mut Graph, params: &ModelParams<Var>, config: &ModelConfig, input: &SegmentedInput) -> Result<Var> {
    input.validate(config)?;
    let tok = g.gather_rows(params.token_embedding, &input.token_ids())?;
    let pos_ids: Vec<usize> = input.positions().iter().map(|p| p - 1).collect();
    let pos = g.gather_rows(params.position_embedding, &pos_ids)?;
    let seg = g.gather_rows(params.segment_embedding, &input.segment_ids())?;
    let sum = g.add(tok, pos)?;
    g.add(sum, seg)
}

/// Scaled dot-product attention with `heads` heads.
///
/// With `prefixes`, head `k` attends over `[prefixes[k].keys; K_k]` and
/// `[prefixes[k].values; V_k]`. `causal` masks keys after the query index and
/// cannot be combined with prefixes.
pub fn multi_head_attention(
    g: &mut Graph,
    q_in: Var,
    kv_in: Var,
    params: &AttentionParams<Var>,
    heads: usize,
    prefixes: &[PrefixKv],
    causal: bool,
) -> Result<AttentionOutput> {
    let d = g.shape(q_in).1;
    if g.shape(kv_in).1 != d || d % heads != 0 {
        return Err(Error::Shape { op: "attention", detail: format!("width {d} with {heads} heads") });
    }
    if !prefixes.is_empty() && (prefixes.len() != heads || causal) {
        return Err(Error::Shape { op: "attention", detail: format!("{} prefixes for {heads} heads", prefixes.len()) });
    }
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let q = g.matmul(q_in, params.wq)?;
    let k = g.matmul(kv_in, params.wk)?;
    let v = g.matmul(kv_in, params.wv)?;
    let mut records = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * hd, hd)?;
        let mut kh = g.slice_cols(k, h * hd, hd)?;
        let mut vh = g.slice_cols(v, h * hd, hd)?;
        if let Some(p) = prefixes.get(h) {
            if g.shape(p.keys).1 != hd || g.shape(p.values) != g.shape(p.keys) {
                return Err(Error::Shape { op: "attention", detail: format!("prefix {:?} for head dim {hd}", g.shape(p.keys)) });
            }
            kh = g.concat_rows(&[p.keys, kh])?;
            vh = g.concat_rows(&[p.values, vh])?;
        }
        let scores = g.matmul_bt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let weights = if causal { g.causal_softmax_rows(scores)? } else { g.softmax_rows(scores)? };
        let out = g.matmul(weights, vh)?;
        records.push(HeadRecord { weights, values: vh, output: out });
        outs.push(out);
    }
    let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let output = g.matmul(joined, params.wo)?;
    Ok(AttentionOutput { output, heads: records })
}

fn norm(g: &mut Graph, x: Var, p: &NormParams<Var>) -> Result<Var> {
    g.layer_norm(x, p.gain, p.bias, LAYER_NORM_EPS)
}

fn feed_forward(g: &mut Graph, x: Var, p: &FeedForwardParams<Var>) -> Result<Var> {
    let h = g.matmul(x, p.w1)?;
    let h = g.add_row(h, p.b1)?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, p.w2)?;
    g.add_row(h, p.b2)
}

/// `σ(gate) ⊙ (a + shift)`, row for row.
pub fn apply_gate(g: &mut Graph, a: Var, gate: GateRows) -> Result<Var> {
    if g.shape(gate.gate) != g.shape(a) || g.shape(gate.shift) != g.shape(a) {
        return Err(Error::Shape { op: "gate", detail: format!("{:?} plugin rows, gate {:?}", g.shape(a), g.shape(gate.gate)) });
    }
    let s = g.sigmoid(gate.gate)?;
    let shifted = g.add(a, gate.shift)?;
    g.mul(s, shifted)
}

/// One post-norm encoder layer.
///
/// Rows `..text_rows` get `LN(H + A)`. Remaining rows get `LN(H + A)` under
/// [`PluginRowPolicy::Standard`], or `σ(G)⊙(A + P)` (just `A` without a gate)
/// under [`PluginRowPolicy::Replace`]. Every row then passes through the
/// feed-forward sublayer with residual and norm.
pub fn encoder_layer_forward(
    g: &mut Graph,
    h: Var,
    params: &EncoderLayerParams<Var>,
    heads: usize,
    ctx: &LayerContext<'_>,
) -> Result<LayerRecord> {
    let rows = g.shape(h).0;
    if ctx.text_rows > rows {
        return Err(Error::Shape { op: "encoder_layer", detail: format!("{} text rows of {rows}", ctx.text_rows) });
    }
    let attention = multi_head_attention(g, h, h, &params.attn, heads, ctx.prefixes, false)?;
    let a = attention.output;
    let plugin_rows = rows - ctx.text_rows;
    let (mixed, gated) = if plugin_rows == 0 || ctx.policy == PluginRowPolicy::Standard {
        if ctx.gate.is_some() {
            return Err(Error::Invalid("gate supplied without replaceable plugin rows".into()));
        }
        let r = g.add(h, a)?;
        (norm(g, r, &params.attn_norm)?, None)
    } else {
        let h_text = g.slice_rows(h, 0, ctx.text_rows)?;
        let a_text = g.slice_rows(a, 0, ctx.text_rows)?;
        let r = g.add(h_text, a_text)?;
        let text = norm(g, r, &params.attn_norm)?;
        let a_plugin = g.slice_rows(a, ctx.text_rows, plugin_rows)?;
        let p = match ctx.gate {
            Some(gate) => apply_gate(g, a_plugin, gate)?,
            None => a_plugin,
        };
        let joined = if ctx.text_rows == 0 { p } else { g.concat_rows(&[text, p])? };
        (joined, Some(p))
    };
    let f = feed_forward(g, mixed, &params.ffn)?;
    let r = g.add(mixed, f)?;
    let output = norm(g, r, &params.ffn_norm)?;
    Ok(LayerRecord { input: h, attention, post_attention: a, gated, output })
}

/// Runs the encoder stack, appending `injection.prompt_rows` after the
/// embedded text.
pub fn encode(
    g: &mut Graph,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    input: &SegmentedInput,
    injection: &Injection,
    policy: PluginRowPolicy,
) -> Result<EncoderOutput> {
    let text = build_embeddings(g, params, config, input)?;
    let text_rows = g.shape(text).0;
    let embeddings = match injection.prompt_rows {
        Some(p) => {
            let total = text_rows + g.shape(p).0;
            if total > config.max_len {
                return Err(Error::LengthOverflow { len: total, max: config.max_len });
            }
            g.concat_rows(&[text, p])?
        }
        None => text,
    };
    for (what, n) in [("prefix", injection.prefixes.len()), ("gate", injection.gates.len())] {
        if n != 0 && n != config.enc_layers {
            return Err(Error::Invalid(format!("{what} supplied for {n} of {} layers", config.enc_layers)));
        }
    }
    let mut h = embeddings;
    let mut layers = Vec::with_capacity(config.enc_layers);
    for (j, lp) in params.encoder.iter().enumerate() {
        let ctx = LayerContext {
            text_rows,
            prefixes: injection.prefixes.get(j).map(Vec::as_slice).unwrap_or(&[]),
            gate: injection.gates.get(j).copied(),
            policy,
        };
        let rec = encoder_layer_forward(g, h, lp, config.heads, &ctx)?;
        h = rec.output;
        layers.push(rec);
    }
    Ok(EncoderOutput { embeddings, output: h, text_rows, layers })
}

fn decoder_layer(g: &mut Graph, x: Var, memory: Var, p: &DecoderLayerParams<Var>, heads: usize) -> Result<Var> {
    let s = multi_head_attention(g, x, x, &p.self_attn, heads, &[], true)?;
    let r = g.add(x, s.output)?;
    let x = norm(g, r, &p.self_norm)?;
    let c = multi_head_attention(g, x, memory, &p.cross_attn, heads, &[], false)?;
    let r = g.add(x, c.output)?;
    let x = norm(g, r, &p.cross_norm)?;
    let f = feed_forward(g, x, &p.ffn)?;
    let r = g.add(x, f)?;
    norm(g, r, &p.ffn_norm)
}

/// Logits for every position of `prev` (which starts with BOS), attending
/// over all rows of `memory`.
pub fn decoder_forward(g: &mut Graph, params: &ModelParams<Var>, config: &ModelConfig, prev: &[usize], memory: Var) -> Result<Var> {
    if prev.is_empty() {
        return Err(Error::Invalid("decoder needs at least one input token".into()));
    }
    if prev.len() > config.max_len {
        return Err(Error::LengthOverflow { len: prev.len(), max: config.max_len });
    }
    if let Some(&t) = prev.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::UnknownToken(t));
    }
    let tok = g.gather_rows(params.token_embedding, prev)?;
    let ids: Vec<usize> = (0..prev.len()).collect();
    let pos = g.gather_rows(params.position_embedding, &ids)?;
    let mut x = g.add(tok, pos)?;
    for p in &params.decoder {
        x = decoder_layer(g, x, memory, p, config.heads)?;
    }
    let logits = g.matmul(x, params.output_w)?;
    g.add_row(logits, params.output_b)
}

/// Teacher-forced loss of `target` (EOS appended) given encoder `memory`.
pub fn sequence_loss(g: &mut Graph, params: &ModelParams<Var>, config: &ModelConfig, target: &[usize], memory: Var) -> Result<Var> {
    let mut prev = Vec::with_capacity(target.len() + 1);
    prev.push(BOS);
    prev.extend_from_slice(target);
    let mut gold = target.to_vec();
    gold.push(super::EOS);
    let logits = decoder_forward(g, params, config, &prev, memory)?;
    g.cross_entropy(logits, &gold)
}
