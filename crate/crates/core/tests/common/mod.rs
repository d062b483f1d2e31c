//! Loop-by-loop reference Transformer written directly from the
//! architecture description, shared by the oracle and acceptance targets.
#![allow(dead_code)]

use prompt_gating::rng::Rng;
use prompt_gating::tensor::{Graph, Tensor};
use prompt_gating::transformer::{
    decoder_forward, encode, AttentionParams, BaseModel, FeedForwardParams, Injection, ModelConfig, NormParams,
    PluginRowPolicy, SegmentedInput, BOS,
};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| (0..t.cols()).map(|c| t.get(r, c)).collect()).collect()
}

pub fn mm(a: &Mat, b: &Tensor) -> Mat {
    a.iter()
        .map(|row| {
            (0..b.cols())
                .map(|j| {
                    let mut s = 0.0;
                    for (k, x) in row.iter().enumerate() {
                        s += x * b.get(k, j);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn layer_norm(a: &Mat, p: &NormParams<Tensor>) -> Mat {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * p.gain.get(0, j) + p.bias.get(0, j))
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn ffn(x: &Mat, p: &FeedForwardParams<Tensor>) -> Mat {
    let h: Mat = mm(x, &p.w1).into_iter().map(|r| r.iter().enumerate().map(|(j, v)| gelu(v + p.b1.get(0, j))).collect()).collect();
    mm(&h, &p.w2).into_iter().map(|r| r.iter().enumerate().map(|(j, v)| v + p.b2.get(0, j)).collect()).collect()
}

/// Per-head extra keys and values prepended inside attention.
pub type Prefix = Vec<(Mat, Mat)>;

pub fn attention(q_in: &Mat, kv_in: &Mat, p: &AttentionParams<Tensor>, heads: usize, prefix: Option<&Prefix>, causal: bool) -> Mat {
    let d = q_in[0].len();
    let hd = d / heads;
    let (q, k, v) = (mm(q_in, &p.wq), mm(kv_in, &p.wk), mm(kv_in, &p.wv));
    let mut joined = vec![vec![0.0; d]; q_in.len()];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let mut keys: Mat = Vec::new();
        let mut vals: Mat = Vec::new();
        if let Some(pre) = prefix {
            keys.extend(pre[h].0.iter().cloned());
            vals.extend(pre[h].1.iter().cloned());
        }
        let offset = keys.len();
        keys.extend(k.iter().map(|r| r[cols.clone()].to_vec()));
        vals.extend(v.iter().map(|r| r[cols.clone()].to_vec()));
        for (i, qr) in q.iter().enumerate() {
            let visible = if causal { offset + i + 1 } else { keys.len() };
            let scores: Vec<f64> = keys[..visible]
                .iter()
                .map(|kr| qr[cols.clone()].iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..hd {
                joined[i][h * hd + c] = (0..visible).map(|t| e[t] / z * vals[t][c]).sum();
            }
        }
    }
    mm(&joined, &p.wo)
}

pub struct Extras<'a> {
    pub prompt: Option<Mat>,
    pub prefixes: Option<Vec<Prefix>>,
    /// Per layer (shift, gate) for rows after the text.
    pub gates: Option<Vec<(&'a Tensor, &'a Tensor)>>,
}

pub fn embed(model: &BaseModel, input: &SegmentedInput) -> Mat {
    let p = &model.params;
    let (toks, pos, segs) = (input.token_ids(), input.positions(), input.segment_ids());
    (0..toks.len())
        .map(|i| {
            (0..model.config.d_model)
                .map(|j| {
                    p.token_embedding.get(toks[i], j) + p.position_embedding.get(pos[i] - 1, j) + p.segment_embedding.get(segs[i], j)
                })
                .collect()
        })
        .collect()
}

pub fn oracle_encode(model: &BaseModel, input: &SegmentedInput, extras: &Extras<'_>) -> Mat {
    let mut h = embed(model, input);
    let text = h.len();
    if let Some(p) = &extras.prompt {
        h.extend(p.iter().cloned());
    }
    for (j, lp) in model.params.encoder.iter().enumerate() {
        let prefix = extras.prefixes.as_ref().map(|p| &p[j]);
        let a = attention(&h, &h, &lp.attn, model.config.heads, prefix, false);
        let mut mixed = layer_norm(&add(&h, &a), &lp.attn_norm);
        if let Some(gates) = &extras.gates {
            let (shift, gate) = gates[j];
            for r in text..h.len() {
                for c in 0..h[0].len() {
                    let s = 1.0 / (1.0 + (-gate.get(r - text, c)).exp());
                    mixed[r][c] = s * (a[r][c] + shift.get(r - text, c));
                }
            }
        }
        h = layer_norm(&add(&mixed, &ffn(&mixed, &lp.ffn)), &lp.ffn_norm);
    }
    h
}

pub fn oracle_decode_logits(model: &BaseModel, prev: &[usize], memory: &Mat) -> Mat {
    let p = &model.params;
    let mut x: Mat = prev
        .iter()
        .enumerate()
        .map(|(i, &t)| (0..model.config.d_model).map(|j| p.token_embedding.get(t, j) + p.position_embedding.get(i, j)).collect())
        .collect();
    for lp in &p.decoder {
        let s = attention(&x, &x, &lp.self_attn, model.config.heads, None, true);
        x = layer_norm(&add(&x, &s), &lp.self_norm);
        let c = attention(&x, memory, &lp.cross_attn, model.config.heads, None, false);
        x = layer_norm(&add(&x, &c), &lp.cross_norm);
        x = layer_norm(&add(&x, &ffn(&x, &lp.ffn)), &lp.ffn_norm);
    }
    mm(&x, &p.output_w).into_iter().map(|r| r.iter().enumerate().map(|(j, v)| v + p.output_b.get(0, j)).collect()).collect()
}

pub fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    assert_eq!((a.len(), a[0].len()), b.shape());
    let mut m: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            m = m.max((v - b.get(r, c)).abs());
        }
    }
    m
}

/// A model whose every weight, layer-norm affines included, is random.
pub fn random_model(seed: u64) -> BaseModel {
    let mut model = BaseModel::init(ModelConfig::default(), seed).unwrap();
    let mut rng = Rng::new(seed ^ 0xabc);
    model.params.visit_mut(&mut |_, t| {
        for v in t.data_mut() {
            *v += 0.1 * rng.normal();
        }
    });
    model
}

pub fn random_input(rng: &mut Rng, config: &ModelConfig) -> SegmentedInput {
    let n = rng.range_inclusive(1, 9);
    let x: Vec<usize> = (0..n).map(|_| rng.range_inclusive(3, config.vocab_size - 1)).collect();
    let mut input = SegmentedInput::source(&x);
    for seg in 1..=rng.below(3) {
        let m = rng.range_inclusive(1, 3);
        let toks: Vec<usize> = (0..m).map(|_| rng.range_inclusive(3, config.vocab_size - 1)).collect();
        input.push(&toks, seg);
    }
    input
}


/// Largest elementwise gap between the graph forward (encoder output and
/// decoder logits) and the reference over `n` random inputs.
pub fn bare_model_deviation(model: &BaseModel, n: usize, seed: u64) -> f64 {
    let config = &model.config;
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let input = random_input(&mut rng, config);
        let prev: Vec<usize> =
            std::iter::once(BOS).chain((0..rng.below(6)).map(|_| rng.range_inclusive(3, config.vocab_size - 1))).collect();
        let mut g = Graph::new();
        let params = model.params.bind(&mut g, false);
        let enc = encode(&mut g, &params, config, &input, &Injection::none(), PluginRowPolicy::Standard).unwrap();
        let logits = decoder_forward(&mut g, &params, config, &prev, enc.output).unwrap();

        let memory = oracle_encode(model, &input, &Extras { prompt: None, prefixes: None, gates: None });
        worst = worst.max(max_diff(&memory, g.value(enc.output)));
        worst = worst.max(max_diff(&oracle_decode_logits(model, &prev, &memory), g.value(logits)));
    }
    worst
}
