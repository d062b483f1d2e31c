//! Greedy decoding.

use super::layers::{decoder_forward, encode, Injection, PluginRowPolicy};
use super::{BaseModel, ModelConfig, ModelParams, SegmentedInput, BOS, EOS};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decode against an already computed encoder `memory`.
///
/// Returns the generated body without the closing EOS. Decoder nodes from
/// each step are dropped from `g` before the next one.
pub fn greedy_decode_with(
    g: &mut Graph,
    params: &ModelParams<Var>,
    config: &ModelConfig,
    memory: Var,
    max_steps: usize,
) -> Result<Vec<usize>> {
    if max_steps > config.max_len {
        return Err(Error::LengthOverflow { len: max_steps, max: config.max_len });
    }
    let mark = g.len();
    let mut prev = vec![BOS];
    let mut body = Vec::new();
    for _ in 0..max_steps {
        let logits = decoder_forward(g, params, config, &prev, memory)?;
        let last = g.value(logits).row(prev.len() - 1);
        let next = argmax_lowest(last);
        g.truncate(mark);
        if next == EOS {
            break;
        }
        body.push(next);
        prev.push(next);
    }
    Ok(body)
}

/// Greedy decode with the bare base model.
pub fn greedy_decode(model: &BaseModel, input: &SegmentedInput, max_steps: usize) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let params = model.params.bind(&mut g, false);
    let enc = encode(&mut g, &params, &model.config, input, &Injection::none(), PluginRowPolicy::Standard)?;
    greedy_decode_with(&mut g, &params, &model.config, enc.output, max_steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_pick_lowest_id() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[0.0, 0.0]), 0);
    }

    #[test]
    fn eos_first_gives_empty_body() {
        let config = ModelConfig::default();
        let mut model = BaseModel::init(config.clone(), 3).unwrap();
        // Force EOS: zero output weights, bias favouring EOS.
        model.params.output_w = crate::tensor::Tensor::zeros(config.d_model, config.vocab_size);
        model.params.output_b.set(0, EOS, 5.0);
        let out = greedy_decode(&model, &SegmentedInput::source(&[10, 11]), 10).unwrap();
        assert!(out.is_empty());
    }
}
