//! Corpus generators and JSON Lines IO.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{compose, vocab, Aspect, AspectKind, AspectValue, Target, MAX_KEYWORDS};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::transformer::{SegmentedInput, TrainingPair};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
    pub aspects: BTreeMap<String, AspectValue>,
}

impl Example {
    /// Labels in canonical aspect order.
    pub fn labels(&self) -> Result<Vec<(Aspect, AspectValue)>> {
        let mut out = self
            .aspects
            .iter()
            .map(|(k, v)| Ok((k.parse::<Aspect>()?, v.clone())))
            .collect::<Result<Vec<_>>>()?;
        out.sort_by_key(|(a, _)| a.canonical_index());
        Ok(out)
    }

    pub fn value(&self, aspect: Aspect) -> Option<&AspectValue> {
        self.aspects.get(aspect.name())
    }
}

/// Inclusive range of source lengths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthRange {
    pub min: usize,
    pub max: usize,
}

impl Default for LengthRange {
    fn default() -> Self {
        Self { min: 3, max: 7 }
    }
}

impl LengthRange {
    pub fn validate(&self) -> Result<()> {
        // Keywords must stay disjoint from x and both of its shifts.
        if self.min == 0 || self.min > self.max || 3 * self.max + MAX_KEYWORDS > vocab::CONTENT_BAND {
            return Err(Error::Config(format!("bad length range {}..={}", self.min, self.max)));
        }
        Ok(())
    }
}

fn sample_source(rng: &mut Rng, lengths: LengthRange) -> Vec<usize> {
    let n = rng.range_inclusive(lengths.min, lengths.max);
    (0..n).map(|_| vocab::CONTENT_START + rng.below(vocab::CONTENT_BAND)).collect()
}

/// Keywords avoid every token of `x` and of its two shifts, so their
/// presence in an output is never accidental.
fn sample_keywords(rng: &mut Rng, x: &[usize]) -> Vec<usize> {
    let mut pool: Vec<usize> = (vocab::CONTENT_START..vocab::CONTENT_END)
        .filter(|t| !(0..3).any(|by| x.iter().any(|&s| super::shift_token(s, by) == *t)))
        .collect();
    let count = rng.range_inclusive(1, MAX_KEYWORDS);
    rng.shuffle(&mut pool);
    pool.truncate(count);
    pool
}

fn sample_value(rng: &mut Rng, aspect: Aspect, x: &[usize]) -> AspectValue {
    match aspect.kind() {
        AspectKind::Categorical(labels) => AspectValue::label(labels[rng.below(labels.len())]),
        AspectKind::FreeForm => AspectValue::Keywords(sample_keywords(rng, x)),
    }
}

fn canonical(aspects: &[Aspect]) -> Result<Vec<Aspect>> {
    let mut sorted = aspects.to_vec();
    sorted.sort_by_key(|a| a.canonical_index());
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateAspect(w[0].name().into()));
    }
    Ok(sorted)
}

/// Examples labelled with every aspect in `aspects`, targets composed in
/// canonical order.
pub fn gen_multi_aspect(aspects: &[Aspect], n: usize, lengths: LengthRange, seed: u64) -> Result<Vec<Example>> {
    lengths.validate()?;
    let aspects = canonical(aspects)?;
    let mut rng = Rng::derive(seed, "corpus");
    (0..n)
        .map(|_| {
            let x = sample_source(&mut rng, lengths);
            let labels: Vec<(Aspect, AspectValue)> = aspects.iter().map(|&a| (a, sample_value(&mut rng, a, &x))).collect();
            let y = compose(&x, &labels)?;
            let aspects = labels.into_iter().map(|(a, v)| (a.name().to_string(), v)).collect();
            Ok(Example { x, y, aspects })
        })
        .collect()
}

pub fn gen_single_aspect(aspect: Aspect, n: usize, lengths: LengthRange, seed: u64) -> Result<Vec<Example>> {
    gen_multi_aspect(&[aspect], n, lengths, seed)
}

/// Copy task: `y = x`, no labels.
pub fn gen_base_corpus(n: usize, lengths: LengthRange, seed: u64) -> Result<Vec<Example>> {
    gen_multi_aspect(&[], n, lengths, seed)
}

/// Knobs of the pretraining mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSettings {
    /// Chance that a constraint segment for a given aspect is present.
    pub segment_prob: f64,
    /// Chance that a present constraint is actually applied to the target.
    pub follow_prob: f64,
}

impl Default for MixtureSettings {
    fn default() -> Self {
        Self { segment_prob: 0.4, follow_prob: 0.6 }
    }
}

impl MixtureSettings {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("segment_prob", self.segment_prob), ("follow_prob", self.follow_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Pretraining data for the base model.
///
/// Without constraint segments the target is a copy of `x`. A present
/// segment is obeyed only with `follow_prob`. A base trained on this copies
/// unconstrained inputs and has seen each transformation next to its
/// constraint text, without following that text reliably.
pub fn gen_pretrain_mixture(n: usize, lengths: LengthRange, mix: &MixtureSettings, seed: u64) -> Result<Vec<TrainingPair>> {
    lengths.validate()?;
    mix.validate()?;
    let mut rng = Rng::derive(seed, "pretrain-mixture");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sample_source(&mut rng, lengths);
        let mut target = Target::copy_of(&x);
        let mut segments: Vec<(usize, Vec<usize>)> = Vec::new();
        for a in Aspect::ALL {
            if rng.bernoulli(mix.segment_prob) {
                let v = sample_value(&mut rng, a, &x);
                segments.push((a.segment_id(), a.render_constraint(&v)?));
                if rng.bernoulli(mix.follow_prob) {
                    a.transform(&mut target, &v)?;
                }
            }
        }
        rng.shuffle(&mut segments);
        let mut input = SegmentedInput::source(&x);
        for (id, tokens) in &segments {
            input.push(tokens, *id);
        }
        out.push(TrainingPair { input, target: target.render() });
    }
    Ok(out)
}

pub fn write_jsonl(w: &mut impl Write, examples: &[Example]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut *w, ex)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        for (a, v) in ex.labels()? {
            a.validate_value(&v)?;
        }
        out.push(ex);
    }
    Ok(out)
}
