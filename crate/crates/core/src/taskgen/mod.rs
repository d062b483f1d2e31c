//! Synthetic multi-aspect task.
//!
//! A source `x` is a run of content tokens. The unconstrained target is a
//! copy of `x`. Four aspects each rewrite one part of a structured
//! [`Target`], so their transforms commute:
//!
//! | aspect    | values            | effect                                   |
//! |-----------|-------------------|------------------------------------------|
//! | `SHIFT`   | `+1`, `+2`        | content ids shifted cyclically in band   |
//! | `MARK`    | `m1`, `m2`, `m3`  | marker token placed first                |
//! | `ORDER`   | `fwd`, `rev`      | content kept or reversed                 |
//! | `KEYWORD` | 1 to 3 tokens     | tokens inserted before the content       |

mod corpus;
mod metrics;

pub use corpus::{
    gen_base_corpus, gen_multi_aspect, gen_pretrain_mixture, gen_single_aspect, read_jsonl, write_jsonl, Example,
    LengthRange, MixtureSettings,
};
pub use metrics::{evaluate, performance_gap, Metrics};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token ids used by the task. PAD/BOS/EOS are 0/1/2.
pub mod vocab {
    pub const MARKERS: [usize; 3] = [3, 4, 5];
    pub const A_SHIFT: usize = 6;
    pub const A_MARK: usize = 7;
    pub const A_ORDER: usize = 8;
    pub const CONTENT_START: usize = 10;
    pub const CONTENT_END: usize = 40;
    pub const CONTENT_BAND: usize = CONTENT_END - CONTENT_START;
    pub const V_PLUS1: usize = 40;
    pub const V_PLUS2: usize = 41;
    pub const V_M1: usize = 42;
    pub const V_M2: usize = 43;
    pub const V_M3: usize = 44;
    pub const V_FWD: usize = 45;
    pub const V_REV: usize = 46;
    /// Smallest vocabulary that holds every task token.
    pub const MIN_VOCAB: usize = 47;

    pub fn is_content(t: usize) -> bool {
        (CONTENT_START..CONTENT_END).contains(&t)
    }
}

pub const MAX_KEYWORDS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Aspect {
    Shift,
    Mark,
    Order,
    Keyword,
}

/// A value of one aspect: a categorical label or a keyword list.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AspectValue {
    Label(String),
    Keywords(Vec<usize>),
}

impl AspectValue {
    pub fn label(s: &str) -> Self {
        AspectValue::Label(s.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AspectKind {
    Categorical(&'static [&'static str]),
    FreeForm,
}

/// Structured target; rendering gives `marker? keywords.. content..`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Target {
    pub marker: Option<usize>,
    pub keywords: Vec<usize>,
    pub content: Vec<usize>,
}

impl Target {
    pub fn copy_of(x: &[usize]) -> Self {
        Self { marker: None, keywords: Vec::new(), content: x.to_vec() }
    }

    pub fn render(&self) -> Vec<usize> {
        self.marker.iter().chain(&self.keywords).chain(&self.content).copied().collect()
    }
}

pub fn shift_token(t: usize, by: usize) -> usize {
    debug_assert!(vocab::is_content(t));
    vocab::CONTENT_START + (t - vocab::CONTENT_START + by) % vocab::CONTENT_BAND
}

fn shift_all(x: &[usize], by: usize) -> Vec<usize> {
    x.iter().map(|&t| shift_token(t, by)).collect()
}

fn reversed(x: &[usize]) -> Vec<usize> {
    x.iter().rev().copied().collect()
}

impl Aspect {
    /// Canonical composition order.
    pub const ALL: [Aspect; 4] = [Aspect::Shift, Aspect::Mark, Aspect::Order, Aspect::Keyword];

    pub fn name(self) -> &'static str {
        match self {
            Aspect::Shift => "SHIFT",
            Aspect::Mark => "MARK",
            Aspect::Order => "ORDER",
            Aspect::Keyword => "KEYWORD",
        }
    }

    pub fn kind(self) -> AspectKind {
        match self {
            Aspect::Shift => AspectKind::Categorical(&["+1", "+2"]),
            Aspect::Mark => AspectKind::Categorical(&["m1", "m2", "m3"]),
            Aspect::Order => AspectKind::Categorical(&["fwd", "rev"]),
            Aspect::Keyword => AspectKind::FreeForm,
        }
    }

    /// Segment id of this aspect's constraint text; the source uses 0.
    pub fn segment_id(self) -> usize {
        self.canonical_index() + 1
    }

    pub fn canonical_index(self) -> usize {
        Aspect::ALL.iter().position(|&a| a == self).expect("listed")
    }

    fn label_index(self, value: &AspectValue) -> Result<usize> {
        let unknown = || Error::UnknownValue { aspect: self.name().into(), value: format!("{value:?}") };
        match (self.kind(), value) {
            (AspectKind::Categorical(labels), AspectValue::Label(l)) => labels.iter().position(|c| c == l).ok_or_else(unknown),
            _ => Err(unknown()),
        }
    }

    fn keywords(self, value: &AspectValue) -> Result<&[usize]> {
        match value {
            AspectValue::Keywords(k) if self == Aspect::Keyword && (1..=MAX_KEYWORDS).contains(&k.len()) => Ok(k),
            _ => Err(Error::UnknownValue { aspect: self.name().into(), value: format!("{value:?}") }),
        }
    }

    pub fn validate_value(self, value: &AspectValue) -> Result<()> {
        match self {
            Aspect::Keyword => {
                let k = self.keywords(value)?;
                if k.iter().any(|&t| !vocab::is_content(t)) {
                    return Err(Error::UnknownValue { aspect: self.name().into(), value: format!("{k:?}") });
                }
                Ok(())
            }
            _ => self.label_index(value).map(|_| ()),
        }
    }

    /// Applies this aspect to a structured target.
    pub fn transform(self, target: &mut Target, value: &AspectValue) -> Result<()> {
        match self {
            Aspect::Shift => {
                let by = self.label_index(value)? + 1;
                target.content = shift_all(&target.content, by);
            }
            Aspect::Mark => target.marker = Some(vocab::MARKERS[self.label_index(value)?]),
            Aspect::Order => {
                if self.label_index(value)? == 1 {
                    target.content.reverse();
                }
            }
            Aspect::Keyword => target.keywords = self.keywords(value)?.to_vec(),
        }
        Ok(())
    }

    /// Score in [0, 1] of output `y` for source `x`: 0/1 for categorical
    /// aspects, the fraction of required keywords present for `KEYWORD`.
    ///
    /// `SHIFT` and `ORDER` look at the last `|x|` tokens and accept any value
    /// of the other one, so each verifier ignores the other aspects.
    pub fn verify(self, x: &[usize], y: &[usize], value: &AspectValue) -> Result<f64> {
        let body = (y.len() >= x.len()).then(|| &y[y.len() - x.len()..]);
        let ok = match self {
            Aspect::Shift => {
                let s = shift_all(x, self.label_index(value)? + 1);
                body.is_some_and(|b| b == s.as_slice() || b == reversed(&s).as_slice())
            }
            Aspect::Mark => y.first() == Some(&vocab::MARKERS[self.label_index(value)?]),
            Aspect::Order => {
                let rev = self.label_index(value)? == 1;
                body.is_some_and(|b| {
                    (0..3).any(|by| {
                        let s = shift_all(x, by);
                        if rev {
                            b == reversed(&s).as_slice()
                        } else {
                            b == s.as_slice()
                        }
                    })
                })
            }
            Aspect::Keyword => {
                let k = self.keywords(value)?;
                let hits = k.iter().filter(|t| y.contains(t)).count();
                return Ok(hits as f64 / k.len() as f64);
            }
        };
        Ok(if ok { 1.0 } else { 0.0 })
    }

    /// Textual constraint `c`.
    pub fn render_constraint(self, value: &AspectValue) -> Result<Vec<usize>> {
        use vocab::*;
        Ok(match self {
            Aspect::Shift => vec![A_SHIFT, [V_PLUS1, V_PLUS2][self.label_index(value)?]],
            Aspect::Mark => vec![A_MARK, [V_M1, V_M2, V_M3][self.label_index(value)?]],
            Aspect::Order => vec![A_ORDER, [V_FWD, V_REV][self.label_index(value)?]],
            Aspect::Keyword => {
                self.validate_value(value)?;
                self.keywords(value)?.to_vec()
            }
        })
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aspect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aspect::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownAspect(s.to_string()))
    }
}

/// The four registered aspects in canonical order.
pub fn default_aspects() -> Vec<Aspect> {
    Aspect::ALL.to_vec()
}

/// Parses `"+1"`-style labels or a comma/space separated keyword list.
pub fn parse_value(aspect: Aspect, text: &str) -> Result<AspectValue> {
    let value = match aspect.kind() {
        AspectKind::Categorical(_) => AspectValue::label(text),
        AspectKind::FreeForm => {
            let ids = text
                .split(|c: char| c == ',' || c == ' ' || c == ';')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<usize>().map_err(|_| Error::UnknownValue { aspect: aspect.name().into(), value: text.into() }))
                .collect::<Result<Vec<_>>>()?;
            AspectValue::Keywords(ids)
        }
    };
    aspect.validate_value(&value)?;
    Ok(value)
}

/// Composes the transforms of `aspects` over a copy of `x` in canonical order.
pub fn compose(x: &[usize], aspects: &[(Aspect, AspectValue)]) -> Result<Vec<usize>> {
    let mut sorted: Vec<&(Aspect, AspectValue)> = aspects.iter().collect();
    sorted.sort_by_key(|(a, _)| a.canonical_index());
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        let dup = sorted.windows(2).find(|w| w[0].0 == w[1].0).expect("checked")[0].0;
        return Err(Error::DuplicateAspect(dup.name().into()));
    }
    let mut t = Target::copy_of(x);
    for (a, v) in sorted {
        a.transform(&mut t, v)?;
    }
    Ok(t.render())
}
