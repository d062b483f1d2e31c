//! Run configuration, artifact layout and the commands behind the `mctg` binary.

mod commands;
mod gradcheck;

pub use commands::{
    cli_bound_check, cli_evaluate, cli_gate_stats, cli_infer, cli_mi_analyze, cli_pretrain, cli_train_plugin,
    eval_examples, evaluate_with_gaps, load_model, load_plugins, plugin_corpus, train_joint, BoundCheckOutcome,
    BoundSummary, EvalReport, GateStatsOutcome, InferOutcome, MiOutcome, PretrainMetrics, PretrainOutcome,
    TrainPluginOutcome, BOUND_TOL,
};
pub use gradcheck::{cli_gradcheck, gradcheck_suite, GradcheckSuite, GRADCHECK_STEP, GRADCHECK_TOL};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::plugins::Family;
use crate::rng::Rng;
use crate::taskgen::{Aspect, LengthRange, MixtureSettings};
use crate::transformer::{ModelConfig, TrainSettings};

/// Corpus sizes of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSizes {
    pub pretrain: usize,
    /// Single-aspect examples per plugin.
    pub plugin: usize,
    /// Multi-aspect examples for joint training.
    pub joint: usize,
    /// Held-out examples for evaluation.
    pub eval: usize,
    /// Examples fed to the interference and bound analyses.
    pub analysis: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        Self { pretrain: 20_000, plugin: 5_000, joint: 5_000, eval: 500, analysis: 20 }
    }
}

/// Everything a run depends on besides its input files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: TrainSettings,
    pub plugin: TrainSettings,
    /// Continued training of the separately trained plugins on multi-aspect data.
    pub joint: TrainSettings,
    pub mixture: MixtureSettings,
    pub lengths: LengthRange,
    pub data: DataSizes,
    pub seed: u64,
    pub aspects: Vec<Aspect>,
    pub family: Family,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: TrainSettings { warmup_steps: 200, linear_decay: true, ..TrainSettings::constant(6000, 32, 3e-3) },
            plugin: TrainSettings::constant(1000, 16, 1e-2),
            joint: TrainSettings::constant(300, 16, 1e-2),
            mixture: MixtureSettings::default(),
            lengths: LengthRange::default(),
            data: DataSizes::default(),
            seed: 0,
            aspects: Aspect::ALL.to_vec(),
            family: Family::Gated,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
            _ => e.into(),
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.plugin.validate()?;
        self.joint.validate()?;
        self.mixture.validate()?;
        self.lengths.validate()?;
        if self.lengths.max + 12 > self.model.max_len {
            return Err(Error::Config(format!(
                "max source length {} leaves no room for constraints within max_len {}",
                self.lengths.max, self.model.max_len
            )));
        }
        if self.aspects.is_empty() {
            return Err(Error::Config("aspects must not be empty".into()));
        }
        for (i, a) in self.aspects.iter().enumerate() {
            if self.aspects[..i].contains(a) {
                return Err(Error::DuplicateAspect(a.to_string()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Seed of a named sub-stream of this run.
    pub fn seed_for(&self, label: &str) -> u64 {
        Rng::derive(self.seed, label).next_u64()
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("base.ckpt")
    }

    pub fn plugin_path(&self, family: Family, aspect: Aspect, seed: u64) -> PathBuf {
        self.out_dir.join("plugins").join(format!("{family}-{}-s{seed}.plug", aspect.name().to_lowercase()))
    }
}

/// Wall-clock cost of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub stage: String,
    pub family: Option<Family>,
    pub aspect: Option<Aspect>,
    pub seed: u64,
    pub seconds: f64,
}

/// Accumulated timings of a run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub entries: Vec<TimingEntry>,
    pub total_seconds: f64,
}

impl TimingReport {
    pub fn record(&mut self, entry: TimingEntry) -> Result<()> {
        if !(entry.seconds >= 0.0 && entry.seconds.is_finite()) {
            return Err(Error::Invalid(format!("timing must be non-negative, got {}", entry.seconds)));
        }
        self.total_seconds += entry.seconds;
        self.entries.push(entry);
        Ok(())
    }

    /// Mean plugin-training seconds over `aspects` for `family`.
    pub fn mean_plugin_cost(&self, family: Family, aspects: &[Aspect]) -> Option<f64> {
        let xs: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.stage == "train-plugin" && e.family == Some(family))
            .filter(|e| e.aspect.is_some_and(|a| aspects.contains(&a)))
            .map(|e| e.seconds)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    /// Cost of adding `new` relative to the mean cost of `existing`.
    pub fn extension_ratio(&self, family: Family, existing: &[Aspect], new: Aspect) -> Option<f64> {
        Some(self.mean_plugin_cost(family, &[new])? / self.mean_plugin_cost(family, existing)?)
    }

    pub fn load_or_default(path: &Path) -> Result<Self> {
        match fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// Prepends a `# config_hash=...` line to a CSV body.
pub fn stamp_csv(hash: &str, body: &str) -> String {
    format!("# config_hash={hash}\n{body}")
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(Error::Config(_))));
        v.as_object_mut().unwrap().remove("surprise");
        v["model"]["dropout"] = serde_json::json!(0.1);
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn timing_accumulates() {
        let mut t = TimingReport::default();
        for (a, s) in [(Aspect::Shift, 2.0), (Aspect::Mark, 4.0), (Aspect::Keyword, 3.0)] {
            t.record(TimingEntry {
                stage: "train-plugin".into(),
                family: Some(Family::Gated),
                aspect: Some(a),
                seed: 0,
                seconds: s,
            })
            .unwrap();
        }
        assert_eq!(t.total_seconds, 9.0);
        assert_eq!(t.extension_ratio(Family::Gated, &[Aspect::Shift, Aspect::Mark], Aspect::Keyword), Some(1.0));
        assert!(t
            .record(TimingEntry { stage: "x".into(), family: None, aspect: None, seed: 0, seconds: -1.0 })
            .is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::MissingArtifact("x".into()).exit_code(), 3);
        assert_eq!(Error::Divergence("x".into()).exit_code(), 4);
        assert_eq!(Error::Verification("x".into()).exit_code(), 5);
    }
}
