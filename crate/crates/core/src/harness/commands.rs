use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{stamp_csv, write_file, write_json, RunConfig, TimingEntry, TimingReport};
use crate::error::{Error, Result};
use crate::interference::{
    analyze_bounds, correlation, gate_stats, gates_csv, measure_mi, mi_curve_csv, BoundAnalysis, CurveEntry,
    GateStats, MIReport, RESIDUAL_TOL,
};
use crate::plugins::{
    combine_plugins, decode_with_plugins, evaluate_combo, joint_train_plugins, load_plugin, save_plugin, train_plugin,
    Family, Plugin, PluginCombo,
};
use crate::taskgen::{
    gen_base_corpus, gen_multi_aspect, gen_pretrain_mixture, gen_single_aspect, performance_gap, read_jsonl, Aspect,
    AspectValue, Example, Metrics,
};
use crate::transformer::{
    load_checkpoint, pretrain_base, save_checkpoint, token_accuracy, BaseModel, SegmentedInput, TrainingPair,
};

fn loss_csv(hash: &str, losses: &[f64]) -> String {
    let mut body = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(body, "{},{}", i + 1, l);
    }
    stamp_csv(hash, &body)
}

fn record_timing(cfg: &RunConfig, entry: TimingEntry) -> Result<()> {
    let path = cfg.out_dir.join("timing.json");
    let mut report = TimingReport::load_or_default(&path)?;
    report.record(entry)?;
    report.save(&path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub config_hash: String,
    pub steps: usize,
    /// Mean loss over the last 100 steps.
    pub final_loss: f64,
    /// Greedy token accuracy on held-out copy examples.
    pub copy_accuracy: f64,
    pub heldout: usize,
}

pub struct PretrainOutcome {
    pub model: BaseModel,
    pub metrics: PretrainMetrics,
    pub losses: Vec<f64>,
    pub seconds: f64,
}

/// Pretrains the base model and writes `base.ckpt`, `pretrain_metrics.json`
/// and `pretrain_loss.csv` under the run directory.
pub fn cli_pretrain(cfg: &RunConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let hash = cfg.hash();
    let started = std::time::Instant::now();
    let corpus = gen_pretrain_mixture(cfg.data.pretrain, cfg.lengths, &cfg.mixture, cfg.seed_for("pretrain/corpus"))?;
    let (model, report) = pretrain_base(&cfg.model, &corpus, &cfg.pretrain, cfg.seed_for("pretrain"))?;
    let seconds = started.elapsed().as_secs_f64();
    let heldout = gen_base_corpus(cfg.data.eval, cfg.lengths, cfg.seed_for("pretrain/heldout"))?;
    let pairs: Vec<TrainingPair> =
        heldout.iter().map(|e| TrainingPair { input: SegmentedInput::source(&e.x), target: e.y.clone() }).collect();
    let tail = &report.losses[report.losses.len().saturating_sub(100)..];
    let metrics = PretrainMetrics {
        config_hash: hash.clone(),
        steps: report.losses.len(),
        final_loss: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        copy_accuracy: token_accuracy(&model, &pairs)?,
        heldout: pairs.len(),
    };
    save_checkpoint(&cfg.checkpoint_path(), &model)?;
    write_json(&cfg.out_dir.join("pretrain_metrics.json"), &metrics)?;
    write_file(&cfg.out_dir.join("pretrain_loss.csv"), loss_csv(&hash, &report.losses).as_bytes())?;
    record_timing(cfg, TimingEntry { stage: "pretrain".into(), family: None, aspect: None, seed: cfg.seed, seconds })?;
    Ok(PretrainOutcome { model, metrics, losses: report.losses, seconds })
}

pub struct TrainPluginOutcome {
    pub plugin: Plugin,
    pub path: PathBuf,
    pub losses: Vec<f64>,
    pub seconds: f64,
}

/// Single-aspect training data for one plugin seed.
pub fn plugin_corpus(cfg: &RunConfig, aspect: Aspect, seed: u64) -> Result<Vec<Example>> {
    gen_single_aspect(aspect, cfg.data.plugin, cfg.lengths, cfg.seed_for(&format!("plugin-data/{aspect}/{seed}")))
}

/// Trains one plugin against a saved base and writes the plugin file, its
/// loss curve and a timing entry.
pub fn cli_train_plugin(cfg: &RunConfig, model: &BaseModel, aspect: Aspect, family: Family, seed: u64) -> Result<TrainPluginOutcome> {
    cfg.validate()?;
    let corpus = plugin_corpus(cfg, aspect, seed)?;
    let trained = train_plugin(model, aspect, family, &corpus, &cfg.plugin, seed)?;
    let plugin = trained.plugins.into_iter().next().expect("one plugin");
    let path = cfg.plugin_path(family, aspect, seed);
    save_plugin(&path, &plugin, &model.config)?;
    write_file(&path.with_extension("loss.csv"), loss_csv(&cfg.hash(), &trained.losses).as_bytes())?;
    record_timing(
        cfg,
        TimingEntry {
            stage: "train-plugin".into(),
            family: Some(family),
            aspect: Some(aspect),
            seed,
            seconds: trained.seconds,
        },
    )?;
    Ok(TrainPluginOutcome { plugin, path, losses: trained.losses, seconds: trained.seconds })
}

pub fn load_model(path: &Path) -> Result<BaseModel> {
    load_checkpoint(path)
}

pub fn load_plugins(paths: &[PathBuf]) -> Result<Vec<Plugin>> {
    paths.iter().map(|p| load_plugin(p)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferOutcome {
    pub input: Vec<usize>,
    pub aspects: Vec<String>,
    pub output: Vec<usize>,
}

/// Greedy decode of `x` under the given plugins; `values` are matched to
/// plugins by aspect.
pub fn cli_infer(
    model: &BaseModel,
    plugins: &[Plugin],
    x: &[usize],
    values: &BTreeMap<Aspect, AspectValue>,
    out_dir: Option<&Path>,
) -> Result<InferOutcome> {
    let combo = combine_plugins(plugins)?;
    let vals: Vec<AspectValue> = combo
        .aspects()
        .iter()
        .map(|a| values.get(a).cloned().ok_or_else(|| Error::Config(format!("no value given for {a}"))))
        .collect::<Result<_>>()?;
    let output = decode_with_plugins(model, &combo, x, &vals)?;
    let outcome = InferOutcome {
        input: x.to_vec(),
        aspects: combo.aspects().iter().map(|a| a.name().to_string()).collect(),
        output,
    };
    if let Some(dir) = out_dir {
        write_json(&dir.join("infer.json"), &outcome)?;
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub family: Option<Family>,
    pub metrics: Metrics,
    /// Each plugin alone on the same examples, scored on its own aspect.
    pub single: BTreeMap<String, f64>,
    /// Combined minus single, per aspect.
    pub gaps: BTreeMap<String, f64>,
}

/// Evaluation examples: a JSONL file if given, else a fresh held-out set
/// labelled with the combo's aspects.
pub fn eval_examples(cfg: &RunConfig, aspects: &[Aspect], file: Option<&Path>) -> Result<Vec<Example>> {
    match file {
        Some(path) => {
            let f = File::open(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
                _ => e.into(),
            })?;
            read_jsonl(BufReader::new(f))
        }
        None => {
            let names: Vec<&str> = aspects.iter().map(|a| a.name()).collect();
            gen_multi_aspect(aspects, cfg.data.eval, cfg.lengths, cfg.seed_for(&format!("eval/{}", names.join("+"))))
        }
    }
}

/// Accuracy of the combined plugins plus the gap to each plugin alone.
pub fn evaluate_with_gaps(model: &BaseModel, combo: &PluginCombo, examples: &[Example]) -> Result<(Metrics, Metrics)> {
    let (multi, _) = evaluate_combo(model, combo, examples)?;
    let mut per_aspect = BTreeMap::new();
    for p in combo.plugins() {
        let alone = combine_plugins(std::slice::from_ref(p))?;
        let (m, _) = evaluate_combo(model, &alone, examples)?;
        per_aspect.extend(m.per_aspect);
    }
    let average = per_aspect.values().sum::<f64>() / per_aspect.len().max(1) as f64;
    Ok((multi, Metrics { per_aspect, average, count: examples.len() }))
}

pub fn cli_evaluate(cfg: &RunConfig, model: &BaseModel, plugins: &[Plugin], examples: &[Example]) -> Result<EvalReport> {
    let combo = combine_plugins(plugins)?;
    let (metrics, single) = if combo.len() > 1 {
        evaluate_with_gaps(model, &combo, examples)?
    } else {
        let (m, _) = evaluate_combo(model, &combo, examples)?;
        (m.clone(), m)
    };
    let gaps = performance_gap(&single, &metrics)?;
    let report =
        EvalReport { config_hash: cfg.hash(), family: combo.family(), metrics, single: single.per_aspect, gaps };
    let names: Vec<String> = combo.aspects().iter().map(|a| a.name().to_lowercase()).collect();
    let family = combo.family().map_or("base".to_string(), |f| f.to_string());
    write_json(&cfg.out_dir.join(format!("metrics-{family}-{}.json", names.join("+"))), &report)?;
    Ok(report)
}

/// Warm-started joint training of separately trained plugins.
pub fn train_joint(cfg: &RunConfig, model: &BaseModel, separate: &[Plugin], seed: u64) -> Result<Vec<Plugin>> {
    let aspects: Vec<Aspect> = separate.iter().map(|p| p.aspect).collect();
    let names: Vec<&str> = aspects.iter().map(|a| a.name()).collect();
    let corpus = gen_multi_aspect(
        &aspects,
        cfg.data.joint,
        cfg.lengths,
        cfg.seed_for(&format!("joint-data/{}/{seed}", names.join("+"))),
    )?;
    Ok(joint_train_plugins(model, separate, &corpus, &cfg.joint, seed)?.plugins)
}

fn analysis_examples(cfg: &RunConfig, aspects: &[Aspect]) -> Result<Vec<Example>> {
    let names: Vec<&str> = aspects.iter().map(|a| a.name()).collect();
    gen_multi_aspect(aspects, cfg.data.analysis, cfg.lengths, cfg.seed_for(&format!("analysis/{}", names.join("+"))))
}

pub struct MiOutcome {
    pub report: MIReport,
    pub joint: Vec<Plugin>,
}

/// Mutual interference of `separate` against `joint`; when `joint` is
/// `None` the joint reference is trained here and saved next to the
/// separate plugins. Writes `mi_curve.csv`.
pub fn cli_mi_analyze(cfg: &RunConfig, model: &BaseModel, separate: &[Plugin], joint: Option<Vec<Plugin>>) -> Result<MiOutcome> {
    let joint = match joint {
        Some(j) => j,
        None => {
            let j = train_joint(cfg, model, separate, cfg.seed)?;
            for p in &j {
                let path = cfg.out_dir.join("plugins").join(format!(
                    "joint-{}-{}-s{}.plug",
                    p.family,
                    p.aspect.name().to_lowercase(),
                    cfg.seed
                ));
                save_plugin(&path, p, &model.config)?;
            }
            j
        }
    };
    let sep = combine_plugins(separate)?;
    let aspects = sep.aspects();
    let examples = analysis_examples(cfg, &aspects)?;
    let report = measure_mi(model, &sep, &combine_plugins(&joint)?, &examples)?;
    let entry = CurveEntry { family: report.family, seed: cfg.seed, report: report.clone() };
    write_file(&cfg.out_dir.join("mi_curve.csv"), stamp_csv(&cfg.hash(), &mi_curve_csv(&[entry])).as_bytes())?;
    Ok(MiOutcome { report, joint })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub config_hash: String,
    pub instances: usize,
    pub assumption_fraction: f64,
    /// Instances where the assumption and the mass conditions hold.
    pub eligible: usize,
    /// Eligible instances where the bound fails beyond `tolerance`.
    pub violations: usize,
    pub strict_violations: usize,
    pub tolerance: f64,
    pub max_decomposition_residual: f64,
    pub max_multihead_residual: f64,
}

pub struct BoundCheckOutcome {
    pub analysis: BoundAnalysis,
    pub summary: BoundSummary,
}

/// Tolerance of the per-head bound comparison.
pub const BOUND_TOL: f64 = 1e-8;

/// Bound checks for a pair of plugins. Writes `bound.csv`,
/// `bound_detail.csv`, `bound_multihead.csv`, `qr.csv` and
/// `bound_summary.json`.
pub fn cli_bound_check(cfg: &RunConfig, model: &BaseModel, separate: &[Plugin], joint: Option<Vec<Plugin>>) -> Result<BoundCheckOutcome> {
    if separate.len() != 2 {
        return Err(Error::Config(format!("bound-check takes exactly two plugins, got {}", separate.len())));
    }
    let joint = match joint {
        Some(j) => j,
        None => train_joint(cfg, model, separate, cfg.seed)?,
    };
    if joint.len() != 2 {
        return Err(Error::Config("joint plugins must be a pair".into()));
    }
    let aspects: Vec<Aspect> = separate.iter().map(|p| p.aspect).collect();
    let examples = analysis_examples(cfg, &aspects)?;
    let analysis = analyze_bounds(model, [&separate[0], &separate[1]], [&joint[0], &joint[1]], &examples)?;
    let eligible: Vec<_> = analysis.eligible().collect();
    let hash = cfg.hash();
    let summary = BoundSummary {
        config_hash: hash.clone(),
        instances: analysis.heads.len(),
        assumption_fraction: analysis.assumption_fraction(),
        eligible: eligible.len(),
        violations: eligible.iter().filter(|h| !h.holds(BOUND_TOL)).count(),
        strict_violations: eligible.iter().filter(|h| !h.strict_holds(BOUND_TOL)).count(),
        tolerance: BOUND_TOL,
        max_decomposition_residual: analysis.heads.iter().map(|h| h.max_residual).fold(0.0, f64::max),
        max_multihead_residual: analysis.multi.iter().map(|m| m.residual.abs()).fold(0.0, f64::max),
    };
    if summary.max_decomposition_residual > RESIDUAL_TOL {
        return Err(Error::Verification(format!(
            "head decomposition residual {} exceeds {RESIDUAL_TOL}",
            summary.max_decomposition_residual
        )));
    }
    let dir = &cfg.out_dir;
    write_file(&dir.join("bound.csv"), stamp_csv(&hash, &analysis.bound_csv()).as_bytes())?;
    write_file(&dir.join("bound_detail.csv"), stamp_csv(&hash, &analysis.detail_csv()).as_bytes())?;
    write_file(&dir.join("bound_multihead.csv"), stamp_csv(&hash, &analysis.multihead_csv()).as_bytes())?;
    write_file(&dir.join("qr.csv"), stamp_csv(&hash, &analysis.qr_csv()).as_bytes())?;
    write_json(&dir.join("bound_summary.json"), &summary)?;
    Ok(BoundCheckOutcome { analysis, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStatsOutcome {
    pub config_hash: String,
    pub plugins: BTreeMap<String, Vec<GateStats>>,
    /// Pearson correlation of gate mean and P norm over all layers and plugins.
    pub correlation: Option<f64>,
}

/// Writes `gates-<name>.csv` per gated plugin and `gate_summary.json`.
pub fn cli_gate_stats(cfg: &RunConfig, plugins: &[(String, Plugin)]) -> Result<GateStatsOutcome> {
    let hash = cfg.hash();
    let mut all = BTreeMap::new();
    let (mut gs, mut ps) = (Vec::new(), Vec::new());
    for (name, plugin) in plugins {
        let stats = gate_stats(plugin)?;
        write_file(&cfg.out_dir.join(format!("gates-{name}.csv")), stamp_csv(&hash, &gates_csv(&stats)).as_bytes())?;
        gs.extend(stats.iter().map(|s| s.gate_mean));
        ps.extend(stats.iter().map(|s| s.p_l1_mean));
        all.insert(name.clone(), stats);
    }
    let outcome = GateStatsOutcome { config_hash: hash, plugins: all, correlation: correlation(&gs, &ps) };
    write_json(&cfg.out_dir.join("gate_summary.json"), &outcome)?;
    Ok(outcome)
}
