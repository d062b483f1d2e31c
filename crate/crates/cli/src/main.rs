use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prompt_gating::harness::{self, RunConfig};
use prompt_gating::plugins::Family;
use prompt_gating::taskgen::{parse_value, Aspect, AspectValue};
use prompt_gating::{Error, Result};

#[derive(Parser)]
#[command(name = "mctg", version, about = "Multi-aspect controllable generation with plug-in prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON). Defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ModelArg {
    /// Base-model checkpoint; defaults to `<out>/base.ckpt`.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and freeze the base model.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train one plugin on single-aspect data.
    TrainPlugin {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        family: Option<Family>,
        #[arg(long)]
        aspect: Aspect,
    },
    /// Greedy decode of one source sequence.
    Infer {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, value_delimiter = ',')]
        plugins: Vec<PathBuf>,
        /// Constraint value, NAME=VALUE; repeat per plugin.
        #[arg(long = "aspect")]
        aspects: Vec<String>,
        /// Comma-separated source token ids.
        #[arg(long, value_delimiter = ',', required = true)]
        input: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics of a plugin combination, with gaps to each plugin alone.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, value_delimiter = ',')]
        plugins: Vec<PathBuf>,
        /// JSONL evaluation corpus; generated from the config when absent.
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Per-layer interference between separately and jointly trained plugins.
    MiAnalyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, value_delimiter = ',', required = true)]
        plugins: Vec<PathBuf>,
        /// Jointly trained counterparts; trained here when absent.
        #[arg(long, value_delimiter = ',')]
        joint: Vec<PathBuf>,
    },
    /// Head decompositions and interference bounds for a plugin pair.
    BoundCheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, value_delimiter = ',', required = true)]
        plugins: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        joint: Vec<PathBuf>,
    },
    /// Per-layer gate and shift statistics of gated plugins.
    GateStats {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        plugins: Vec<PathBuf>,
    },
    /// Finite-difference check of every gradient path.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Sampled entries per case.
        #[arg(long, default_value_t = 150)]
        entries: usize,
    },
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_path(cfg: &RunConfig, arg: &ModelArg) -> PathBuf {
    arg.model.clone().unwrap_or_else(|| cfg.checkpoint_path())
}

fn parse_constraints(items: &[String]) -> Result<BTreeMap<Aspect, AspectValue>> {
    let mut out = BTreeMap::new();
    for item in items {
        let (name, value) =
            item.split_once('=').ok_or_else(|| Error::Config(format!("expected NAME=VALUE, got `{item}`")))?;
        let aspect: Aspect = name.parse()?;
        if out.insert(aspect, parse_value(aspect, value)?).is_some() {
            return Err(Error::DuplicateAspect(aspect.to_string()));
        }
    }
    Ok(out)
}

fn threads() -> Result<usize> {
    match std::env::var("MCTG_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("MCTG_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(1),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    // Every computation is sequential, so any positive cap is honoured.
    threads()?;
    match cli.command {
        Command::Pretrain { common } => {
            let cfg = run_config(&common)?;
            let outcome = harness::cli_pretrain(&cfg)?;
            print_json(&outcome.metrics)?;
        }
        Command::TrainPlugin { common, model, family, aspect } => {
            let cfg = run_config(&common)?;
            let base = harness::load_model(&model_path(&cfg, &model))?;
            let outcome = harness::cli_train_plugin(&cfg, &base, aspect, family.unwrap_or(cfg.family), cfg.seed)?;
            println!("{}", outcome.path.display());
        }
        Command::Infer { model, plugins, aspects, input, out } => {
            let path = model.model.unwrap_or_else(|| RunConfig::default().checkpoint_path());
            let base = harness::load_model(&path)?;
            let plugins = harness::load_plugins(&plugins)?;
            let outcome = harness::cli_infer(&base, &plugins, &input, &parse_constraints(&aspects)?, out.as_deref())?;
            let text: Vec<String> = outcome.output.iter().map(|t| t.to_string()).collect();
            println!("{}", text.join(","));
        }
        Command::Evaluate { common, model, plugins, eval } => {
            let cfg = run_config(&common)?;
            let base = harness::load_model(&model_path(&cfg, &model))?;
            let plugins = harness::load_plugins(&plugins)?;
            let aspects: Vec<Aspect> = plugins.iter().map(|p| p.aspect).collect();
            let examples = harness::eval_examples(&cfg, &aspects, eval.as_deref())?;
            print_json(&harness::cli_evaluate(&cfg, &base, &plugins, &examples)?)?;
        }
        Command::MiAnalyze { common, model, plugins, joint } => {
            let cfg = run_config(&common)?;
            let base = harness::load_model(&model_path(&cfg, &model))?;
            let separate = harness::load_plugins(&plugins)?;
            let joint = (!joint.is_empty()).then(|| harness::load_plugins(&joint)).transpose()?;
            print_json(&harness::cli_mi_analyze(&cfg, &base, &separate, joint)?.report)?;
        }
        Command::BoundCheck { common, model, plugins, joint } => {
            let cfg = run_config(&common)?;
            let base = harness::load_model(&model_path(&cfg, &model))?;
            let separate = harness::load_plugins(&plugins)?;
            let joint = (!joint.is_empty()).then(|| harness::load_plugins(&joint)).transpose()?;
            let outcome = harness::cli_bound_check(&cfg, &base, &separate, joint)?;
            print_json(&outcome.summary)?;
            if outcome.summary.violations > 0 {
                return Err(Error::Verification(format!(
                    "{} eligible instances violate the bound",
                    outcome.summary.violations
                )));
            }
        }
        Command::GateStats { common, plugins } => {
            let cfg = run_config(&common)?;
            let loaded = harness::load_plugins(&plugins)?;
            let named: Vec<(String, _)> = plugins
                .iter()
                .zip(loaded)
                .map(|(path, p)| (path.file_stem().map_or("plugin".into(), |s| s.to_string_lossy().into_owned()), p))
                .collect();
            print_json(&harness::cli_gate_stats(&cfg, &named)?)?;
        }
        Command::Gradcheck { common, entries } => {
            let cfg = run_config(&common)?;
            let suite = harness::gradcheck_suite(&cfg.model, cfg.seed, entries)?;
            print_json(&suite)?;
            if !suite.passed {
                return Err(Error::Verification(format!("max relative error {:.3e}", suite.max_rel_error)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
