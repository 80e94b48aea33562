#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thermalign::dataset::Split;
use thermalign::synth::KindChoice;
use thermalign::Error;

use crate::commands::Predictor;
use crate::config::RunConfig;

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_SCHEMA: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_NUMERIC: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "thermalign", version, about = "Visible/thermal dense registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Threads for per-pair work.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Module {
    Gsce,
    Lfe,
    Gcce,
    Lcce,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Kind {
    Aff,
    Hg,
    Tps,
    Mixed,
}

impl From<Kind> for KindChoice {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Aff => KindChoice::Affine,
            Kind::Hg => KindChoice::Homography,
            Kind::Tps => KindChoice::Tps,
            Kind::Mixed => KindChoice::Mixed,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Baseline {
    Zero,
    Gt,
}

/// Flags that change the model variant.
#[derive(Args, Debug, Clone)]
struct ModelFlags {
    /// Modules to disable.
    #[arg(long, value_enum, num_args = 1..)]
    ablate: Vec<Module>,
    /// Channel divisor for reduced-width models.
    #[arg(long)]
    divisor: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate misaligned triplets and a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Directory of aligned pairs; procedural scenes are used otherwise.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        #[arg(long)]
        magnitude: Option<f64>,
    },
    /// Train a model on a synthesized dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this many updates.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Register one visible/thermal pair.
    Register {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        visible: PathBuf,
        #[arg(long)]
        thermal: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Score a checkpoint or a baseline on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, conflicts_with = "baseline")]
        checkpoint: Option<PathBuf>,
        /// Evaluate a fixed flow instead of a checkpoint.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// PCK thresholds in pixels.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        /// Write endpoint-error heatmaps.
        #[arg(long)]
        error_maps: bool,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Summarize evaluation results, optionally with paired t-tests.
    Report {
        #[command(flatten)]
        common: Common,
        /// `metrics.json` or the directory holding it.
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        compare: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> thermalign::Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.paths.out = Some(o.clone());
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn apply_model_flags(cfg: &mut RunConfig, m: &ModelFlags) -> thermalign::Result<()> {
    if !m.ablate.is_empty() {
        let names: Vec<String> = m
            .ablate
            .iter()
            .map(|x| format!("{x:?}").to_lowercase())
            .collect();
        cfg.train.ablation = cfg.train.ablation.without(&names)?;
    }
    if let Some(d) = m.divisor {
        cfg.train.divisor = d;
    }
    Ok(())
}

/// The configured model shape when the user set one explicitly; otherwise
/// the checkpoint's own configuration is trusted.
fn explicit_model(common: &Common, m: &ModelFlags, cfg: &RunConfig) -> thermalign::Result<Option<thermalign::model::ModelConfig>> {
    if common.config.is_some() || m.divisor.is_some() || !m.ablate.is_empty() {
        Ok(Some(cfg.model_config()?))
    } else {
        Ok(None)
    }
}

fn run(cli: Cli) -> thermalign::Result<()> {
    match cli.command {
        Command::Synth {
            common,
            source,
            count,
            height,
            width,
            kind,
            magnitude,
        } => {
            let mut cfg = resolve(&common)?;
            if source.is_some() {
                cfg.paths.source = source;
            }
            cfg.synth.count = count.unwrap_or(cfg.synth.count);
            cfg.synth.height = height.unwrap_or(cfg.synth.height);
            cfg.synth.width = width.unwrap_or(cfg.synth.width);
            cfg.synth.magnitude = magnitude.unwrap_or(cfg.synth.magnitude);
            if let Some(k) = kind {
                cfg.synth.kind = k.into();
            }
            cfg.validate()?;
            let o = commands::synth(&cfg)?;
            eprintln!("wrote {} triplets", o.written);
            for (id, e) in &o.failed {
                eprintln!("failed {id}: {e}");
            }
            for (p, e) in &o.skipped {
                eprintln!("skipped {}: {e}", p.display());
            }
        }
        Command::Train {
            common,
            dataset,
            model,
            epochs,
            steps,
            lr,
            batch_size,
        } => {
            let mut cfg = resolve(&common)?;
            if dataset.is_some() {
                cfg.paths.dataset = dataset;
            }
            apply_model_flags(&mut cfg, &model)?;
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.train.max_steps = steps.or(cfg.train.max_steps);
            cfg.train.lr = lr.unwrap_or(cfg.train.lr);
            cfg.train.batch_size = batch_size.unwrap_or(cfg.train.batch_size);
            cfg.validate()?;
            let o = commands::train_cmd(&cfg)?;
            eprintln!("{} steps on {} pairs, final loss {:.4}", o.steps, o.samples, o.final_loss);
        }
        Command::Register {
            common,
            checkpoint,
            visible,
            thermal,
            model,
        } => {
            let mut cfg = resolve(&common)?;
            if checkpoint.is_some() {
                cfg.paths.checkpoint = checkpoint;
            }
            apply_model_flags(&mut cfg, &model)?;
            cfg.validate()?;
            let expected = explicit_model(&common, &model, &cfg)?;
            let lat = commands::register(&cfg, &visible, &thermal, expected)?;
            eprintln!(
                "{}x{} registered in {:.1} ms ({:.2} fps)",
                lat.width, lat.height, lat.latency_ms, lat.fps
            );
        }
        Command::Eval {
            common,
            dataset,
            checkpoint,
            baseline,
            split,
            thresholds,
            error_maps,
            model,
        } => {
            let mut cfg = resolve(&common)?;
            if dataset.is_some() {
                cfg.paths.dataset = dataset;
            }
            if checkpoint.is_some() {
                cfg.paths.checkpoint = checkpoint;
            }
            if let Some(t) = thresholds {
                cfg.eval.thresholds = t;
            }
            cfg.eval.error_maps |= error_maps;
            apply_model_flags(&mut cfg, &model)?;
            cfg.validate()?;
            let predictor = match baseline {
                Some(Baseline::Zero) => Predictor::ZeroFlow,
                Some(Baseline::Gt) => Predictor::GroundTruth,
                None => Predictor::Checkpoint,
            };
            let split = match split {
                SplitArg::Train => Some(Split::Train),
                SplitArg::Test => Some(Split::Test),
                SplitArg::All => None,
            };
            let expected = explicit_model(&common, &model, &cfg)?;
            let f = commands::eval(&cfg, predictor, split, expected)?;
            if let Some(a) = &f.aggregate {
                eprintln!("{} pairs, AEPE {:.4} px", a.n_samples, a.aepe);
            }
            if !f.skipped.is_empty() {
                eprintln!("{} pairs skipped", f.skipped.len());
            }
        }
        Command::Report {
            common,
            results,
            compare,
        } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            commands::report(&cfg, &results, compare.as_deref())?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Contract(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Schema(_) => EXIT_SCHEMA,
        Error::Data { .. } | Error::Image(_) => EXIT_DATA,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io(_) => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
