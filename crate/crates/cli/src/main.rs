use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info};

use pixpoint::harness::config::Config;
use pixpoint::harness::eval::run_eval_checkpoint;
use pixpoint::harness::{dataset, trace, train};
use pixpoint::losses::DescriptorLossKind;
use pixpoint::Error;

/// Pixel/point descriptor learning on synthetic RGB-D scenes.
#[derive(Debug, Parser)]
#[command(name = "pixpoint", version)]
struct Cli {
    /// JSON config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (a file for `trace`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Circle,
    Triplet,
    Contrastive,
}

impl From<LossArg> for DescriptorLossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Circle => DescriptorLossKind::Circle,
            LossArg::Triplet => DescriptorLossKind::Triplet,
            LossArg::Contrastive => DescriptorLossKind::Contrastive,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (raw frames, pairs, split).
    Synth {
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Build pairs from raw RGB-D frames under `<raw>/raw/<scene>/frame_<k>`.
    Preprocess {
        #[arg(long)]
        raw: PathBuf,
    },
    /// Train on the training split of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Per-epoch similarity means from a training trace.
    Trace {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Json(_) => 3,
        Error::Diverged { .. } => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<Config, Error> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path, Error> {
    out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth {
            scenes,
            points,
            image_size,
        } => {
            if let Some(n) = scenes {
                cfg.synth.n_scenes = *n;
            }
            if let Some(n) = points {
                cfg.synth.points_per_scene = *n;
            }
            if let Some(n) = image_size {
                cfg.synth.image_size = *n;
            }
            cfg.validate()?;
            let index = dataset::synthesize(require_out(&cli.out)?, &cfg)?;
            info!("{} train / {} test pairs", index.train.len(), index.test.len());
        }
        Command::Preprocess { raw } => {
            cfg.validate()?;
            let index = dataset::preprocess(raw, require_out(&cli.out)?, &cfg)?;
            info!("{} train / {} test pairs", index.train.len(), index.test.len());
        }
        Command::Train { data, loss, epochs } => {
            if let Some(l) = loss {
                cfg.loss.descriptor = (*l).into();
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let out = train::run_train(data, &cfg, require_out(&cli.out)?)?;
            info!("final d_p - d_n* gap {:.4}", out.final_gap());
        }
        Command::Eval {
            data,
            checkpoint,
            top_k,
        } => {
            if let Some(k) = top_k {
                cfg.detection.top_k = *k;
            }
            cfg.validate()?;
            let report = run_eval_checkpoint(data, checkpoint, &cfg, require_out(&cli.out)?)?;
            if let Some(s) = report.summary {
                println!("{}", serde_json::to_string(&s)?);
            }
        }
        Command::Trace { trace: path } => {
            let rows = trace::plotdata(path, require_out(&cli.out)?)?;
            info!("{} epochs", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
