use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dumeta::config::{ModeName, RunConfig};
use dumeta::experiment::{self, AblationAxis, CHECKPOINT_DIR};
use dumeta::Error;

#[derive(Parser)]
#[command(name = "dumeta", version, about = "Dual meta-learning for few-shot tissue segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (dataset root for gen-data, run directory otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// Train the encoder only; the head follows its inner steps.
    #[arg(long)]
    mfl_only: bool,
    /// Disable the prototype regularizer.
    #[arg(long)]
    no_reg: bool,
    /// Memory-bank capacity per class and scale.
    #[arg(long)]
    capacity: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Meta-train encoder and head initialization.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Few-shot fine-tune the head on the held-out domain and score it.
    MetaTest {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to `<out>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Single shot count, replacing the configured list.
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Sweep one axis: lambda1, lambda2, capacity or finetune-depth.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        axis: String,
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Empirical convergence-rate check on a quadratic bilevel problem.
    Convlab {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> dumeta::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::read(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, flags: &TrainFlags) {
    if flags.mfl_only {
        cfg.train.mode = ModeName::MflOnly;
    }
    if flags.no_reg {
        cfg.reg.enabled = false;
    }
    if let Some(n) = flags.capacity {
        cfg.reg.capacity = n;
    }
}

fn run(cli: Cli) -> dumeta::Result<bool> {
    match cli.command {
        Command::GenData { common } => {
            let mut cfg = load(&common)?;
            if let Some(out) = common.out {
                cfg.data.root = out;
            }
            cfg.validate()?;
            let hash = experiment::cmd_gen_data(&cfg, &cfg.data.root)?;
            println!("dataset written to {} (sha256 {hash})", cfg.data.root.display());
        }
        Command::MetaTrain { common, flags } => {
            let mut cfg = load(&common)?;
            if let Some(out) = common.out {
                cfg.out = out;
            }
            apply(&mut cfg, &flags);
            cfg.validate()?;
            let s = experiment::cmd_meta_train(&cfg)?;
            println!(
                "{} iterations, checkpoint in {} (metrics sha256 {})",
                s.iterations,
                s.run_dir.join(CHECKPOINT_DIR).display(),
                s.metrics_hash
            );
        }
        Command::MetaTest { common, checkpoint, shots } => {
            let mut cfg = load(&common)?;
            if let Some(out) = common.out {
                cfg.out = out;
            }
            if let Some(n) = shots {
                cfg.test.shots = vec![n];
            }
            cfg.validate()?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out.join(CHECKPOINT_DIR));
            for r in experiment::cmd_meta_test(&cfg, &ckpt)? {
                println!("{} shot(s): mean Dice {:.4}\n{}", r.shots, r.report.mean_dice(), r.report.summary());
            }
        }
        Command::Ablate { common, flags, axis, shots } => {
            let mut cfg = load(&common)?;
            if let Some(out) = common.out {
                cfg.out = out;
            }
            apply(&mut cfg, &flags);
            if let Some(n) = shots {
                cfg.test.shots = vec![n];
            }
            cfg.validate()?;
            let axis = AblationAxis::parse(&axis)?;
            for leg in experiment::cmd_ablate(&cfg, axis)? {
                for r in &leg.reports {
                    println!("{}={} shots={} mean Dice {:.4}", axis.name(), leg.value, r.shots, r.report.mean_dice());
                }
            }
        }
        Command::Convlab { common } => {
            let mut cfg = load(&common)?;
            if let Some(out) = common.out {
                cfg.out = out;
            }
            if let Some(seed) = common.seed {
                cfg.convlab.seed = seed;
            }
            cfg.validate()?;
            let outcome = experiment::cmd_convlab(&cfg)?;
            print!("{}", outcome.render());
            return Ok(outcome.pass());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence(_) => ExitCode::from(3),
                e if e.is_validation() => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
