use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use threadweave::commands::{self, GradCheckOptions};
use threadweave::config::{Overrides, RunConfig};
use threadweave::{Error, Result};
use threadweave_core::corpus::Split;
use threadweave_core::reparam::Strategy;

#[derive(Parser)]
#[command(name = "threadweave", version, about = "Multidomain sequence labeling over conversation threads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One of tied, disjoint, add, addmul, affine, malopa, feda.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Transfer setting, e.g. E, E+I, E+I+R.
    #[arg(long)]
    domains: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        RunConfig::load(
            self.config.as_deref(),
            &Overrides {
                strategy: self.strategy,
                domains: self.domains.clone(),
                seed: self.seed,
            },
        )
    }
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: threadweave_core::reparam::UnknownStrategy| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}; expected train, valid or test")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes the artifact and the epoch log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Task registry JSON; defaults to the standard E/I/R tasks.
        #[arg(long)]
        tasks: Option<PathBuf>,
    },
    /// MACE and accuracy per task on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of analytic gradients on a micro model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Check every strategy instead of the configured one.
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 20)]
        vocab: usize,
        #[arg(long, default_value_t = 4)]
        dims: usize,
        #[arg(long, default_value_t = 2)]
        task_dims: usize,
    },
    /// Per-message features from a frozen model.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, default_value = "E")]
        domain: String,
        /// Label to attach: a task id or `act`.
        #[arg(long, default_value = "act")]
        label_key: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nested cross-validation over feature files.
    Downstream {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        features: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Cohen's kappa between two label files.
    Agreement {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { common } => {
            commands::synth(&common.run_config()?, &common.out)?;
        }
        Command::Train { common, corpus, tasks } => {
            commands::train(&common.run_config()?, &corpus, tasks.as_deref(), &common.out)?;
        }
        Command::Eval { model, corpus, tasks, split, out } => {
            commands::eval(&model, &corpus, tasks.as_deref(), split, &out)?;
        }
        Command::Gradcheck { common, all, vocab, dims, task_dims } => {
            let cfg = common.run_config()?;
            let strategies = if all { Strategy::ALL.to_vec() } else { vec![cfg.train.strategy] };
            let opts = GradCheckOptions {
                vocab,
                dim: dims,
                task_dim: task_dims,
                ..GradCheckOptions::default()
            };
            commands::gradcheck(&strategies, &opts, cfg.train.seed, &common.out)?;
        }
        Command::Embed { model, corpus, tasks, domain, label_key, out } => {
            commands::embed(&model, &corpus, tasks.as_deref(), &domain, &label_key, &out)?;
        }
        Command::Downstream { common, features, jobs } => {
            if jobs == 0 {
                return Err(Error::Usage("--jobs must be at least 1".into()));
            }
            commands::downstream(&common.run_config()?, &features, jobs, &common.out)?;
        }
        Command::Agreement { a, b, out } => {
            commands::agreement(&a, &b, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("THREADWEAVE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
