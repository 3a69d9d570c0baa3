use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dgsa::cli::{self, Overrides, Split};
use dgsa::tensor::OpKind;
use dgsa::{Error, Result};

/// Differential gated self-attention laboratory.
///
/// Log verbosity is read from `DGSA_LOG` (e.g. `DGSA_LOG=info`).
#[derive(Parser, Debug)]
#[command(name = "dgsa", version)]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Run seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes metrics.csv and model.ckpt.
    Train,
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated noise levels, one report row each; bare
        /// `--sweep` uses the default grid for the data kind.
        #[arg(long, value_delimiter = ',', num_args = 0..=1)]
        sweep: Option<Vec<f64>>,
    },
    /// Finite-difference gradient check of a small model.
    Gradcheck {
        /// Tolerance (overrides `gradcheck.tol`).
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
    /// Export attention maps and rollout for one sample.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write a synthetic dataset with its oracle report.
    Synth,
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = Overrides {
        sets: cli
            .sets
            .iter()
            .map(|s| cli::parse_override(s))
            .collect::<Result<_>>()?,
        seed: cli.seed,
        out: cli.out,
    };
    let file = cli.config.as_deref();
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Train => {
            cli::cmd_train(&cli::load_config(file, &overrides)?, &mut stdout)?;
        }
        Command::Eval {
            checkpoint,
            split,
            sweep,
        } => {
            let split = Split::parse(&split)?;
            cli::cmd_eval(&checkpoint, file, &overrides, split, sweep.as_deref(), &mut stdout)?;
        }
        Command::Gradcheck { tol, corrupt_op } => {
            if let Some(t) = tol {
                overrides.sets.push(("gradcheck.tol".into(), t.to_string()));
            }
            let fault = corrupt_op
                .map(|n| OpKind::from_name(&n).ok_or_else(|| Error::Usage(format!("unknown op {n:?}"))))
                .transpose()?;
            cli::cmd_gradcheck(&cli::load_config(file, &overrides)?, fault, &mut stdout)?;
        }
        Command::Rollout {
            checkpoint,
            sample,
            split,
        } => {
            let split = Split::parse(&split)?;
            cli::cmd_rollout(&checkpoint, file, &overrides, split, sample, &mut stdout)?;
        }
        Command::Synth => {
            cli::cmd_synth(&cli::load_config(file, &overrides)?, &mut stdout)?;
        }
    }
    stdout.flush().map_err(|e| Error::Io {
        path: "<stdout>".into(),
        source: e,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("DGSA_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
