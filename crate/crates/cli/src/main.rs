use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ncl_cli::{cmd_eval, cmd_gen, cmd_plotdata, cmd_train, CliError, RunConfigFile};

#[derive(Parser)]
#[command(
    name = "ncl",
    version,
    about = "Noisy-correspondence cross-modal retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with injected caption noise.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides data.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset file to write (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network pair and write metrics, summary and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset file produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the checkpoints of a run directory on a dataset's test split.
    Eval {
        /// Run directory holding net_a.ckpt and net_b.ckpt.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert metrics.csv into long (epoch, series, value) format.
    Plotdata {
        #[arg(long)]
        metrics: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfigFile, CliError> {
    RunConfigFile::load(path.map(PathBuf::as_path))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { config, seed, out } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            let meta = cmd_gen(&cfg, &out)?;
            println!("realized noise ratio: {:.4}", meta.realized_noise_ratio);
        }
        Command::Train {
            config,
            seed,
            data,
            out,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let summary = cmd_train(&cfg, &data, &out)?;
            if let (Some(epoch), Some(test)) = (summary.best_epoch, summary.test) {
                println!("best epoch {epoch}, test rsum {:.2}", test.rsum);
            }
        }
        Command::Eval { run, data, out } => {
            let report = cmd_eval(&run, &data)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            if let Some(path) = out {
                std::fs::write(&path, format!("{text}\n")).map_err(|source| CliError::Io {
                    context: format!("writing {}", path.display()),
                    source,
                })?;
            }
            writeln!(io::stdout().lock(), "{text}").map_err(|source| CliError::Io {
                context: "writing stdout".into(),
                source,
            })?;
        }
        Command::Plotdata { metrics, out } => {
            cmd_plotdata(&metrics, out.as_ref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
