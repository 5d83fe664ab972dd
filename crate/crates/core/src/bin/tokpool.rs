use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tokpool::config::RunConfig;
use tokpool::experiment::{cmd_evaluate, cmd_gen_data, cmd_inspect_attention, cmd_train, log_path_for};
use tokpool::metrics::format_report;
use tokpool::{Error, Result};

/// Class-token pooling experiments on a synthetic verification corpus.
#[derive(Debug, Parser)]
#[command(name = "tokpool", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the corpus seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model (or teacher–student pair) and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the run seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint path; the log goes to `<out>.log`.
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing checkpoint.
        #[arg(long)]
        force: bool,
    },
    /// Score trial lists and report EER, DCF08 and DCF10.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Trial files; defaults to every trials_*.txt in the corpus.
        #[arg(long)]
        trials: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export last-layer attention matrices for one utterance.
    InspectAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature file of the utterance.
        #[arg(long)]
        utterance: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            seed,
            out,
            force,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.corpus.seed = s;
            }
            let corpus = cmd_gen_data(&cfg, &out, force)?;
            println!(
                "wrote {} training and {} evaluation utterances to {}",
                corpus.train.len(),
                corpus.eval.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            seed,
            corpus,
            out,
            force,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.exists() && !force {
                return Err(Error::Usage(format!(
                    "{} exists (use --force to overwrite)",
                    out.display()
                )));
            }
            let logs = cmd_train(&cfg, &corpus, &out)?;
            if let Some(last) = logs.last() {
                println!(
                    "trained {} epochs, final loss {:.4}; checkpoint {}, log {}",
                    logs.len(),
                    last.loss_s.unwrap_or(last.loss_t),
                    out.display(),
                    log_path_for(&out).display()
                );
            }
        }
        Command::Evaluate {
            checkpoint,
            corpus,
            trials,
            out,
        } => {
            let rows = cmd_evaluate(&checkpoint, &corpus, &trials, &out)?;
            print!("{}", format_report(&rows));
        }
        Command::InspectAttention {
            checkpoint,
            utterance,
            out,
        } => {
            let export = cmd_inspect_attention(&checkpoint, &utterance, &out)?;
            println!("wrote {} head matrices to {}", export.heads.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
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
