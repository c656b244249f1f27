use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pdisco_core::commands::{cmd_eval, cmd_generate, cmd_train, GenerateArgs};

/// Weakly-supervised part discovery: dataset generation, training, and
/// part-quality evaluation.
#[derive(Parser)]
#[command(name = "pdisco", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a PartGlyphs dataset directory.
    Generate {
        /// RNG seed for images, annotations and the split.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of images.
        #[arg(long)]
        n: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Image edge length.
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        /// Ground-truth parts per object.
        #[arg(long, default_value_t = 4)]
        parts: usize,
        /// Probability of hiding each part (visibility annotated).
        #[arg(long, default_value_t = 0.0)]
        occlude_prob: f64,
        /// Fraction of images in the train split.
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a part-discovery model on a generated dataset.
    Train {
        /// key = value experiment config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory from `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint, log and resolved config.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: metrics JSON, centroids and part maps.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (the test split is scored).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for metrics and exports.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> pdisco_core::Result<()> {
    match cli.command {
        Command::Generate {
            seed,
            n,
            out,
            image_size,
            parts,
            occlude_prob,
            train_fraction,
            force,
        } => cmd_generate(&GenerateArgs {
            seed,
            n,
            out,
            image_size,
            parts,
            occlude_prob,
            train_fraction,
            force,
        }),
        Command::Train { config, data, out } => {
            let logs = cmd_train(config.as_deref(), &data, &out)?;
            if let Some(last) = logs.last() {
                eprintln!(
                    "trained {} epochs; final accuracy {:.2}% nmi {:.4} ari {:.4}",
                    logs.len(),
                    last.eval.accuracy_pct,
                    last.eval.nmi,
                    last.eval.ari
                );
            }
            Ok(())
        }
        Command::Eval { checkpoint, data, out } => {
            let report = cmd_eval(&checkpoint, &data, &out)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("metrics json"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help / --version print on stdout and exit cleanly; real
            // usage errors go to stderr with exit code 1.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
