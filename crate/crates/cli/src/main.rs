use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use graybox_cli::config::RunConfig;
use graybox_cli::manifest::{execute, replay};
use graybox_cli::stages::Stage;
use graybox_cli::CliError;
use graybox_core::models::ModelKind;

#[derive(Parser)]
#[command(name = "graybox", version, about = "Graybox characterization and calibration of a single-qubit gate")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set dataset.samples=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Sgm,
    Pgm,
}

impl From<Model> for ModelKind {
    fn from(m: Model) -> Self {
        match m {
            Model::Sgm => ModelKind::Sgm,
            Model::Pgm => ModelKind::Pgm,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the noisy device and write the training dataset.
    GenData,
    /// Train a graybox model on the dataset.
    Train { model: Model },
    /// Compare model and device AGF distributions over a grid of angles.
    Sweep,
    /// Calibrate the rotation angle against the ideal √X gate.
    Calibrate { model: Model },
    /// Evaluate both calibrated angles on the device and both models.
    Eval,
    /// Check the finite-shot estimator against its sampling laws.
    VerifyEstimator,
    /// Show the resolved configuration.
    ShowConfig,
    /// Re-run a stage from its manifest and compare artifact digests.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Print a line, ignoring a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    if let Command::Replay { manifest, out } = &cli.command {
        let report = replay(manifest, out)?;
        for path in &report.matched {
            say!("match     {path}");
        }
        for path in &report.mismatched {
            say!("MISMATCH  {path}");
        }
        return if report.is_match() {
            Ok(())
        } else {
            Err(CliError::Validation(format!("{} artifact(s) differ", report.mismatched.len())))
        };
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let stage = match cli.command {
        Command::GenData => Stage::GenData,
        Command::Train { model } => Stage::Train(model.into()),
        Command::Sweep => Stage::Sweep,
        Command::Calibrate { model } => Stage::Calibrate(model.into()),
        Command::Eval => Stage::Eval,
        Command::VerifyEstimator => Stage::VerifyEstimator,
        Command::ShowConfig => {
            say!("{}", serde_json::to_string_pretty(&cfg).map_err(graybox_core::Error::from)?);
            return Ok(());
        }
        Command::Replay { .. } => unreachable!(),
    };
    let run = execute(&cfg, stage)?;
    say!("{}", serde_json::to_string_pretty(&run.manifest.summary).map_err(graybox_core::Error::from)?);
    for a in &run.manifest.artifacts {
        say!("wrote {}", cfg.output_dir.join(&a.path).display());
    }
    say!("manifest {}", run.manifest_path.display());
    if run.validation_failed {
        return Err(CliError::Validation(format!("{} checks failed", stage.name())));
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
