use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deepperson_cli::commands;
use deepperson_cli::config::Settings;
use deepperson_cli::CliError;

#[derive(Parser)]
#[command(name = "deepperson", version, about = "Person re-identification tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// INI config file with [section] blocks of key = value lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set trainer.epochs=30`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Random seed (run.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (run.out).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl Common {
    fn settings(&self) -> Result<Settings, CliError> {
        let mut settings = Settings::resolve(self.config.as_deref(), &self.sets)?;
        if let Some(seed) = self.seed {
            settings.set("run.seed", seed.to_string());
        }
        if let Some(out) = &self.out {
            settings.set("run.out", out.display().to_string());
        }
        Ok(settings)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and metrics.log to the output directory.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on the query/gallery split of the dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Write one descriptor per image listed in a file.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Text file with one image path per line.
        #[arg(long, value_name = "PATH")]
        list: PathBuf,
    },
    /// Draw the feature-map energy over images.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long = "image", value_name = "PATH", required = true)]
        images: Vec<PathBuf>,
    },
    /// Render a synthetic dataset in the Market-1501 layout.
    SynthGen {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common } => commands::train(&common.settings()?),
        Command::Eval { common, checkpoint } => commands::eval(&common.settings()?, &checkpoint),
        Command::Extract {
            common,
            checkpoint,
            list,
        } => commands::extract(&common.settings()?, &checkpoint, &list),
        Command::Heatmap {
            common,
            checkpoint,
            images,
        } => commands::heatmap(&common.settings()?, &checkpoint, &images),
        Command::SynthGen { common } => commands::synth_gen(&common.settings()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
