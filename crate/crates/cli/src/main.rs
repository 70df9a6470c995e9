//! `leafnet`: train, evaluate, sweep and explain image classifiers.

mod commands;
mod config;
mod error;
mod outputs;
mod plot;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Format, GradcamArgs, Overrides, SplitChoice};
use error::{CliResult, EXIT_INTERNAL};

#[derive(Parser)]
#[command(name = "leafnet", version, about = "Train, evaluate and explain CNN image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct OverrideArgs {
    /// Dataset root (one subdirectory per class); sets `data.root`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; sets `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sets `train.seed`, `model.seed` and `augment.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Sets `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides any configuration key, e.g. `--set optimizer.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Parallel workers for folds or sweep cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl OverrideArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            data: self.data.clone(),
            out: self.out.clone(),
            seed: self.seed,
            epochs: self.epochs,
            set: self.set.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML configuration.
    #[command(after_long_help = config::schema().help())]
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitChoice,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Write the result here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every combination of a grid of optimizers, learning rates and batch sizes.
    #[command(after_long_help = config::schema().help())]
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// TOML file with `optimizer`, `lr` and `batch_size` lists.
        #[arg(long)]
        grid: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Grad-CAM heat map of one image.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Target class index; defaults to the predicted class.
        #[arg(long)]
        class: Option<usize>,
        /// Layer to explain; defaults to the last convolution.
        #[arg(long)]
        layer: Option<String>,
        /// Heat map opacity in the overlay.
        #[arg(long, default_value_t = 0.4)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic image dataset as a class folder tree.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize a training run and redraw its curves.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, overrides } => {
            commands::cmd_train(&config, &overrides.overrides(), overrides.jobs)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            format,
            out,
        } => commands::cmd_eval(&checkpoint, &data, split, format, out.as_deref()),
        Command::Sweep {
            config,
            grid,
            overrides,
        } => commands::cmd_sweep(&config, &grid, &overrides.overrides(), overrides.jobs),
        Command::Gradcam {
            checkpoint,
            image,
            class,
            layer,
            alpha,
            out,
        } => commands::cmd_gradcam(&GradcamArgs {
            checkpoint: &checkpoint,
            image: &image,
            class,
            layer: layer.as_deref(),
            alpha,
            out: &out,
        }),
        Command::Synth {
            out,
            classes,
            per_class,
            size,
            seed,
        } => commands::cmd_synth(&out, classes, per_class, size, seed),
        Command::Report { run } => commands::cmd_report(&run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    std::panic::set_hook(Box::new(|info| {
        eprintln!("error[internal]: {info}");
    }));
    match catch_unwind(AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code as u8)
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL as u8),
    }
}
