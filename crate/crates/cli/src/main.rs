use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rswin_cli::commands::{
    cmd_analyze, cmd_eval, cmd_infer, cmd_selftest, cmd_synth, cmd_train, AnalyzeArgs, DataSource, EvalArgs,
    SplitChoice, SynthArgs,
};
use rswin_cli::CliResult;
use rswin_core::data::Split;
use rswin_core::metrics::Average;
use rswin_core::selftest::Perturbation;

/// Train, evaluate and inspect RSwinV2 image classifiers.
#[derive(Parser)]
#[command(name = "rswin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file. Extra `--key value` pairs override it.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Replace an existing run of the same name.
        #[arg(long)]
        force: bool,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Metrics, confusion matrix and curves for one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = AverageArg::Macro)]
        average: AverageArg,
    },
    /// Print the predicted class and probabilities for each image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// PCA of penultimate features and a class-separability score.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 2)]
        components: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle checks.
    Selftest {
        /// Break one op on purpose to confirm failures are reported.
        #[arg(long, hide = true)]
        perturb: bool,
    },
    /// Write a synthetic class-per-folder colour dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct DataArgs {
    /// Class-per-folder image root. Without a manifest the split is redrawn
    /// from the checkpoint's seed.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Split manifest written by `train`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// train, val, test or all.
    #[arg(long, default_value_t = SplitChoice::One(Split::Test))]
    split: SplitChoice,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

impl DataArgs {
    fn source(&self) -> DataSource {
        DataSource { data_root: self.data_root.clone(), manifest: self.manifest.clone() }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AverageArg {
    Macro,
    Weighted,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, force, overrides } => {
            let dir = cmd_train(&config, &overrides, force)?;
            println!("run written to {}", dir.display());
        }
        Command::Eval { checkpoint, data, out, average } => {
            let average = match average {
                AverageArg::Macro => Average::Macro,
                AverageArg::Weighted => Average::Weighted,
            };
            let args = EvalArgs { checkpoint, source: data.source(), split: data.split, out, batch_size: data.batch_size, average };
            cmd_eval(&args)?;
        }
        Command::Infer { checkpoint, images } => {
            cmd_infer(&checkpoint, &images, &mut std::io::stdout().lock())?;
        }
        Command::Analyze { checkpoint, data, components, out } => {
            let args = AnalyzeArgs {
                checkpoint,
                source: data.source(),
                split: data.split,
                components,
                out,
                batch_size: data.batch_size,
            };
            cmd_analyze(&args)?;
        }
        Command::Selftest { perturb } => {
            cmd_selftest(if perturb { Perturbation::GeluBackward } else { Perturbation::None })?;
        }
        Command::Synth { out, classes, per_class, size, noise, seed } => {
            cmd_synth(&SynthArgs { out, classes, per_class, size, noise, seed })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(rswin_cli::error::EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
