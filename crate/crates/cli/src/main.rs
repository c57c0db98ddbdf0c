use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gazeid::classify::Classifier;
use gazeid::simulate::ModelKind;

mod commands;
mod config;

use config::{parse_grid, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "gazeid", version, about = "Viewer identification from eye-gaze scanpaths")]
struct Cli {
    /// JSON run configuration; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    model: Option<ModelKind>,
    #[arg(long, global = true)]
    classifier: Option<Classifier>,
    /// SceneWalk grid, e.g. 64x64.
    #[arg(long, global = true, value_parser = parse_grid)]
    grid: Option<[usize; 2]>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect saccades in raw recordings and extract per-saccade features.
    Detect { raw_dir: PathBuf },
    /// Fit the pooled generative model to a dataset.
    Fit { dataset: PathBuf },
    /// Fisher feature maps of a dataset under a fitted model.
    Scores {
        dataset: PathBuf,
        #[arg(long)]
        model_file: PathBuf,
        /// Information matrix from an earlier `scores` run on training data.
        #[arg(long)]
        info: Option<PathBuf>,
    },
    /// Train the linear classifier on a feature table.
    Train { features: PathBuf },
    /// Identify subjects from a feature table.
    Identify {
        features: PathBuf,
        #[arg(long)]
        classifier_file: PathBuf,
        /// Test images per identification.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Generate a synthetic cohort from a spec file.
    Simulate { spec: PathBuf },
    /// Run the split / cross-validation protocol on a dataset.
    Eval { dataset: PathBuf },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        anyhow::ensure!(n >= 1, "--threads must be at least 1");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let k = match &cli.command {
        Command::Identify { k, .. } => *k,
        _ => None,
    };
    let cfg = RunConfig::load(
        cli.config.as_deref(),
        Overrides {
            seed: cli.seed,
            model: cli.model,
            classifier: cli.classifier,
            grid: cli.grid,
            k,
        },
    )?;
    let out = cli.out.ok_or_else(|| anyhow::anyhow!("--out is required"))?;
    std::fs::create_dir_all(&out).map_err(|e| anyhow::anyhow!("{}: {e}", out.display()))?;
    match &cli.command {
        Command::Detect { raw_dir } => commands::detect(raw_dir, &out, &cfg),
        Command::Fit { dataset } => commands::fit(dataset, &out, &cfg),
        Command::Scores { dataset, model_file, info } => commands::scores(dataset, model_file, info.as_deref(), &out, &cfg),
        Command::Train { features } => commands::train(features, &out, &cfg),
        Command::Identify { features, classifier_file, .. } => commands::identify(features, classifier_file, &out, &cfg),
        Command::Simulate { spec } => commands::simulate(spec, &out, &cfg),
        Command::Eval { dataset } => commands::eval(dataset, &out, &cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
