use std::env;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use lesionuq_core::roc::{Level, Stratum};
use lesionuq_core::Measure;

mod commands;
mod config;
mod manifest;

use commands::{EvaluateArgs, Outcome, PredictArgs};
use manifest::RunManifest;

const DEFAULT_THETAS: &str = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";
const ALL_MEASURES: &str = "entropy,mi,samplevar,predvar";

/// MC dropout uncertainty and uncertainty-filtered lesion detection.
#[derive(Parser, Debug)]
#[command(name = "lesionuq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic phantom scenes.
    Generate {
        /// Flat TOML config (version = 1); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of scenes; more than one writes scene_### subdirectories.
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute voxel uncertainty maps (unc_<measure>.uvol) inside each scene.
    Uncertainty {
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = ALL_MEASURES)]
        measures: Vec<Measure>,
        /// Manifest directory; defaults to the scene when there is only one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract candidate lesions and match them against ground truth.
    Detect {
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        thetas: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep uncertainty and probability thresholds into roc.csv and roc.json.
    Evaluate {
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = ALL_MEASURES)]
        measures: Vec<Measure>,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.1,0.01")]
        etas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = DEFAULT_THETAS)]
        thetas: Vec<f64>,
        #[arg(long, default_value = "lesion")]
        level: Level,
        #[arg(long, value_delimiter = ',', default_value = "all,small,medium,large")]
        bins: Vec<Stratum>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy dropout network on a noisy/clean split image.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run MC dropout prediction with trained weights, writing a scene.
    PredictToy {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Label volume copied into the output as gt.uvol.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-bin lesion counts, size histogram and sample disagreement.
    Stats {
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Uncertainty { .. } => "uncertainty",
            Command::Detect { .. } => "detect",
            Command::Evaluate { .. } => "evaluate",
            Command::TrainToy { .. } => "train-toy",
            Command::PredictToy { .. } => "predict-toy",
            Command::Stats { .. } => "stats",
        }
    }
}

fn manifest_dir(out: Option<&Path>, scenes: &[PathBuf]) -> Result<PathBuf> {
    match (out, scenes) {
        (Some(dir), _) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            Ok(dir.to_path_buf())
        }
        (None, [one]) => Ok(one.clone()),
        (None, _) => bail!("--out is required with more than one scene"),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = env::var("LESIONUQ_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .with_context(|| format!("LESIONUQ_THREADS={value} is not a thread count"))?;
    if n == 0 {
        bail!("LESIONUQ_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn dispatch(command: &Command) -> Result<(PathBuf, Outcome)> {
    Ok(match command {
        Command::Generate { config, seed, scenes, out } => {
            (out.clone(), commands::generate(config.as_deref(), *seed, *scenes, out)?)
        }
        Command::Uncertainty { scenes, measures, out } => {
            let dir = manifest_dir(out.as_deref(), scenes)?;
            (dir, commands::uncertainty(scenes, measures)?)
        }
        Command::Detect { scenes, thetas, out } => {
            let dir = manifest_dir(out.as_deref(), scenes)?;
            (dir, commands::detect(scenes, thetas)?)
        }
        Command::Evaluate { scenes, measures, etas, thetas, level, bins, out } => {
            let args = EvaluateArgs { scenes, measures, etas, thetas, level: *level, bins, out };
            (out.clone(), commands::evaluate(&args)?)
        }
        Command::TrainToy { config, seed, out } => (out.clone(), commands::train_toy(config.as_deref(), *seed, out)?),
        Command::PredictToy { weights, image, samples, seed, gt, out } => {
            let args = PredictArgs { weights, image, samples: *samples, seed: *seed, gt: gt.as_deref(), out };
            (out.clone(), commands::predict_toy(&args)?)
        }
        Command::Stats { scenes, out } => (out.clone(), commands::stats(scenes, out)?),
    })
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    configure_threads()?;
    let start = Instant::now();
    let (dir, outcome) = dispatch(&cli.command)?;
    let show = |paths: Vec<PathBuf>| paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>();
    let written = outcome.outputs.len();
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        args: env::args().skip(1).collect(),
        config: outcome.config,
        seeds: outcome.seeds,
        inputs: show(outcome.inputs),
        outputs: show(outcome.outputs),
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    let path = manifest.write(&dir)?;
    println!("{}: wrote {written} files, manifest {}", manifest.command, path.display());
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
