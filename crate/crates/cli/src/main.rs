use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use treecam::pipeline::{Pipeline, PipelineConfig, Seeds, Stage, StageOutcome};

#[derive(Parser)]
#[command(
    name = "treecam",
    version,
    about = "Tree species classification and part attribution on synthetic point clouds"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; replaces every stage seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root holding one directory per stage.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Projection canvas side in pixels.
    #[arg(long, global = true)]
    canvas: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic point-cloud dataset.
    Synth,
    /// Render side-view projections.
    Project,
    /// Train one classifier per cross-validation fold.
    Train,
    /// Score the test trees with every fold model.
    Eval,
    /// Compute saliency maps for selected test views.
    Explain,
    /// Segment the explained views into tree parts.
    Partition,
    /// Count salient pixels per tree part.
    Attribute,
    /// Aggregate ratios and run the statistical tests.
    Analyze,
    /// Collect tables, overlays and the run summary.
    Report,
    /// Run every stage.
    Run,
    /// Print the effective configuration.
    Config,
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::Synth => Stage::Synth,
            Command::Project => Stage::Project,
            Command::Train => Stage::Train,
            Command::Eval => Stage::Eval,
            Command::Explain => Stage::Explain,
            Command::Partition => Stage::Partition,
            Command::Attribute => Stage::Attribute,
            Command::Analyze => Stage::Analyze,
            Command::Report => Stage::Report,
            Command::Run | Command::Config => return None,
        })
    }
}

fn load_config(args: &GlobalArgs) -> Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seeds = Seeds::derive(seed);
    }
    if let Some(canvas) = args.canvas {
        cfg.canvas = canvas;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_outcomes(outcomes: &[StageOutcome]) {
    for o in outcomes {
        let status = if o.cached {
            "cached".to_string()
        } else {
            format!("{:.1} s", o.seconds)
        };
        println!("{:<10} {:<10} {}", o.stage.name(), status, o.dir.display());
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load_config(&cli.global).context("loading configuration")?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    info!("config hash {}", cfg.hash());
    let pipeline = Pipeline::new(cfg, &cli.global.out)?;
    let outcomes = match cli.command.stage() {
        Some(stage) => pipeline.run_through(stage)?,
        None => pipeline.run_all()?,
    };
    print_outcomes(&outcomes);
    Ok(())
}
