use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sae_steering::config::RunConfig;
use sae_steering::pipeline::{output_root, run_pipeline, run_stage, RunDir, Stage, CONFIG_FILE, OUTPUT_ROOT_ENV};

#[derive(Parser)]
#[command(name = "sae-steer", version, about = "Feature discovery and steering on a planted toy model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run directory. Defaults to `<output root>/run`.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Output root used when `--out` is absent.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    root: Option<PathBuf>,
    /// TOML config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set sae.steps=5000`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Run seed (same as `--set seed=N`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the toy model and write its tensors.
    Build(Common),
    /// Sample the labelled activation corpus.
    Sample(Common),
    /// Train the sparse autoencoder.
    TrainSae(Common),
    /// Extract per-strategy keywords from the corpus.
    Keywords(Common),
    /// Stage 1: logit-lens recall of candidate features.
    Recall(Common),
    /// Stage 2: rank candidates by steering success.
    Rank(Common),
    /// Keep the best-ranked features per strategy.
    Select(Common),
    /// Train the contrastive router on the selected pool.
    TrainRouter(Common),
    /// Evaluate budget forcing, router steering and oracle steering.
    Correct(Common),
    /// Run every stage in order.
    Run {
        #[command(flatten)]
        common: Common,
        /// Recompute stages whose outputs already exist.
        #[arg(long)]
        no_resume: bool,
    },
    /// Write report.json and summary.csv from the stage outputs.
    Report(Common),
}

fn open(common: &Common) -> Result<RunDir> {
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| output_root(common.root.as_deref()).join("run"));
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let explicit = common.config.is_some() || !overrides.is_empty();
    let config = if explicit {
        let text = match &common.config {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let cfg = RunConfig::from_toml_with_overrides(&text, &overrides)?;
        Some(cfg)
    } else if dir.join(CONFIG_FILE).exists() {
        None
    } else {
        Some(RunConfig::default())
    };
    let dir = match config.as_ref().and_then(|c| c.output_dir.clone()) {
        Some(d) if common.out.is_none() => d,
        _ => dir,
    };
    Ok(RunDir::open(&dir, config.as_ref())?)
}

fn stage(common: &Common, stage: Stage) -> Result<()> {
    let dir = open(common)?;
    run_stage(&dir, stage)?;
    println!("{}: done ({})", stage.name(), dir.root().display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Build(c) => stage(c, Stage::Build),
        Command::Sample(c) => stage(c, Stage::Sample),
        Command::TrainSae(c) => stage(c, Stage::TrainSae),
        Command::Keywords(c) => stage(c, Stage::Keywords),
        Command::Recall(c) => stage(c, Stage::Recall),
        Command::Rank(c) => stage(c, Stage::Rank),
        Command::Select(c) => stage(c, Stage::Select),
        Command::TrainRouter(c) => stage(c, Stage::TrainRouter),
        Command::Correct(c) => stage(c, Stage::Correct),
        Command::Report(c) => stage(c, Stage::Report),
        Command::Run { common, no_resume } => open(common).and_then(|dir| {
            let report = run_pipeline(&dir, !no_resume)?;
            println!("seed {}  recall fraction {:.4}", report.seed, report.recall.recall_fraction);
            for t in &report.effectiveness {
                let best = t.rows.first().map_or(0.0, |r| r.success_rate);
                println!("  {:<32} best success {:.3}", t.name, best);
            }
            println!("routing accuracy {:.3}", report.routing.accuracy);
            for (arm, rate) in &report.correction.rates {
                println!("  {arm:<16} {rate:.3}");
            }
            println!("report: {}", dir.root().join("report.json").display());
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
