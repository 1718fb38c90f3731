//! `attnlipkit` command-line driver. Every subcommand writes its artifacts and a
//! `resolved_config.toml` into the output directory.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{DatasetKind, ExperimentConfig, NormChoice};

#[derive(Parser, Debug)]
#[command(name = "attnlipkit", version, about = "Lipschitz-normalized attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare empirical Lipschitz estimates of attention variants with their bounds.
    VerifyBounds(Common),
    /// Entropy-calibrate feature-similarity attention on a graph.
    Calibrate(Common),
    /// Write a TREES dataset as a `.graph.txt` file.
    GenTrees(Common),
    /// Train a graph attention model on each seed.
    Train(Common),
    /// Record per-layer attention gradient norms during training.
    GradientFlow(Common),
    /// Train plain and LipschitzNorm GAT on TREES at several depths.
    TreesExperiment(Common),
}

/// Flags override config-file values, which override subcommand defaults.
#[derive(Args, Debug, Clone)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset seed and the single training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Train on `n` consecutive seeds starting at the training seed.
    #[arg(long, value_name = "N")]
    num_seeds: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, value_enum)]
    normalization: Option<NormChoice>,
    #[arg(long, value_name = "T")]
    target_eta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Run unnormalized and LipschitzNorm twins from the same initial weights.
    #[arg(long)]
    compare: bool,
}

fn defaults(cmd: &Command) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    match cmd {
        Command::VerifyBounds(_) | Command::Calibrate(_) | Command::Train(_) => {}
        Command::GenTrees(_) => c.dataset.kind = DatasetKind::Trees,
        Command::GradientFlow(_) => {
            c.model.layers = 10;
            c.train.seeds = (0..5).collect();
        }
        Command::TreesExperiment(_) => {
            c.dataset.kind = DatasetKind::Trees;
            c.model.hidden = 32;
            c.train.seeds = (0..5).collect();
        }
    }
    c
}

fn resolve(cmd: &Command, flags: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(defaults(cmd), flags.config.as_deref())?;
    if let Some(seed) = flags.seed {
        c.dataset.seed = seed;
        c.train.seeds = vec![seed];
    }
    if let Some(n) = flags.num_seeds {
        let start = c.train.seeds.first().copied().unwrap_or(0);
        c.train.seeds = (start..start + n).collect();
    }
    if let Some(out) = &flags.out {
        c.output.dir = out.clone();
    }
    if let Some(l) = flags.layers {
        c.model.layers = l;
    }
    if let Some(n) = flags.normalization {
        c.model.normalization = n;
    }
    if let Some(t) = flags.target_eta {
        c.model.target_eta = t;
    }
    if let Some(e) = flags.epochs {
        c.train.epochs = e;
    }
    c.validate()?;
    Ok(c)
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("ATTNLIPKIT_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("ATTNLIPKIT_THREADS must be a positive integer"))?;
        if n == 0 {
            anyhow::bail!("ATTNLIPKIT_THREADS must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let flags = match &cli.command {
        Command::VerifyBounds(f)
        | Command::Calibrate(f)
        | Command::GenTrees(f)
        | Command::Train(f)
        | Command::GradientFlow(f)
        | Command::TreesExperiment(f) => f.clone(),
    };
    let cfg = match init_threads().and_then(|()| resolve(&cli.command, &flags)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::VerifyBounds(_) => commands::verify_bounds(&cfg, flags.samples),
        Command::Calibrate(_) => commands::calibrate(&cfg),
        Command::GenTrees(_) => commands::gen_trees(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::GradientFlow(_) => commands::gradient_flow(&cfg, flags.compare),
        Command::TreesExperiment(_) => commands::trees_experiment(&cfg),
    };
    match result {
        Ok(commands::Outcome::Passed) => ExitCode::SUCCESS,
        Ok(commands::Outcome::CheckFailed(why)) => {
            eprintln!("check failed: {why}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
