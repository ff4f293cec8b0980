use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use localnorm::experiment::{
    cmd_eval, cmd_histogram, cmd_sweep_groups, cmd_train, cmd_transfer, ExperimentConfig, OutputDir, SweepSection,
    TransferSection,
};

/// LocalNorm experiments: training, noise sweeps, group sweeps, histograms, transfer.
#[derive(Parser, Debug)]
#[command(name = "localnorm", version)]
struct Cli {
    /// TOML experiment config; the built-in MNIST recipe is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its checkpoint, metrics and scaling trace.
    Train,
    /// Evaluate a checkpoint over the noise sweep.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train one LocalNorm model per group count and evaluate each.
    SweepGroups {
        /// Comma-separated K values (overrides `sweep.groups`).
        #[arg(long, value_delimiter = ',')]
        groups: Option<Vec<usize>>,
    },
    /// Per-channel histograms of noise-degraded images.
    Histogram {
        /// IDX image file; defaults to the configured test set.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Replace the BatchNorm layers of a checkpoint with LocalNorm.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long)]
        fine_tune_epochs: Option<usize>,
    },
}

fn run(cli: Cli) -> localnorm::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk_mnist("data/mnist"),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    let name = match &cli.command {
        Command::Train => "train",
        Command::Eval { .. } => "eval",
        Command::SweepGroups { .. } => "sweep-groups",
        Command::Histogram { .. } => "histogram",
        Command::Transfer { .. } => "transfer",
    };
    match &cli.command {
        Command::SweepGroups { groups: Some(g) } => cfg.sweep = Some(SweepSection { groups: g.clone() }),
        Command::Transfer { groups, fine_tune_epochs, .. } if groups.is_some() || fine_tune_epochs.is_some() => {
            let base = cfg.transfer.clone().unwrap_or(TransferSection { groups: 10, fine_tune_epochs: 0 });
            cfg.transfer = Some(TransferSection {
                groups: groups.unwrap_or(base.groups),
                fine_tune_epochs: fine_tune_epochs.unwrap_or(base.fine_tune_epochs),
            });
        }
        _ => {}
    }
    let out_dir = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("runs").join(name));
    cfg.out = Some(out_dir.clone());
    if cfg.threads == 0 {
        return Err(localnorm::Error::Config("threads must be positive".into()));
    }
    // A second global pool cannot be installed; the first one wins.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    let out = OutputDir::create(&out_dir, cli.force, &cfg)?;
    match cli.command {
        Command::Train => {
            let r = cmd_train(&cfg, &out)?;
            if let Some(m) = r.log.metrics.last() {
                eprintln!("epoch {}: loss {:.4}, test accuracy {:?}", m.epoch, m.train_loss, m.test_accuracy);
            }
        }
        Command::Eval { checkpoint } => {
            for r in cmd_eval(&cfg, &checkpoint, &out)? {
                eprintln!("{} {} {}: {:.4}", r.mode, r.family, r.sigma, r.accuracy);
            }
        }
        Command::SweepGroups { .. } => {
            cmd_sweep_groups(&cfg, &out)?;
        }
        Command::Histogram { image } => cmd_histogram(&cfg, image.as_deref(), &out)?,
        Command::Transfer { checkpoint, .. } => {
            let t = cmd_transfer(&cfg, &checkpoint, &out)?;
            eprintln!("accuracy before {:.4}, after transfer {:.4}, fine-tuned {:?}", t.before, t.after_transfer, t.after_fine_tune);
        }
    }
    eprintln!("wrote {}", out.root().display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
