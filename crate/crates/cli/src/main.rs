//! `cna` — neighborhood-alignment experiments from the command line:
//! generate datasets, run embed/distill/update configs, plot 2-D
//! embeddings, and sweep one hyperparameter axis at a time.

mod config;
mod pipeline;
mod plot;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "cna",
    version,
    about = "Neighborhood-alignment experiments: generate, run, plot, sweep"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (s-curve, swiss-roll, sphere, blobs) as CSV.
    Generate {
        /// Dataset name; `-` and `_` are interchangeable.
        name: String,
        /// Number of points.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Gaussian coordinate noise (s-curve and swiss-roll only).
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Cluster count (blobs only).
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Ambient dimension (blobs only).
        #[arg(long, default_value_t = 20)]
        dim: usize,
        /// Within-cluster standard deviation (blobs only).
        #[arg(long, default_value_t = 1.0)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute one experiment config and write its artifacts.
    Run {
        /// Path to a sectioned key=value config file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Render a 2-D embedding CSV as a deterministic SVG scatter.
    Plot {
        /// Embedding CSV (written by `run` or `generate`).
        #[arg(long)]
        embedding: PathBuf,
        /// Color source: auto, color, label, or none.
        #[arg(long, default_value = "auto")]
        color_column: String,
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run a config across one axis of values into one aggregated CSV.
    Sweep {
        /// Path to the base config file.
        #[arg(long)]
        config: PathBuf,
        /// Axis: batch_size, tau, k, or mlp_heads.
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis.
        #[arg(long)]
        values: String,
        /// Aggregated CSV path (default: <output.dir>/sweep.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Size the worker pool from NL_THREADS (default 1, which keeps every
/// command bit-deterministic and is also safe at any higher value — the
/// parallel kernels are order-stable).
fn init_thread_pool() -> anyhow::Result<()> {
    let threads = match std::env::var("NL_THREADS") {
        Ok(v) => {
            let parsed = v
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|&t| t >= 1);
            match parsed {
                Some(t) => t,
                None => bail!("NL_THREADS must be a positive integer, got '{v}'"),
            }
        }
        Err(std::env::VarError::NotPresent) => 1,
        Err(e) => return Err(e).context("reading NL_THREADS"),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("initializing the worker pool")
}

fn run() -> anyhow::Result<()> {
    init_thread_pool()?;
    let cli = Cli::parse();
    match cli.command {
        Command::Generate {
            name,
            n,
            noise,
            classes,
            dim,
            spread,
            seed,
            out,
        } => pipeline::cmd_generate(&name, n, noise, classes, dim, spread, seed, &out),
        Command::Run { config } => pipeline::cmd_run(&config),
        Command::Plot {
            embedding,
            color_column,
            out,
        } => pipeline::cmd_plot(&embedding, &color_column, &out),
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => pipeline::cmd_sweep(&config, &axis, &values, out.as_deref()),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
