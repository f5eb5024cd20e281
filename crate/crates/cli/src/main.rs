use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "vgssl", version, about = "Pair-based self-supervised geo-localization at desk scale")]
struct Cli {
    /// JSON config for the command. Unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic geo-referenced dataset.
    Synth,
    /// Train one strategy over several seeds.
    Train {
        /// Continue a single run from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Recall@N of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated N values.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
    },
    /// Finite-difference gradient check and feature-flag audit.
    Gradcheck {
        /// Comma-separated method names; an empty string checks nothing.
        #[arg(long)]
        methods: Option<String>,
        /// Also audit which features carry gradient.
        #[arg(long)]
        audit: bool,
        /// Negate this method's analytic gradient (fault injection).
        #[arg(long, hide = true)]
        flip_sign_for: Option<String>,
    },
    /// Measure data-preparation cost over a size grid.
    BenchMining,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = vgssl::trainer::thread_cap() {
        // ignore a second initialisation; the first pool already has the cap
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let g = commands::Global { config: cli.config, out: cli.out, seed: cli.seed };
    let res = match cli.command {
        Command::Synth => commands::synth(&g),
        Command::Train { resume } => commands::train(&g, resume),
        Command::Eval { checkpoint, dataset, n } => commands::eval(&g, checkpoint, dataset, n),
        Command::Gradcheck { methods, audit, flip_sign_for } => commands::gradcheck(&g, methods, audit, flip_sign_for),
        Command::BenchMining => commands::bench_mining(&g),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
