use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hsadmm::consensus::Algorithm;
use hsadmm::harness::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "hsadmm", version, about = "Hierarchical structured consensus ADMM on a simulated cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// dense, topk, flat or hsadmm
        #[arg(long)]
        baseline: Option<Algorithm>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the summary and per-iteration volume of a finished run.
    Summarize {
        #[arg(long)]
        run: PathBuf,
    },
    /// Ratio table of two run directories (b relative to a).
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Check a config file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> hsadmm::Result<()> {
    match cli.command {
        Command::Run { config, seed, baseline, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(b) = baseline {
                cfg.baseline = b;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let summary = harness::run_experiment(&cfg)?;
            println!("{summary}");
            println!("artifacts in {}", cfg.out_dir.display());
        }
        Command::Summarize { run } => {
            let (summary, volume) = harness::summarize_run(&run)?;
            println!("{summary}\n");
            println!("{volume}");
        }
        Command::Compare { a, b } => {
            println!("{}", harness::compare(&a, &b)?);
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            let layers = cfg.workload.layers();
            let constraints = cfg.resolve_constraints(&layers)?;
            println!(
                "ok: {} on {}x{} ranks, {} layers",
                cfg.baseline,
                cfg.topology.nodes,
                cfg.topology.accels_per_node,
                layers.len()
            );
            for (l, cs) in layers.iter().zip(constraints) {
                if !cs.is_empty() {
                    println!("  {} {:?}", l.name, cs);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
