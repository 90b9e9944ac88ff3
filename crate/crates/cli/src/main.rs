use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cdnet::experiments::{run_scenario, sweep, Method, RunOptions, ScenarioConfig, SweepAxis};
use clap::{Args, Parser, Subcommand};

/// Train and evaluate distributed controllers on networked multi-agent systems.
#[derive(Parser)]
#[command(name = "cdnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Print per-seed progress to stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario with its configured method.
    Run(Common),
    /// Run the scenario once per value of one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["lambda", "size", "topology"])]
        axis: String,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Solve the Riccati equation for the scenario's model and evaluate it.
    Oracle(Common),
}

fn load(common: &Common) -> Result<(ScenarioConfig, RunOptions)> {
    let mut cfg = ScenarioConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    let opts = RunOptions {
        verbose: common.verbose,
        ..RunOptions::default()
    };
    Ok((cfg, opts))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let (cfg, opts) = load(&common)?;
            let out = run_scenario(&cfg, &opts).context("scenario failed")?;
            let s = &out.summary;
            println!(
                "{} ({}): cost {:.4} ± {:.4}, eval {:.4} ± {:.4}, spectral radius {:.4}",
                s.scenario_id,
                s.method.name(),
                s.mean_cost,
                s.std_cost,
                s.mean_eval_cost,
                s.std_eval_cost,
                s.mean_spectral_radius
            );
            println!("wrote {} and {}", out.csv_path.display(), out.summary_path.display());
        }
        Command::Oracle(common) => {
            let (mut cfg, opts) = load(&common)?;
            cfg.method.name = Method::Opt;
            let out = run_scenario(&cfg, &opts).context("oracle failed")?;
            if let Some(o) = &out.summary.oracle {
                println!(
                    "DARE cost {:.6}, spectral radius {:.6}, residual {:.2e}",
                    o.dare_cost, o.spectral_radius, o.residual
                );
            }
            println!("in-network cost {:.6}", out.summary.mean_eval_cost);
            println!("wrote {}", out.summary_path.display());
        }
        Command::Sweep { common, axis, values } => {
            let (cfg, opts) = load(&common)?;
            let axis: SweepAxis = axis.parse()?;
            let s = sweep(&cfg, axis, &values, &opts).context("sweep failed")?;
            for p in &s.points {
                println!(
                    "{:>10}: cost {:.4} ± {:.4}, eval {:.4}, spectral radius {:.4}",
                    p.value, p.mean_cost, p.std_cost, p.mean_eval_cost, p.mean_spectral_radius
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
