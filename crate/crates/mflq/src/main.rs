use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mflq::bounds::{bounds_table, write_bounds, PolicySource};
use mflq::config::{load_config, ExperimentConfig};
use mflq::experiment::{run_experiment, sweep};
use mflq::verify::{run_suite, write_report, Suite, VerifyOptions};
use mflq::HarnessError;

#[derive(Parser)]
#[command(name = "mflq", version, about = "Model-free adaptive LQ control experiments")]
struct Cli {
    /// Added to every configured seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (overrides the config's `output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config and write results.csv and summary.csv.
    Run { config: PathBuf },
    /// Rerun a config over a grid of horizons and fit the regret slope.
    Sweep {
        config: PathBuf,
        /// Ascending horizons, comma separated.
        #[arg(long = "T", value_delimiter = ',', required = true)]
        horizons: Vec<usize>,
    },
    /// Run a Monte-Carlo verification suite.
    Verify {
        /// moments, small-ball, mixing, blocks, gram, state-bounds or all.
        suite: Suite,
        /// Flip every verdict.
        #[arg(long)]
        inject_failure: bool,
    },
    /// Print mixing, block and boundedness constants for a closed loop.
    Bounds {
        config: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        /// initial or optimal.
        #[arg(long, default_value = "initial")]
        policy: PolicySource,
    },
}

fn out_dir(cli_out: &Option<PathBuf>, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output.clone()))
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn load(path: &Path, offset: u64) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = load_config(path)?;
    for s in &mut cfg.seeds {
        *s = s.checked_add(offset).ok_or_else(|| HarnessError::Usage("seed overflow".into()))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| HarnessError::Usage(e.to_string()))?;
    }
    match &cli.command {
        Command::Run { config } => {
            let cfg = load(config, cli.seed_offset)?;
            let dir = out_dir(&cli.out, Some(&cfg));
            let out = run_experiment(&cfg, &dir)?;
            let s = &out.summary;
            println!(
                "{} on {}: {} seeds, stability fraction {}, median final cost {} (optimal {})",
                s.algorithm, s.system, s.seeds, s.stability_fraction, s.median_final_cost, s.optimal_lambda
            );
            println!("wrote {} and {}", out.results_path.display(), out.summary_path.display());
        }
        Command::Sweep { config, horizons } => {
            let cfg = load(config, cli.seed_offset)?;
            let dir = out_dir(&cli.out, Some(&cfg));
            let out = sweep(&cfg, horizons, &dir)?;
            for r in &out.rows {
                println!("T={} median cumulative regret {}", r.horizon, r.median_cumulative_regret);
            }
            match out.slope {
                Some(s) => println!("log-log slope {s}"),
                None => println!("log-log slope undefined"),
            }
            println!("wrote {}", out.path.display());
        }
        Command::Verify {
            suite,
            inject_failure,
        } => {
            let opts = VerifyOptions {
                seed: cli.seed_offset,
                inject_failure: *inject_failure,
                quick: false,
            };
            let checks = run_suite(*suite, &opts)?;
            for c in &checks {
                println!("{c}");
            }
            let dir = out_dir(&cli.out, None);
            std::fs::create_dir_all(&dir).map_err(|source| HarnessError::Io {
                path: dir.clone(),
                source,
            })?;
            write_report(&checks, &dir.join(format!("verify-{suite}.csv")))?;
            return Ok(checks.iter().all(|c| c.pass));
        }
        Command::Bounds {
            config,
            alpha,
            delta,
            policy,
        } => {
            let cfg = load(config, cli.seed_offset)?;
            let rows = bounds_table(&cfg, *policy, *alpha, *delta)?;
            let width = rows.iter().map(|r| r.quantity.len()).max().unwrap_or(0);
            for r in &rows {
                println!("{:width$}  {}", r.quantity, r.value);
            }
            let dir = out_dir(&cli.out, Some(&cfg));
            std::fs::create_dir_all(&dir).map_err(|source| HarnessError::Io {
                path: dir.clone(),
                source,
            })?;
            write_bounds(&rows, &dir.join("bounds.csv"))?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
