//! Running configured experiments over seeds and writing their CSVs.
//!
//! `results.csv` has one row per phase per seed:
//!
//! | column | meaning |
//! |---|---|
//! | `seed` | run seed |
//! | `algorithm` | algorithm name as in the config |
//! | `phase_index` | 1-based phase number |
//! | `steps_elapsed` | environment steps at the end of the phase |
//! | `phase_avg_cost` | mean per-step cost during the phase |
//! | `true_lambda` | exact average cost of the phase's policy (empty if unstable) |
//! | `cumulative_cost` | total cost up to the end of the phase |
//! | `cumulative_regret` | cumulative cost minus that of the optimal controller on an independent noise stream |
//! | `stable` | phase policy stable, no divergence, and (last row) the produced policy stable |
//!
//! `summary.csv` has one row per experiment: `system`, `algorithm`,
//! `horizon`, `seeds`, `stability_fraction`, `median_final_cost` (last phase
//! average cost), `median_final_lambda` (exact cost of the last executed
//! policy), `optimal_lambda`, `median_cumulative_regret`, `regret_slope`
//! (log-log fit of median cumulative regret against steps across phases;
//! empty with fewer than two positive points).
//!
//! `sweep.csv` has `horizon`, `median_cumulative_regret`, `slope`, with the
//! same fitted slope on every row (empty for a single horizon).

use std::fs;
use std::path::{Path, PathBuf};

use mflq_core::baselines::{
    initial_policy, run_fixed_policy, run_lspi, run_model_based, run_rlsvi,
};
use mflq_core::env::policy_value;
use mflq_core::mflq::{make_schedule, reference_costs, run_mflq, RunOptions, RunRecord};
use mflq_core::rng::RunRng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Algorithm, ExperimentConfig};
use crate::error::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub seed: u64,
    pub algorithm: String,
    pub phase_index: usize,
    pub steps_elapsed: usize,
    pub phase_avg_cost: f64,
    pub true_lambda: Option<f64>,
    pub cumulative_cost: f64,
    pub cumulative_regret: f64,
    pub stable: bool,
}

/// One seed's run and its derived rows.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub record: RunRecord,
    pub rows: Vec<ResultRow>,
    /// Conjunction of the rows' `stable` flags.
    pub stable: bool,
    pub total_regret: f64,
}

impl SeedOutcome {
    pub fn final_cost(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.phase_avg_cost)
    }

    pub fn final_lambda(&self) -> Option<f64> {
        self.record.last_phase_lambda()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub system: String,
    pub algorithm: String,
    pub horizon: usize,
    pub seeds: usize,
    pub stability_fraction: f64,
    pub median_final_cost: f64,
    pub median_final_lambda: Option<f64>,
    pub optimal_lambda: f64,
    pub median_cumulative_regret: f64,
    pub regret_slope: Option<f64>,
}

/// Executes one seed of the configured algorithm.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome, HarnessError> {
    let wrap = |source| HarnessError::Run { seed, source };
    let sys = &cfg.system.sys;
    let k1 = initial_policy(sys, cfg.initial_policy_scale).map_err(wrap)?;
    let (kstar, _) = sys.optimal_controller().map_err(wrap)?;
    let opts = RunOptions {
        burn_in: cfg.burn_in,
        ..RunOptions::default()
    };
    let mut rng = RunRng::new(seed);
    let cov = &cfg.action_cov;
    let schedule = || {
        make_schedule(
            cfg.horizon,
            cfg.xi,
            cfg.algorithm.schedule_variant(),
            cfg.explore_period,
        )
    };
    let record = match cfg.algorithm {
        Algorithm::MflqV1 | Algorithm::MflqV2 | Algorithm::MflqV3 => {
            run_mflq(sys, &k1, &schedule().map_err(wrap)?, cov, &mut rng, &opts)
        }
        Algorithm::Lspi => run_lspi(sys, &k1, &schedule().map_err(wrap)?, cov, &mut rng, &opts),
        Algorithm::ModelBased => {
            run_model_based(sys, &k1, &schedule().map_err(wrap)?, cov, &mut rng, &opts)
                .map(|r| r.record)
        }
        Algorithm::Rlsvi => run_rlsvi(sys, &k1, cfg.horizon, &mut rng, &opts).map(|r| r.record),
        Algorithm::Oracle => {
            let s = schedule().map_err(wrap)?;
            let segments = vec![s.eval_steps + s.collection_steps(); s.phases];
            run_fixed_policy(sys, &kstar, &segments, &mut rng, &opts)
        }
    }
    .map_err(wrap)?;
    let ref_costs = reference_costs(sys, &kstar, record.steps(), seed).map_err(wrap)?;
    Ok(outcome(cfg.algorithm, seed, record, &ref_costs))
}

fn outcome(algorithm: Algorithm, seed: u64, record: RunRecord, ref_costs: &[f64]) -> SeedOutcome {
    let mut rows = Vec::with_capacity(record.phases());
    let (mut cost, mut regret) = (0.0, 0.0);
    let mut start = 0;
    let last = record.phases().saturating_sub(1);
    for (i, &end) in record.phase_end_steps.iter().enumerate() {
        for (c, r) in record.per_step_costs[start..end].iter().zip(&ref_costs[start..end]) {
            cost += c;
            regret += c - r;
        }
        let len = end - start;
        let diverged = record.diverged_at.is_some_and(|d| d < end);
        rows.push(ResultRow {
            seed,
            algorithm: algorithm.name().to_string(),
            phase_index: i + 1,
            steps_elapsed: end,
            phase_avg_cost: if len == 0 {
                0.0
            } else {
                record.per_step_costs[start..end].iter().sum::<f64>() / len as f64
            },
            true_lambda: record.phase_true_values[i].as_ref().map(|v| v.lambda),
            cumulative_cost: cost,
            cumulative_regret: regret,
            stable: record.stability_flags[i] && !diverged && (i != last || record.final_stable),
        });
        start = end;
    }
    let stable = !rows.is_empty() && rows.iter().all(|r| r.stable);
    SeedOutcome {
        seed,
        record,
        rows,
        stable,
        total_regret: regret,
    }
}

/// Runs every seed in parallel; outcomes come back in seed-list order.
pub fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<SeedOutcome>, HarnessError> {
    cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x` over points with positive
/// coordinates; `None` with fewer than two such points or no spread in `x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

pub fn summarize(cfg: &ExperimentConfig, outcomes: &[SeedOutcome]) -> Result<Summary, HarnessError> {
    let sys = &cfg.system.sys;
    let (kstar, _) = sys.optimal_controller()?;
    let optimal_lambda = policy_value(sys, &kstar)?.lambda;
    let k = outcomes.len();
    let stable = outcomes.iter().filter(|o| o.stable).count();
    let lambdas: Vec<f64> = outcomes.iter().filter_map(|o| o.final_lambda()).collect();
    let phases = outcomes.iter().map(|o| o.rows.len()).max().unwrap_or(0);
    let curve: Vec<(f64, f64)> = (0..phases)
        .filter_map(|j| {
            let at: Vec<&ResultRow> = outcomes.iter().filter_map(|o| o.rows.get(j)).collect();
            if at.len() != k {
                return None;
            }
            let steps: Vec<f64> = at.iter().map(|r| r.steps_elapsed as f64).collect();
            let regrets: Vec<f64> = at.iter().map(|r| r.cumulative_regret).collect();
            Some((median(&steps), median(&regrets)))
        })
        .collect();
    Ok(Summary {
        system: cfg.system.name.clone(),
        algorithm: cfg.algorithm.name().to_string(),
        horizon: cfg.horizon,
        seeds: k,
        stability_fraction: if k == 0 { 0.0 } else { stable as f64 / k as f64 },
        median_final_cost: median(&outcomes.iter().map(|o| o.final_cost()).collect::<Vec<_>>()),
        median_final_lambda: (!lambdas.is_empty()).then(|| median(&lambdas)),
        optimal_lambda,
        median_cumulative_regret: median(
            &outcomes.iter().map(|o| o.total_regret).collect::<Vec<_>>(),
        ),
        regret_slope: log_log_slope(&curve),
    })
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let csv_err = |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub results_path: PathBuf,
    pub summary_path: PathBuf,
    pub summary: Summary,
    pub outcomes: Vec<SeedOutcome>,
}

/// Runs all seeds and writes `{prefix}results.csv` and `{prefix}summary.csv`
/// into `dir`.
pub fn run_experiment_with_prefix(
    cfg: &ExperimentConfig,
    dir: &Path,
    prefix: &str,
) -> Result<ExperimentOutput, HarnessError> {
    let outcomes = run_seeds(cfg)?;
    let summary = summarize(cfg, &outcomes)?;
    create_dir(dir)?;
    let results_path = dir.join(format!("{prefix}results.csv"));
    let summary_path = dir.join(format!("{prefix}summary.csv"));
    let rows: Vec<&ResultRow> = outcomes.iter().flat_map(|o| &o.rows).collect();
    write_csv(&results_path, &rows)?;
    write_csv(&summary_path, std::slice::from_ref(&summary))?;
    Ok(ExperimentOutput {
        results_path,
        summary_path,
        summary,
        outcomes,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutput, HarnessError> {
    run_experiment_with_prefix(cfg, dir, "")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub horizon: usize,
    pub median_cumulative_regret: f64,
    pub slope: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub slope: Option<f64>,
    pub path: PathBuf,
}

/// Reruns the experiment at each horizon (ascending) and fits the log-log
/// slope of median cumulative regret. Per-horizon CSVs are written with a
/// `T{horizon}_` prefix next to `sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig, horizons: &[usize], dir: &Path) -> Result<SweepOutput, HarnessError> {
    if horizons.is_empty() {
        return Err(HarnessError::Usage("empty horizon grid".into()));
    }
    if horizons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::Usage("horizon grid must be strictly ascending".into()));
    }
    let mut points = Vec::with_capacity(horizons.len());
    for &t in horizons {
        let mut c = cfg.clone();
        c.horizon = t;
        let out = run_experiment_with_prefix(&c, dir, &format!("T{t}_"))?;
        points.push((t, out.summary.median_cumulative_regret));
    }
    let rows = sweep_rows(&points);
    let path = dir.join("sweep.csv");
    write_csv(&path, &rows)?;
    Ok(SweepOutput {
        slope: rows[0].slope,
        rows,
        path,
    })
}

/// Sweep rows with the fitted slope attached.
pub fn sweep_rows(points: &[(usize, f64)]) -> Vec<SweepRow> {
    let xy: Vec<(f64, f64)> = points.iter().map(|&(t, r)| (t as f64, r)).collect();
    let slope = log_log_slope(&xy);
    points
        .iter()
        .map(|&(horizon, median_cumulative_regret)| SweepRow {
            horizon,
            median_cumulative_regret,
            slope,
        })
        .collect()
}
