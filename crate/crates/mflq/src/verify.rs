//! Monte-Carlo verification suites for the concentration and moment bounds.
//!
//! Every suite uses fixed seeds; instance `i` of a suite samples from
//! stream `TRIAL_STREAM_BASE + offset + i`, so reports are reproducible
//! and independent of the thread count.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use mflq_core::linalg::{spectral_radius, solve_lyapunov, SymMatrix};
use mflq_core::mflq::{make_schedule, stability_diagnostics};
use mflq_core::rng::NormalSampler;
use mflq_core::theory::{
    beta_mixing_bound, block_partition, difference_features, gaussian_fourth_moment,
    gaussian_fourth_moment_mc, gram_floor_check, partial_sum_bound, random_symmetric_direction,
    small_ball_probability, small_ball_second_moment, small_ball_second_moment_mc, state_bounds,
    verify_block_bound, MixingBoundSpec, SMALL_BALL_OMEGA, SMALL_BALL_PROBABILITY,
    TRIAL_STREAM_BASE,
};
use nalgebra::{dmatrix, DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{builtin_system, Algorithm, ExperimentConfig};
use crate::error::HarnessError;
use crate::experiment::run_seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Moments,
    SmallBall,
    Mixing,
    Blocks,
    Gram,
    StateBounds,
    All,
}

impl Suite {
    const EACH: [Suite; 6] = [
        Suite::Moments,
        Suite::SmallBall,
        Suite::Mixing,
        Suite::Blocks,
        Suite::Gram,
        Suite::StateBounds,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Moments => "moments",
            Suite::SmallBall => "small-ball",
            Suite::Mixing => "mixing",
            Suite::Blocks => "blocks",
            Suite::Gram => "gram",
            Suite::StateBounds => "state-bounds",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::EACH
            .into_iter()
            .chain([Suite::All])
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown suite `{s}` (expected moments, small-ball, mixing, blocks, gram, state-bounds or all)"
                )
            })
    }
}

/// One verdict: `statistic` compared against `bound`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub suite: String,
    pub check: String,
    pub statistic: f64,
    pub bound: f64,
    pub pass: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: statistic={} bound={} {}",
            self.suite,
            self.check,
            self.statistic,
            self.bound,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Flip every verdict, to check that failures propagate.
    pub inject_failure: bool,
    /// Divide sample counts by 100 (smoke runs only; the bounds are not
    /// meant to hold at that size).
    pub quick: bool,
}

impl VerifyOptions {
    fn count(&self, full: usize) -> usize {
        if self.quick {
            (full / 100).max(2)
        } else {
            full
        }
    }

    fn sampler(&self, offset: u64, i: usize) -> NormalSampler {
        NormalSampler::new(self.seed, TRIAL_STREAM_BASE + offset + i as u64)
    }
}

struct Report<'a> {
    suite: Suite,
    opts: &'a VerifyOptions,
    checks: Vec<Check>,
}

impl Report<'_> {
    fn push(&mut self, check: &str, statistic: f64, bound: f64, pass: bool) {
        self.checks.push(Check {
            suite: self.suite.name().to_string(),
            check: check.to_string(),
            statistic,
            bound,
            pass: pass != self.opts.inject_failure,
        });
    }

    /// Passes when `statistic <= bound`.
    fn at_most(&mut self, check: &str, statistic: f64, bound: f64) {
        self.push(check, statistic, bound, statistic <= bound);
    }

    /// Passes when `statistic >= bound`.
    fn at_least(&mut self, check: &str, statistic: f64, bound: f64) {
        self.push(check, statistic, bound, statistic >= bound);
    }
}

fn random_symmetric(n: usize, s: &mut NormalSampler) -> SymMatrix {
    let a = DMatrix::from_fn(n, n, |_, _| s.sample());
    SymMatrix::new(&a + a.transpose()).expect("finite")
}

fn random_psd(n: usize, s: &mut NormalSampler) -> SymMatrix {
    let a = DMatrix::from_fn(n, n, |_, _| s.sample());
    SymMatrix::new(&a * a.transpose()).expect("finite")
}

/// Gaussian matrix rescaled to spectral radius `0.95 u`, `u` uniform.
fn random_stable(n: usize, s: &mut NormalSampler) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| s.sample());
    let target = 0.95 * s.uniform();
    let rho = spectral_radius(&a);
    if rho < 1e-12 {
        a
    } else {
        a * (target / rho)
    }
}

fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

fn moments(r: &mut Report<'_>) -> Result<(), HarnessError> {
    let i3 = SymMatrix::identity(3);
    r.at_most(
        "identity_closed_form",
        (gaussian_fourth_moment(&i3, &i3)? - 15.0).abs(),
        1e-12,
    );
    let samples = r.opts.count(1_000_000);
    let opts = r.opts;
    let z: Vec<f64> = (0..10)
        .into_par_iter()
        .map(|i| {
            let mut s = opts.sampler(0, i);
            let f = random_symmetric(3, &mut s);
            let f2 = random_symmetric(3, &mut s);
            let exact = gaussian_fourth_moment(&f, &f2).expect("same dims");
            let mc = gaussian_fourth_moment_mc(&f, &f2, samples, &mut s);
            (mc.mean - exact).abs() / mc.std_error
        })
        .collect();
    for (i, z) in z.into_iter().enumerate() {
        r.at_most(&format!("fourth_moment_z_{i}"), z, 3.0);
    }
    Ok(())
}

/// Stable `Γ`, its stationary covariance under unit noise, and a direction.
fn small_ball_instance(s: &mut NormalSampler) -> (SymMatrix, DMatrix<f64>, DVector<f64>) {
    let gamma = random_stable(2, s);
    let sigma = solve_lyapunov(&gamma, &SymMatrix::identity(2)).expect("stable");
    let v = random_symmetric_direction(2, s);
    (sigma, gamma, v)
}

fn small_ball(r: &mut Report<'_>) -> Result<(), HarnessError> {
    let opts = r.opts;
    let samples = opts.count(1_000_000);
    let z: Vec<f64> = (0..10)
        .into_par_iter()
        .map(|i| {
            let mut s = opts.sampler(100, i);
            let (sigma, gamma, v) = small_ball_instance(&mut s);
            let exact = small_ball_second_moment(&sigma, &gamma, &v).expect("valid");
            let mc = small_ball_second_moment_mc(&sigma, &gamma, &v, samples, &mut s).expect("valid");
            (mc.mean - exact).abs() / mc.std_error
        })
        .collect();
    for (i, z) in z.into_iter().enumerate() {
        r.at_most(&format!("second_moment_z_{i}"), z, 3.0);
    }

    let mut s = opts.sampler(200, 0);
    let mut floor = f64::INFINITY;
    for _ in 0..1000 {
        let n = 2 + (s.uniform() * 2.0) as usize;
        let gamma = DMatrix::from_fn(n, n, |_, _| s.sample());
        let sigma = random_psd(n, &mut s);
        let v = random_symmetric_direction(n, &mut s);
        floor = floor.min(small_ball_second_moment(&sigma, &gamma, &v)?);
    }
    r.at_least("second_moment_min_over_1000", floor, 2.0 - 1e-9);

    let samples = opts.count(100_000);
    let probs: Vec<(f64, f64)> = (0..50)
        .into_par_iter()
        .map(|i| {
            let mut s = opts.sampler(300, i);
            let (sigma, gamma, v) = small_ball_instance(&mut s);
            let p = small_ball_probability(&sigma, &gamma, &v, SMALL_BALL_OMEGA, samples, &mut s)
                .expect("valid");
            (p.mean, SMALL_BALL_PROBABILITY - 3.0 * binomial_se(SMALL_BALL_PROBABILITY, samples))
        })
        .collect();
    let worst = probs
        .iter()
        .copied()
        .min_by(|a, b| (a.0 - a.1).total_cmp(&(b.0 - b.1)))
        .expect("50 instances");
    r.push(
        "probability_worst_of_50",
        worst.0,
        worst.1,
        probs.iter().all(|(p, b)| p >= b),
    );
    Ok(())
}

fn mixing(r: &mut Report<'_>) -> Result<(), HarnessError> {
    let zero = MixingBoundSpec::new(DMatrix::zeros(2, 2), 0.5)?;
    let expect = 0.5f64.powi(3) / 2.0 * (2.0 / 0.75f64).sqrt();
    r.at_most(
        "zero_dynamics_closed_form",
        (beta_mixing_bound(&zero, 3) - expect).abs(),
        1e-12,
    );
    let scalar = MixingBoundSpec::new(dmatrix![0.5], 0.75)?;
    let expect = 1.5 * (1.0 / 3.0 + 1.0 / 0.4375f64).sqrt();
    r.at_most(
        "scalar_closed_form",
        (scalar.beta_bar() - expect).abs(),
        1e-9,
    );
    let mut s = r.opts.sampler(400, 0);
    let mut specs = vec![zero, scalar];
    for _ in 0..8 {
        let g = random_stable(3, &mut s);
        let rho = spectral_radius(&g);
        specs.push(MixingBoundSpec::new(g, rho + (1.0 - rho) * (0.05 + 0.9 * s.uniform()))?);
    }
    let mut worst: f64 = 0.0;
    for spec in &specs {
        for k in 0..50 {
            let ratio = beta_mixing_bound(spec, k + 1) / beta_mixing_bound(spec, k);
            worst = worst.max((ratio - spec.alpha()).abs() / spec.alpha());
        }
    }
    r.at_most("geometric_ratio_rel_error", worst, 1e-12);
    Ok(())
}

/// `clip(x, -1, 1)` of the first coordinate.
pub fn clipped_first(x: &DVector<f64>) -> f64 {
    x[0].clamp(-1.0, 1.0)
}

fn blocks(r: &mut Report<'_>) -> Result<(), HarnessError> {
    let p = block_partition(10, 2)?;
    let ok = p.m == 2 && p.heads == vec![0..2, 4..6] && p.tails == vec![2..4, 6..8] && p.residual == (8..10);
    r.push("partition_n10_b2", p.m as f64, 2.0, ok);
    let (b, _) = partial_sum_bound(1000, 0.5, 1.0, 0.01)?;
    r.push("block_length_n1000", b as f64, 25.0, b == 25);

    let delta = 0.05;
    let trials = r.opts.count(2000);
    let check = verify_block_bound(&dmatrix![0.5], clipped_first, 10_000, delta, trials, r.opts.seed)?;
    let p = 4.0 * delta;
    r.at_most(
        "violation_rate_ar1",
        check.violation_rate,
        p + 3.0 * binomial_se(p, trials),
    );
    let zero = verify_block_bound(&dmatrix![0.5], |_| 0.0, 1000, delta, 50, r.opts.seed)?;
    r.at_most("violation_rate_zero_observable", zero.violation_rate, 0.0);
    Ok(())
}

fn gram(r: &mut Report<'_>) -> Result<(), HarnessError> {
    let gamma = dmatrix![0.6, 0.2; -0.1, 0.5];
    let mut s = r.opts.sampler(500, 0);
    let steps = r.opts.count(100_000);
    let mut x = DVector::zeros(2);
    let states: Vec<DVector<f64>> = (0..=steps)
        .map(|_| {
            x = &gamma * &x + s.vector(2);
            x.clone()
        })
        .collect();
    let (lmin, floor) = gram_floor_check(
        &difference_features(&states),
        SMALL_BALL_OMEGA,
        SMALL_BALL_PROBABILITY,
    )?;
    r.at_least("difference_features_lambda_min", lmin, floor);
    let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let (lmin, _) = gram_floor_check(&vec![v; 10], 1.0, 1.0)?;
    r.at_most("repeated_feature_lambda_min", lmin.abs(), 1e-12);
    Ok(())
}

fn boundedness(r: &mut Report<'_>) -> Result<(), HarnessError> {
    let (cx, ca) = state_bounds(5.0, 3, 10_000, 0.05)?;
    r.at_most("ratio_is_sqrt_c_h", (ca / cx - 5f64.sqrt()).abs(), 1e-12);

    let runs = r.opts.count(10_000).min(100);
    let seeds: Vec<u64> = (0..runs as u64).map(|i| r.opts.seed * 1_000_003 + i).collect();
    let horizon = 1 << 14;
    let cfg = ExperimentConfig::new(builtin_system("dean2017")?, Algorithm::MflqV2, horizon, seeds);
    let schedule = make_schedule(horizon, 0.0, cfg.algorithm.schedule_variant(), cfg.explore_period)?;
    let sys = &cfg.system.sys;
    let (mut exceed, mut healthy, mut bounded) = (0usize, 0usize, 0usize);
    for o in run_seeds(&cfg)? {
        let rep = stability_diagnostics(&o.record, sys, schedule.phases)?;
        if rep.max_state_norm > rep.c_x {
            exceed += 1;
        }
        for p in &rep.phases {
            if let Some(ok) = p.h_bounded {
                healthy += 1;
                bounded += usize::from(ok);
            }
        }
    }
    let frac = exceed as f64 / runs as f64;
    r.at_most(
        "state_exceeds_c_x_fraction",
        frac,
        0.05 + 3.0 * binomial_se(0.05, runs),
    );
    let share = if healthy == 0 { 0.0 } else { bounded as f64 / healthy as f64 };
    r.at_least("value_norm_within_3c1_share", share, 0.95);
    Ok(())
}

/// Runs one suite (or all of them) and returns its checks in a fixed order.
pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Vec<Check>, HarnessError> {
    if suite == Suite::All {
        let mut out = Vec::new();
        for s in Suite::EACH {
            out.extend(run_suite(s, opts)?);
        }
        return Ok(out);
    }
    let mut r = Report {
        suite,
        opts,
        checks: Vec::new(),
    };
    match suite {
        Suite::Moments => moments(&mut r)?,
        Suite::SmallBall => small_ball(&mut r)?,
        Suite::Mixing => mixing(&mut r)?,
        Suite::Blocks => blocks(&mut r)?,
        Suite::Gram => gram(&mut r)?,
        Suite::StateBounds => boundedness(&mut r)?,
        Suite::All => unreachable!(),
    }
    Ok(r.checks)
}

/// Writes `suite,check,statistic,bound,pass` rows.
pub fn write_report(checks: &[Check], path: &Path) -> Result<(), HarnessError> {
    let csv_err = |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for c in checks {
        w.serialize(c).map_err(csv_err)?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}
