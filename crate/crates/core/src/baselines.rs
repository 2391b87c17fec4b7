//! Comparison algorithms: greedy policy iteration on the latest estimate
//! (LSPI), randomized value functions (RLSVI) and certainty equivalence.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::env::{greedy_policy, rollout, LinearPolicy, LqSystem, QMatrix, Transition};
use crate::error::{Error, Result};
use crate::linalg::{
    outer_vec, psd_project, spectral_radius, sym_mat, SymMatrix, VecImage,
};
use crate::mflq::{
    drive, GreedyLearner, PhaseContext, PhaseEstimate, PhaseLearner, PhaseSchedule, PhaseUpdate,
    RunOptions, RunRecord,
};
use crate::rng::{NormalSampler, RunRng};

/// Default scale of the state cost used to design the initial controller.
pub const DEFAULT_INITIAL_SCALE: f64 = 200.0;
/// Covariance scale of RLSVI parameter samples.
pub const RLSVI_SAMPLE_SCALE: f64 = 0.2;

/// Optimal controller for the state cost scaled by `scale`: a conservative
/// but stabilizing starting point.
pub fn initial_policy(sys: &LqSystem, scale: f64) -> Result<LinearPolicy> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidParameter {
            name: "initial_policy_scale",
            reason: "must be positive and finite",
        });
    }
    Ok(sys.with_state_cost_scale(scale)?.optimal_controller()?.0)
}

/// Policy iteration that acts greedily on the most recent estimate only.
pub fn run_lspi(
    sys: &LqSystem,
    k1: &LinearPolicy,
    schedule: &PhaseSchedule,
    action_cov: &SymMatrix,
    rng: &mut RunRng,
    opts: &RunOptions,
) -> Result<RunRecord> {
    drive(
        sys,
        k1,
        schedule,
        action_cov,
        rng,
        opts,
        &mut GreedyLearner::most_recent(),
    )
}

/// Executes a fixed policy in consecutive segments of the given lengths,
/// recording each segment as a phase.
pub fn run_fixed_policy(
    sys: &LqSystem,
    policy: &LinearPolicy,
    segments: &[usize],
    rng: &mut RunRng,
    opts: &RunOptions,
) -> Result<RunRecord> {
    let mut record = RunRecord::new(rng.seed());
    let mut x = opts
        .x0
        .clone()
        .unwrap_or_else(|| DVector::zeros(sys.state_dim()));
    for &len in segments {
        record.begin_phase(sys, policy);
        let traj = rollout(sys, policy, len, &x, rng, opts.blowup)?;
        let ok = record.absorb(&traj);
        record.end_phase();
        if !ok {
            break;
        }
        if let Some(last) = traj.final_state() {
            x = last.clone();
        }
    }
    record.final_stable = sys.is_stable(policy);
    record.final_policy = Some(policy.clone());
    Ok(record)
}

/// Running least-squares fit of `x+` on `(x, a)`.
#[derive(Clone, Debug)]
struct OlsModel {
    zz: DMatrix<f64>,
    xz: DMatrix<f64>,
}

impl OlsModel {
    fn new(n: usize, d: usize) -> Self {
        Self {
            zz: DMatrix::zeros(n + d, n + d),
            xz: DMatrix::zeros(n, n + d),
        }
    }

    fn add(&mut self, t: &Transition) {
        let z = DVector::from_iterator(
            t.x.len() + t.a.len(),
            t.x.iter().chain(t.a.iter()).copied(),
        );
        self.zz.ger(1.0, &z, &z, 1.0);
        self.xz.ger(1.0, &t.x_next, &z, 1.0);
    }

    /// `[Â B̂]`, or `None` while the regressors do not span `(x, a)` space.
    fn estimate(&self, n: usize) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let p = self.zz.nrows();
        let svd = self.zz.clone().svd(false, false);
        let smax = svd.singular_values.max();
        if !(svd.singular_values.min() > smax * 1e-12) {
            return None;
        }
        let theta = self.zz.clone().lu().solve(&self.xz.transpose())?.transpose();
        Some((theta.columns(0, n).into_owned(), theta.columns(n, p - n).into_owned()))
    }
}

/// Certainty equivalence: least-squares dynamics from all data, then the
/// Riccati controller of the estimated model.
struct ModelBasedLearner {
    ols: OlsModel,
    a_errors: Vec<f64>,
}

impl PhaseLearner for ModelBasedLearner {
    fn update(&mut self, ctx: &PhaseContext<'_>) -> Result<PhaseUpdate> {
        let sys = ctx.sys;
        for seg in ctx.new_steps {
            for t in seg.iter() {
                self.ols.add(t);
            }
        }
        let keep = PhaseUpdate {
            next: ctx.current.clone(),
            estimate: None,
            fallback: true,
        };
        let (a_hat, b_hat) = if ctx.oracle {
            (sys.a().clone(), sys.b().clone())
        } else {
            match self.ols.estimate(sys.state_dim()) {
                Some(ab) => ab,
                None => return Ok(keep),
            }
        };
        self.a_errors.push((&a_hat - sys.a()).norm());
        let model = match LqSystem::new(
            a_hat.clone(),
            b_hat.clone(),
            sys.m().clone(),
            sys.n().clone(),
            sys.w().clone(),
        ) {
            Ok(m) => m,
            Err(_) => return Ok(keep),
        };
        let (k, p) = match model.optimal_controller() {
            Ok(kp) => kp,
            Err(_) => return Ok(keep),
        };
        if spectral_radius(&(&a_hat - &b_hat * k.gain())) >= 1.0 {
            return Ok(keep);
        }
        let ab = {
            let mut m = DMatrix::zeros(a_hat.nrows(), a_hat.ncols() + b_hat.ncols());
            m.columns_mut(0, a_hat.ncols()).copy_from(&a_hat);
            m.columns_mut(a_hat.ncols(), b_hat.ncols()).copy_from(&b_hat);
            m
        };
        let g = SymMatrix::symmetrize(
            ab.transpose() * p.as_matrix() * &ab + sys.cost_floor().as_matrix(),
        );
        Ok(PhaseUpdate {
            next: k,
            estimate: Some(PhaseEstimate {
                h_hat: p,
                g_hat: g.clone(),
                g_used: g,
            }),
            fallback: false,
        })
    }
}

/// Output of [`run_model_based`]: the run plus `||Â - A||_F` per phase in
/// which a model was fitted.
#[derive(Clone, Debug)]
pub struct ModelBasedRun {
    pub record: RunRecord,
    pub a_errors: Vec<f64>,
}

/// Certainty-equivalent control with the same exploration schedule as MFLQ.
/// When the estimated model yields no usable controller the previous policy
/// is kept and the phase is counted in `RunRecord::fallbacks`.
pub fn run_model_based(
    sys: &LqSystem,
    k1: &LinearPolicy,
    schedule: &PhaseSchedule,
    action_cov: &SymMatrix,
    rng: &mut RunRng,
    opts: &RunOptions,
) -> Result<ModelBasedRun> {
    let mut learner = ModelBasedLearner {
        ols: OlsModel::new(sys.state_dim(), sys.action_dim()),
        a_errors: Vec::new(),
    };
    let record = drive(sys, k1, schedule, action_cov, rng, opts, &mut learner)?;
    Ok(ModelBasedRun {
        record,
        a_errors: learner.a_errors,
    })
}

/// Gaussian posterior over `vect(G)` maintained by recursive least squares
/// with unit noise variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RlsviPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub sample_scale: f64,
}

impl RlsviPosterior {
    /// Prior `N(0, I)` over the `(n + d)^2` coordinates.
    pub fn new(dim: usize) -> Self {
        let p = dim * dim;
        Self {
            mean: DVector::zeros(p),
            covariance: DMatrix::identity(p, p),
            sample_scale: RLSVI_SAMPLE_SCALE,
        }
    }

    /// Rank-one update with regressor `psi` and target `y`.
    pub fn update(&mut self, psi: &DVector<f64>, y: f64) {
        let ppsi = &self.covariance * psi;
        let denom = 1.0 + psi.dot(&ppsi);
        let resid = y - psi.dot(&self.mean);
        self.mean.axpy(resid / denom, &ppsi, 1.0);
        self.covariance.ger(-1.0 / denom, &ppsi, &ppsi, 1.0);
        let sym = (&self.covariance + self.covariance.transpose()) * 0.5;
        self.covariance = sym;
    }

    /// Draws `vect(G) ~ N(mean, scale * covariance)` and returns it as a
    /// symmetric matrix.
    pub fn sample(&self, sampler: &mut NormalSampler) -> Result<SymMatrix> {
        let cov = SymMatrix::symmetrize(self.covariance.scale(self.sample_scale));
        let root = cov.psd_sqrt();
        let g = sampler.vector(self.mean.len());
        let draw = &self.mean + root.as_matrix() * g;
        Ok(sym_mat(&VecImage::from_dvector(draw)?))
    }
}

/// `[I; -K]ᵀ G [I; -K]`: the value matrix `G` implies for policy `K`.
fn implied_h(g: &SymMatrix, k: &LinearPolicy) -> SymMatrix {
    let n = k.gain().ncols();
    let d = k.gain().nrows();
    let mut lift = DMatrix::zeros(n + d, n);
    lift.rows_mut(0, n).fill_with_identity();
    lift.rows_mut(n, d).copy_from(&(-k.gain()));
    SymMatrix::symmetrize(lift.transpose() * g.as_matrix() * lift)
}

/// Output of [`run_rlsvi`].
#[derive(Clone, Debug)]
pub struct RlsviRun {
    pub record: RunRecord,
    pub posterior: RlsviPosterior,
    /// Smallest covariance eigenvalue seen after any update.
    pub min_cov_eigenvalue: f64,
}

/// Randomized least-squares value iteration. Every step feeds the on-policy
/// temporal-difference target `c + x+ᵀ H x+ - tr(H W)` (with `H` implied by
/// the current parameter sample) into a recursive least-squares posterior
/// over `vect(G)`; every `floor(sqrt(T))` steps a parameter sample is drawn,
/// projected onto `G ⪰ blockdiag(M, N)`, and its greedy policy takes over.
pub fn run_rlsvi(
    sys: &LqSystem,
    k1: &LinearPolicy,
    horizon: usize,
    rng: &mut RunRng,
    opts: &RunOptions,
) -> Result<RlsviRun> {
    run_rlsvi_with(sys, k1, horizon, rng, opts, RlsviPosterior::new(sys.state_dim() + sys.action_dim()))
}

/// [`run_rlsvi`] from a given posterior.
pub fn run_rlsvi_with(
    sys: &LqSystem,
    k1: &LinearPolicy,
    horizon: usize,
    rng: &mut RunRng,
    opts: &RunOptions,
    mut posterior: RlsviPosterior,
) -> Result<RlsviRun> {
    if !sys.is_stable(k1) {
        return Err(Error::Unstable(spectral_radius(&sys.closed_loop(k1))));
    }
    let (n, d) = (sys.state_dim(), sys.action_dim());
    if posterior.mean.len() != (n + d) * (n + d) {
        return Err(Error::DimensionMismatch {
            context: "posterior",
            expected: (n + d) * (n + d),
            got: posterior.mean.len(),
        });
    }
    let interval = libm::floor(libm::sqrt(horizon as f64) * (1.0 + 1e-12)) as usize;
    if interval == 0 {
        return Err(Error::InfeasibleHorizon("horizon too short for any switching interval"));
    }
    let floor = sys.cost_floor();
    let mut record = RunRecord::new(rng.seed());
    let mut x = opts.x0.clone().unwrap_or_else(|| DVector::zeros(n));
    let mut policy = k1.clone();
    let mut h = implied_h(&psd_project(&sym_mat(&VecImage::from_dvector(posterior.mean.clone())?), &floor), &policy);
    let mut min_eig = f64::INFINITY;
    let mut psi = DVector::zeros((n + d) * (n + d));
    let mut zbuf = Vec::with_capacity(n + d);
    let mut done = 0;
    while done < horizon {
        let len = interval.min(horizon - done);
        record.begin_phase(sys, &policy);
        let traj = rollout(sys, &policy, len, &x, rng, opts.blowup)?;
        let ok = record.absorb(&traj);
        record.end_phase();
        done += traj.len();
        if !ok {
            break;
        }
        let noise_term = h.frobenius_inner(sys.w());
        for t in &traj.steps {
            zbuf.clear();
            zbuf.extend(t.x.iter().chain(t.a.iter()).copied());
            outer_vec(&zbuf, psi.as_mut_slice());
            let y = t.cost + h.quad(&t.x_next) - noise_term;
            posterior.update(&psi, y);
        }
        min_eig = min_eig.min(SymMatrix::symmetrize(posterior.covariance.clone()).min_eigenvalue());
        if let Some(last) = traj.final_state() {
            x = last.clone();
        }
        if done >= horizon {
            break;
        }
        let sample = psd_project(&posterior.sample(rng.explore())?, &floor);
        let g_hat = sym_mat(&VecImage::from_dvector(posterior.mean.clone())?);
        policy = greedy_policy(&QMatrix::new(sample.clone(), n)?)?;
        h = implied_h(&sample, &policy);
        record.phase_estimates.push(PhaseEstimate {
            h_hat: h.clone(),
            g_hat,
            g_used: sample,
        });
        if !sys.is_stable(&policy) {
            record.final_stable = false;
            record.final_policy = Some(policy.clone());
            break;
        }
    }
    if record.final_policy.is_none() {
        record.final_policy = Some(policy);
    }
    Ok(RlsviRun {
        record,
        posterior,
        min_cov_eigenvalue: min_eig,
    })
}
