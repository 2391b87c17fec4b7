//! Model-free LQ control by policy iteration with Follow-the-Leader averaging
//! of state-action value estimates.
//!
//! A run alternates, in each phase, between executing the current policy to
//! estimate its value matrix, gathering transitions with scheduled random
//! actions, estimating the state-action matrix, and switching to the policy
//! that is greedy with respect to the average of every estimate so far.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::env::{
    collect_data, greedy_policy, policy_value, rollout, LinearPolicy, LqSystem, QMatrix,
    Trajectory, Transition, TransitionDataset, DEFAULT_BLOWUP,
};
use crate::error::{Error, Result};
use crate::estimation::{estimate_g, estimate_h};
use crate::linalg::{operator_norm, psd_project, spectral_radius, SymMatrix};
use crate::rng::RunRng;
use crate::theory::state_bounds;

/// Default exploration period of the first variant.
pub const DEFAULT_V1_PERIOD: usize = 10;
/// Evaluation steps dropped before fitting the value matrix.
pub const DEFAULT_BURN_IN: usize = 50;
/// Confidence parameter used for the state/action boundedness constants.
pub const DEFAULT_DELTA2: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// One exploratory dataset gathered up front and reused by every phase.
    V1,
    /// A fresh exploratory dataset per phase.
    V2,
    /// As `V2`, but every transition of the collection segment is used.
    V3,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
        }
    }
}

/// Phase lengths derived from the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSchedule {
    pub variant: Variant,
    pub horizon: usize,
    pub xi: f64,
    /// Number of phases `S`.
    pub phases: usize,
    /// Policy-evaluation steps per phase `T_v`.
    pub eval_steps: usize,
    /// Exploration period `T_s`.
    pub explore_period: usize,
    /// Exploratory tuples per phase (for `V1`: size of the single up-front
    /// dataset).
    pub tuples_per_phase: usize,
}

impl PhaseSchedule {
    pub fn collection_steps(&self) -> usize {
        self.tuples_per_phase * self.explore_period
    }

    /// Number of environment steps a complete run takes.
    pub fn total_steps(&self) -> usize {
        match self.variant {
            Variant::V1 => self.collection_steps() + self.phases * self.eval_steps,
            Variant::V2 | Variant::V3 => self.phases * (self.eval_steps + self.collection_steps()),
        }
    }
}

/// `floor(T^p)`, nudged so exact powers (e.g. `4096^(1/3)`) are not lost to
/// rounding.
fn floor_pow(t: usize, p: f64) -> usize {
    libm::floor(libm::pow(t as f64, p) * (1.0 + 1e-12)) as usize
}

/// Builds the phase schedule.
///
/// * `V1`: `S = max(1, floor(T^(1/3-ξ)) - 1)`, `T_v = floor(T^(2/3+ξ))`,
///   `T_s = period_v1`, and one dataset of `floor(T^(2/3+ξ))` tuples clipped
///   to the steps left after the evaluation segments.
/// * `V2`/`V3`: `S = floor(T^(1/4))`, `T_s = max(1, floor(T^(1/4-ξ)))`,
///   `T_v = floor(T^(3/4) / 2)`, `floor(T^(1/2+ξ) / 2)` tuples per phase,
///   clipped so a phase fits in `floor(T / S)` steps.
pub fn make_schedule(
    horizon: usize,
    xi: f64,
    variant: Variant,
    period_v1: usize,
) -> Result<PhaseSchedule> {
    if horizon < 64 {
        return Err(Error::InvalidParameter {
            name: "horizon",
            reason: "must be at least 64",
        });
    }
    if !(0.0..0.25).contains(&xi) {
        return Err(Error::InvalidParameter {
            name: "xi",
            reason: "must lie in [0, 1/4)",
        });
    }
    let t = horizon;
    let sched = match variant {
        Variant::V1 => {
            if period_v1 == 0 {
                return Err(Error::InvalidParameter {
                    name: "explore_period",
                    reason: "must be at least 1",
                });
            }
            let phases = floor_pow(t, 1.0 / 3.0 - xi).saturating_sub(1).max(1);
            let eval_steps = floor_pow(t, 2.0 / 3.0 + xi);
            let left = t.saturating_sub(phases * eval_steps);
            let tuples = floor_pow(t, 2.0 / 3.0 + xi).min(left / period_v1);
            PhaseSchedule {
                variant,
                horizon,
                xi,
                phases,
                eval_steps,
                explore_period: period_v1,
                tuples_per_phase: tuples,
            }
        }
        Variant::V2 | Variant::V3 => {
            let phases = floor_pow(t, 0.25);
            let explore_period = floor_pow(t, 0.25 - xi).max(1);
            let eval_steps = libm::floor(0.5 * libm::pow(t as f64, 0.75) * (1.0 + 1e-12)) as usize;
            let per_phase = t.checked_div(phases).unwrap_or(0);
            let tuples = (libm::floor(0.5 * libm::pow(t as f64, 0.5 + xi) * (1.0 + 1e-12))
                as usize)
                .min(per_phase.saturating_sub(eval_steps) / explore_period);
            PhaseSchedule {
                variant,
                horizon,
                xi,
                phases,
                eval_steps,
                explore_period,
                tuples_per_phase: tuples,
            }
        }
    };
    if sched.phases == 0 || sched.eval_steps == 0 {
        return Err(Error::InfeasibleHorizon("schedule has no phases or no evaluation steps"));
    }
    if sched.tuples_per_phase == 0 {
        return Err(Error::InfeasibleHorizon("schedule leaves no exploratory tuples"));
    }
    if sched.total_steps() > horizon {
        return Err(Error::InfeasibleHorizon("schedule exceeds the horizon"));
    }
    Ok(sched)
}

/// Knobs shared by every phase-based learner.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub burn_in: usize,
    pub blowup: f64,
    pub x0: Option<DVector<f64>>,
    /// Replace estimates by the exact matrices of the executed policy.
    pub oracle_estimates: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            burn_in: DEFAULT_BURN_IN,
            blowup: DEFAULT_BLOWUP,
            x0: None,
            oracle_estimates: false,
        }
    }
}

/// Exact quantities of an executed policy, kept for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct TrueValue {
    pub h: SymMatrix,
    pub g: SymMatrix,
    pub lambda: f64,
}

/// What a learner estimated at the end of a phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseEstimate {
    pub h_hat: SymMatrix,
    pub g_hat: SymMatrix,
    /// Matrix the next policy was made greedy against (after projection).
    pub g_used: SymMatrix,
}

/// Everything recorded about one run. Phase-indexed vectors all have one
/// entry per executed policy, except `phase_estimates`, which only covers
/// phases that ran to completion.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub per_step_costs: Vec<f64>,
    /// For every step, the index of the policy in control.
    pub step_policy: Vec<u32>,
    pub phase_policies: Vec<LinearPolicy>,
    pub phase_estimates: Vec<PhaseEstimate>,
    pub phase_true_values: Vec<Option<TrueValue>>,
    pub stability_flags: Vec<bool>,
    /// Cumulative step count at the end of each phase.
    pub phase_end_steps: Vec<usize>,
    /// The policy produced after the last phase, if any.
    pub final_policy: Option<LinearPolicy>,
    pub final_stable: bool,
    pub diverged_at: Option<usize>,
    pub max_state_norm: f64,
    pub max_action_norm: f64,
    /// Phases in which the learner kept its previous policy.
    pub fallbacks: usize,
}

impl RunRecord {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            seed,
            per_step_costs: Vec::new(),
            step_policy: Vec::new(),
            phase_policies: Vec::new(),
            phase_estimates: Vec::new(),
            phase_true_values: Vec::new(),
            stability_flags: Vec::new(),
            phase_end_steps: Vec::new(),
            final_policy: None,
            final_stable: true,
            diverged_at: None,
            max_state_norm: 0.0,
            max_action_norm: 0.0,
            fallbacks: 0,
        }
    }

    pub fn phases(&self) -> usize {
        self.phase_policies.len()
    }

    pub fn steps(&self) -> usize {
        self.per_step_costs.len()
    }

    /// Every executed and produced policy was stable and no rollout diverged.
    pub fn stable(&self) -> bool {
        self.diverged_at.is_none() && self.final_stable && self.stability_flags.iter().all(|&s| s)
    }

    pub fn total_cost(&self) -> f64 {
        self.per_step_costs.iter().sum()
    }

    /// Average cost `λ` of the last executed policy.
    pub fn last_phase_lambda(&self) -> Option<f64> {
        self.phase_true_values.last()?.as_ref().map(|v| v.lambda)
    }

    /// Average cost incurred during each phase.
    pub fn phase_average_costs(&self) -> Vec<f64> {
        let mut start = 0;
        self.phase_end_steps
            .iter()
            .map(|&end| {
                let seg = &self.per_step_costs[start..end];
                start = end;
                if seg.is_empty() {
                    0.0
                } else {
                    seg.iter().sum::<f64>() / seg.len() as f64
                }
            })
            .collect()
    }

    pub(crate) fn begin_phase(&mut self, sys: &LqSystem, policy: &LinearPolicy) {
        let stable = sys.is_stable(policy);
        let tv = if stable {
            policy_value(sys, policy).ok().map(|pv| TrueValue {
                h: pv.h.0,
                g: pv.q.matrix().clone(),
                lambda: pv.lambda,
            })
        } else {
            None
        };
        self.phase_policies.push(policy.clone());
        self.stability_flags.push(stable && tv.is_some());
        self.phase_true_values.push(tv);
    }

    pub(crate) fn end_phase(&mut self) {
        self.phase_end_steps.push(self.per_step_costs.len());
    }

    /// Appends executed steps; returns false if the segment diverged.
    pub(crate) fn absorb(&mut self, traj: &Trajectory) -> bool {
        let idx = (self.phase_policies.len() - 1) as u32;
        let offset = self.per_step_costs.len();
        for s in &traj.steps {
            self.per_step_costs.push(s.cost);
            self.step_policy.push(idx);
            self.max_state_norm = self.max_state_norm.max(s.x.norm());
            self.max_action_norm = self.max_action_norm.max(s.a.norm());
        }
        if let Some(t) = traj.diverged_at {
            self.diverged_at = Some(offset + t);
            return false;
        }
        true
    }
}

/// Data handed to a learner at the end of a phase.
pub(crate) struct PhaseContext<'a> {
    pub sys: &'a LqSystem,
    pub current: &'a LinearPolicy,
    pub eval: &'a Trajectory,
    pub dataset: &'a TransitionDataset,
    /// Every transition executed since the previous update.
    pub new_steps: &'a [&'a [Transition]],
    pub oracle: bool,
    pub burn_in: usize,
}

pub(crate) struct PhaseUpdate {
    pub next: LinearPolicy,
    pub estimate: Option<PhaseEstimate>,
    pub fallback: bool,
}

pub(crate) trait PhaseLearner {
    fn update(&mut self, ctx: &PhaseContext<'_>) -> Result<PhaseUpdate>;
}

/// Shared phase loop of MFLQ, LSPI and the certainty-equivalence baseline.
pub(crate) fn drive<L: PhaseLearner>(
    sys: &LqSystem,
    k1: &LinearPolicy,
    schedule: &PhaseSchedule,
    action_cov: &SymMatrix,
    rng: &mut RunRng,
    opts: &RunOptions,
    learner: &mut L,
) -> Result<RunRecord> {
    if !sys.is_stable(k1) {
        return Err(Error::Unstable(spectral_radius(&sys.closed_loop(k1))));
    }
    if action_cov.dim() != sys.action_dim() {
        return Err(Error::DimensionMismatch {
            context: "action covariance",
            expected: sys.action_dim(),
            got: action_cov.dim(),
        });
    }
    let chol = action_cov
        .cholesky_factor()
        .map_err(|_| Error::NotPositiveDefinite("action covariance"))?;
    let mut record = RunRecord::new(rng.seed());
    let mut x = opts
        .x0
        .clone()
        .unwrap_or_else(|| DVector::zeros(sys.state_dim()));
    let mut policy = k1.clone();
    let include_all = schedule.variant == Variant::V3;
    let mut shared_data: Option<TransitionDataset> = None;
    let mut upfront = Trajectory::default();

    for phase in 0..schedule.phases {
        record.begin_phase(sys, &policy);
        if schedule.variant == Variant::V1 && phase == 0 {
            let c = collect_data(
                sys,
                &policy,
                schedule.collection_steps(),
                schedule.explore_period,
                &chol,
                &x,
                rng,
                false,
                opts.blowup,
            )?;
            if !record.absorb(&c.trajectory) {
                record.end_phase();
                return Ok(record);
            }
            if let Some(last) = c.trajectory.final_state() {
                x = last.clone();
            }
            shared_data = Some(c.dataset);
            upfront = c.trajectory;
        }
        let eval = rollout(sys, &policy, schedule.eval_steps, &x, rng, opts.blowup)?;
        if !record.absorb(&eval) {
            record.end_phase();
            return Ok(record);
        }
        if let Some(last) = eval.final_state() {
            x = last.clone();
        }
        let collected = match schedule.variant {
            Variant::V1 => None,
            Variant::V2 | Variant::V3 => {
                let c = collect_data(
                    sys,
                    &policy,
                    schedule.collection_steps(),
                    schedule.explore_period,
                    &chol,
                    &x,
                    rng,
                    include_all,
                    opts.blowup,
                )?;
                if !record.absorb(&c.trajectory) {
                    record.end_phase();
                    return Ok(record);
                }
                if let Some(last) = c.trajectory.final_state() {
                    x = last.clone();
                }
                Some(c)
            }
        };
        record.end_phase();

        let (dataset, collection_steps): (&TransitionDataset, &[Transition]) = match &collected {
            Some(c) => (&c.dataset, &c.trajectory.steps),
            None => (
                shared_data.as_ref().expect("v1 dataset collected in phase 1"),
                if phase == 0 { &upfront.steps } else { &[] },
            ),
        };
        let new_steps: [&[Transition]; 2] = [collection_steps, &eval.steps];
        let update = learner.update(&PhaseContext {
            sys,
            current: &policy,
            eval: &eval,
            dataset,
            new_steps: &new_steps,
            oracle: opts.oracle_estimates,
            burn_in: opts.burn_in,
        })?;
        if update.fallback {
            record.fallbacks += 1;
        }
        if let Some(e) = update.estimate {
            record.phase_estimates.push(e);
        }
        policy = update.next;
        let produced_stable = sys.is_stable(&policy);
        if phase + 1 == schedule.phases || !produced_stable {
            record.final_stable = produced_stable;
            record.final_policy = Some(policy.clone());
        }
        if !produced_stable {
            break;
        }
    }
    Ok(record)
}

/// Estimates `(H_i, G_i)` for the phase, from data or (in oracle mode) exactly.
pub(crate) fn phase_estimates(ctx: &PhaseContext<'_>) -> Result<(SymMatrix, SymMatrix)> {
    let sys = ctx.sys;
    if ctx.oracle {
        let pv = policy_value(sys, ctx.current)?;
        return Ok((pv.h.0, pv.q.matrix().clone()));
    }
    let eval = if ctx.eval.len() > ctx.burn_in {
        ctx.eval.skip(ctx.burn_in)
    } else {
        ctx.eval.clone()
    };
    let h = estimate_h(&eval, sys.w(), sys.m())?.estimate;
    let g = estimate_g(ctx.dataset, &h, sys.w(), sys.m(), sys.n())?.estimate;
    Ok((h, g))
}

/// Greedy policy against estimates: the running mean of all of them (FTL) or
/// only the most recent one (LSPI).
#[derive(Clone, Debug)]
pub(crate) struct GreedyLearner {
    average: bool,
    estimates: Vec<SymMatrix>,
    mean: Option<SymMatrix>,
}

impl GreedyLearner {
    pub fn follow_the_leader() -> Self {
        Self {
            average: true,
            estimates: Vec::new(),
            mean: None,
        }
    }

    pub fn most_recent() -> Self {
        Self {
            average: false,
            estimates: Vec::new(),
            mean: None,
        }
    }
}

impl PhaseLearner for GreedyLearner {
    fn update(&mut self, ctx: &PhaseContext<'_>) -> Result<PhaseUpdate> {
        let (h_hat, g_hat) = phase_estimates(ctx)?;
        self.estimates.push(g_hat.clone());
        let count = self.estimates.len() as f64;
        let mean = match &self.mean {
            None => g_hat.clone(),
            Some(prev) => SymMatrix::symmetrize(
                prev.as_matrix() + (g_hat.as_matrix() - prev.as_matrix()) / count,
            ),
        };
        self.mean = Some(mean.clone());
        let target = if self.average { mean } else { g_hat.clone() };
        let g_used = psd_project(&target, &ctx.sys.cost_floor());
        let next = greedy_policy(&QMatrix::new(g_used.clone(), ctx.sys.state_dim())?)?;
        Ok(PhaseUpdate {
            next,
            estimate: Some(PhaseEstimate {
                h_hat,
                g_hat,
                g_used,
            }),
            fallback: false,
        })
    }
}

/// MFLQ: policy iteration where each new policy is greedy with respect to the
/// average of all state-action estimates so far.
pub fn run_mflq(
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
        &mut GreedyLearner::follow_the_leader(),
    )
}

/// `α_T + β_T + γ_T` against a comparator policy.
#[derive(Clone, Debug, PartialEq)]
pub struct RegretDecomposition {
    /// `Σ_t (c_t - λ_{π_t})`.
    pub alpha: f64,
    /// `Σ_t (λ_{π_t} - λ_ref)`.
    pub beta: f64,
    /// `Σ_t (λ_ref - c_t^ref)` on an independent comparator rollout.
    pub gamma: f64,
    pub total: f64,
    /// `Σ_{s<=t} (c_s - c_s^ref)` for every step.
    pub cumulative: Vec<f64>,
    pub reference_costs: Vec<f64>,
}

/// Per-step costs of `reference` run from the origin for `steps` steps on the
/// comparator noise stream of `seed`.
pub fn reference_costs(
    sys: &LqSystem,
    reference: &LinearPolicy,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let traj = rollout(
        sys,
        reference,
        steps,
        &DVector::zeros(sys.state_dim()),
        &mut RunRng::reference(seed),
        f64::INFINITY,
    )?;
    Ok(traj.steps.iter().map(|s| s.cost).collect())
}

/// Regret against `reference`, which is rolled out for the same number of
/// steps from the origin on the seed's comparator noise stream.
pub fn regret_decomposition(
    record: &RunRecord,
    reference: &LinearPolicy,
    sys: &LqSystem,
) -> Result<RegretDecomposition> {
    let ref_value = policy_value(sys, reference)?;
    let steps = record.steps();
    let ref_costs = reference_costs(sys, reference, steps, record.seed)?;
    let lambdas: Vec<f64> = record
        .phase_true_values
        .iter()
        .map(|v| v.as_ref().map_or(f64::INFINITY, |v| v.lambda))
        .collect();
    let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
    let mut cumulative = Vec::with_capacity(steps);
    let mut running = 0.0;
    let mut reference_costs = Vec::with_capacity(steps);
    for t in 0..steps {
        let lam = lambdas[record.step_policy[t] as usize];
        if !lam.is_finite() {
            return Err(Error::Unstable(f64::INFINITY));
        }
        let c = record.per_step_costs[t];
        let c_ref = ref_costs[t];
        alpha += c - lam;
        beta += lam - ref_value.lambda;
        gamma += ref_value.lambda - c_ref;
        running += c - c_ref;
        cumulative.push(running);
        reference_costs.push(c_ref);
    }
    Ok(RegretDecomposition {
        alpha,
        beta,
        gamma,
        total: alpha + beta + gamma,
        cumulative,
        reference_costs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseDiagnostic {
    /// `||Ĝ_i - G_i||_F`, `None` if the phase has no estimate or is unstable.
    pub estimation_error: Option<f64>,
    pub within_threshold: Option<bool>,
    pub h_norm: Option<f64>,
    /// `||H_i|| <= 3 C_1`.
    pub h_bounded: Option<bool>,
    pub stable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub c1: f64,
    pub c_k: f64,
    pub c_h: f64,
    /// Largest tolerable per-phase error `(12 C_1 (sqrt n + C_K sqrt d)^2 S)^-1`.
    pub threshold: f64,
    pub c_x: f64,
    pub c_a: f64,
    pub max_state_norm: f64,
    pub max_action_norm: f64,
    pub phases: Vec<PhaseDiagnostic>,
}

impl StabilityReport {
    pub fn all_checks_pass(&self) -> bool {
        self.phases.iter().all(|p| {
            p.stable && p.within_threshold != Some(false) && p.h_bounded != Some(false)
        })
    }
}

/// Compares a run against the conditions under which all policies stay
/// stable: per-phase estimation error against the tolerance, `||H_i||`
/// against `3 ||H_1||`, closed-loop stability, and the state/action
/// magnitude constants.
pub fn stability_diagnostics(
    record: &RunRecord,
    sys: &LqSystem,
    phases: usize,
) -> Result<StabilityReport> {
    let first = record
        .phase_true_values
        .first()
        .and_then(|v| v.as_ref())
        .ok_or(Error::InsufficientData("run has no stable first phase"))?;
    let c1 = first.h.spectral_norm();
    let (n, d) = (sys.state_dim() as f64, sys.action_dim() as f64);
    let c_k = 2.0 * (3.0 * c1 * operator_norm(sys.b()) * operator_norm(sys.a()) + 1.0);
    let spread = libm::sqrt(n) + c_k * libm::sqrt(d);
    let threshold = 1.0 / (12.0 * c1 * spread * spread * phases.max(1) as f64);
    let c_h = 3.0 * c1;
    let (c_x, c_a) = state_bounds(c_h, sys.state_dim(), record.steps().max(1), DEFAULT_DELTA2)?;
    let diags = (0..record.phases())
        .map(|i| {
            let tv = record.phase_true_values[i].as_ref();
            let err = match (tv, record.phase_estimates.get(i)) {
                (Some(tv), Some(e)) => Some((e.g_hat.as_matrix() - tv.g.as_matrix()).norm()),
                _ => None,
            };
            let h_norm = tv.map(|v| v.h.spectral_norm());
            PhaseDiagnostic {
                estimation_error: err,
                within_threshold: err.map(|e| e <= threshold),
                h_norm,
                h_bounded: h_norm.map(|h| h <= c_h),
                stable: record.stability_flags[i],
            }
        })
        .collect();
    Ok(StabilityReport {
        c1,
        c_k,
        c_h,
        threshold,
        c_x,
        c_a,
        max_state_norm: record.max_state_norm,
        max_action_norm: record.max_action_norm,
        phases: diags,
    })
}

/// Gain difference in max-abs norm.
pub fn gain_distance(a: &LinearPolicy, b: &LinearPolicy) -> f64 {
    (a.gain() - b.gain()).amax()
}

/// Identity used by the FTL invariant tests.
pub fn arithmetic_mean(mats: &[SymMatrix]) -> Option<SymMatrix> {
    let first = mats.first()?;
    let mut acc = DMatrix::zeros(first.dim(), first.dim());
    for m in mats {
        acc += m.as_matrix();
    }
    Some(SymMatrix::symmetrize(acc / mats.len() as f64))
}
