//! Linear-quadratic environment: system definition, simulation, exact policy
//! evaluation and exploratory data collection.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, psd_project, solve_lyapunov, SymMatrix};
use crate::rng::{NormalSampler, RunRng};

/// Default state-norm threshold at which a rollout is declared divergent.
pub const DEFAULT_BLOWUP: f64 = 1e8;

/// Dynamics `x' = A x + B a + w`, `w ~ N(0, W)`, with stage cost
/// `x^T M x + a^T N a`.
#[derive(Clone, Debug, PartialEq)]
pub struct LqSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    m: SymMatrix,
    n: SymMatrix,
    w: SymMatrix,
    w_chol: DMatrix<f64>,
}

impl LqSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        m: SymMatrix,
        n: SymMatrix,
        w: SymMatrix,
    ) -> Result<Self> {
        let dim = a.nrows();
        if !a.is_square() {
            return Err(Error::NotSquare {
                rows: a.nrows(),
                cols: a.ncols(),
            });
        }
        let check = |context, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    context,
                    expected,
                    got,
                })
            }
        };
        check("B rows", dim, b.nrows())?;
        check("M", dim, m.dim())?;
        check("W", dim, w.dim())?;
        check("N", b.ncols(), n.dim())?;
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("system matrices"));
        }
        if !m.is_positive_definite() {
            return Err(Error::NotPositiveDefinite("M"));
        }
        if !n.is_positive_definite() {
            return Err(Error::NotPositiveDefinite("N"));
        }
        let w_chol = w.cholesky_factor().map_err(|_| Error::NotPositiveDefinite("W"))?;
        Ok(Self {
            a,
            b,
            m,
            n,
            w,
            w_chol,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn m(&self) -> &SymMatrix {
        &self.m
    }

    pub fn n(&self) -> &SymMatrix {
        &self.n
    }

    pub fn w(&self) -> &SymMatrix {
        &self.w
    }

    /// `blockdiag(M, N)`, the floor every Q matrix is projected onto.
    pub fn cost_floor(&self) -> SymMatrix {
        SymMatrix::block_diag(&self.m, &self.n)
    }

    /// Same dynamics and noise with the state cost replaced by `scale * M`.
    pub fn with_state_cost_scale(&self, scale: f64) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.b.clone(),
            self.m.scale(scale),
            self.n.clone(),
            self.w.clone(),
        )
    }

    pub fn cost(&self, x: &DVector<f64>, a: &DVector<f64>) -> f64 {
        self.m.quad(x) + self.n.quad(a)
    }

    /// One transition. The noise is `W^(1/2) g` with `g` standard normal from
    /// the run's process stream (zero in noiseless mode).
    pub fn step(
        &self,
        x: &DVector<f64>,
        a: &DVector<f64>,
        rng: &mut RunRng,
    ) -> Result<(DVector<f64>, f64)> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "state",
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        if a.len() != self.action_dim() {
            return Err(Error::DimensionMismatch {
                context: "action",
                expected: self.action_dim(),
                got: a.len(),
            });
        }
        Ok(self.step_unchecked(x, a, rng))
    }

    fn step_unchecked(
        &self,
        x: &DVector<f64>,
        a: &DVector<f64>,
        rng: &mut RunRng,
    ) -> (DVector<f64>, f64) {
        let mut next = &self.a * x + &self.b * a;
        if let Some(g) = rng.process_noise(self.state_dim()) {
            next += &self.w_chol * g;
        }
        (next, self.cost(x, a))
    }

    /// Closed-loop matrix `A - B K`.
    pub fn closed_loop(&self, policy: &LinearPolicy) -> DMatrix<f64> {
        &self.a - &self.b * &policy.k
    }

    pub fn is_stable(&self, policy: &LinearPolicy) -> bool {
        linalg::spectral_radius(&self.closed_loop(policy)) < 1.0
    }

    /// Optimal gain `K*` and Riccati solution `P*`.
    pub fn optimal_controller(&self) -> Result<(LinearPolicy, SymMatrix)> {
        let (k, p) = linalg::solve_riccati(&self.a, &self.b, &self.m, &self.n)?;
        Ok((LinearPolicy::new(k)?, p))
    }
}

/// Linear state feedback `a = -K x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPolicy {
    k: DMatrix<f64>,
}

impl LinearPolicy {
    pub fn new(k: DMatrix<f64>) -> Result<Self> {
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy gain"));
        }
        Ok(Self { k })
    }

    pub fn zeros(action_dim: usize, state_dim: usize) -> Self {
        Self {
            k: DMatrix::zeros(action_dim, state_dim),
        }
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn act(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.k * x)
    }
}

/// State-action value matrix `G`, `Q(x, a) = (x; a)^T G (x; a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QMatrix {
    g: SymMatrix,
    state_dim: usize,
}

impl QMatrix {
    pub fn new(g: SymMatrix, state_dim: usize) -> Result<Self> {
        if state_dim > g.dim() {
            return Err(Error::DimensionMismatch {
                context: "Q matrix state block",
                expected: g.dim(),
                got: state_dim,
            });
        }
        Ok(Self { g, state_dim })
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.g
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.g.dim() - self.state_dim
    }

    pub fn g11(&self) -> DMatrix<f64> {
        let n = self.state_dim;
        self.g.view((0, 0), (n, n)).into_owned()
    }

    pub fn g12(&self) -> DMatrix<f64> {
        let (n, d) = (self.state_dim, self.action_dim());
        self.g.view((0, n), (n, d)).into_owned()
    }

    pub fn g21(&self) -> DMatrix<f64> {
        let (n, d) = (self.state_dim, self.action_dim());
        self.g.view((n, 0), (d, n)).into_owned()
    }

    pub fn g22(&self) -> DMatrix<f64> {
        let (n, d) = (self.state_dim, self.action_dim());
        self.g.view((n, n), (d, d)).into_owned()
    }

    pub fn project(&self, floor: &SymMatrix) -> QMatrix {
        Self {
            g: psd_project(&self.g, floor),
            state_dim: self.state_dim,
        }
    }

    /// Value matrix of `policy` implied by this Q: `[I -K^T] G [I; -K]`.
    pub fn value_matrix_for(&self, policy: &LinearPolicy) -> ValueMatrix {
        let n = self.state_dim;
        let mut s = DMatrix::zeros(self.g.dim(), n);
        s.view_mut((0, 0), (n, n)).fill_with_identity();
        s.view_mut((n, 0), (self.action_dim(), n))
            .copy_from(&(-policy.gain()));
        ValueMatrix(SymMatrix::symmetrize(
            s.transpose() * self.g.as_matrix() * s,
        ))
    }
}

/// Value matrix `H`, `V(x) = x^T H x`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueMatrix(pub SymMatrix);

impl ValueMatrix {
    pub fn matrix(&self) -> &SymMatrix {
        &self.0
    }
}

/// Exact evaluation of a stable linear policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyValue {
    pub q: QMatrix,
    pub h: ValueMatrix,
    /// Average cost `tr(H W)`.
    pub lambda: f64,
}

/// Solves `H = Γ^T H Γ + M + K^T N K`, `Γ = A - B K`, then lifts to
/// `G = [A B]^T H [A B] + blockdiag(M, N)` and `λ = tr(H W)`.
pub fn policy_value(sys: &LqSystem, policy: &LinearPolicy) -> Result<PolicyValue> {
    let gamma = sys.closed_loop(policy);
    let k = policy.gain();
    let stage = SymMatrix::symmetrize(sys.m.as_matrix() + k.transpose() * sys.n.as_matrix() * k);
    let h = solve_lyapunov(&gamma.transpose(), &stage)?;
    let (n, d) = (sys.state_dim(), sys.action_dim());
    let mut ab = DMatrix::zeros(n, n + d);
    ab.view_mut((0, 0), (n, n)).copy_from(&sys.a);
    ab.view_mut((0, n), (n, d)).copy_from(&sys.b);
    let g = SymMatrix::symmetrize(
        ab.transpose() * h.as_matrix() * &ab + sys.cost_floor().as_matrix(),
    );
    let lambda = h.frobenius_inner(&sys.w);
    Ok(PolicyValue {
        q: QMatrix { g, state_dim: n },
        h: ValueMatrix(h),
        lambda,
    })
}

/// Greedy gain `K = G22^-1 G21`; fails if `G22` is not positive definite.
pub fn greedy_policy(q: &QMatrix) -> Result<LinearPolicy> {
    let chol = q.g22().cholesky().ok_or(Error::IllConditioned)?;
    LinearPolicy::new(chol.solve(&q.g21())).map_err(|_| Error::IllConditioned)
}

/// Stationary state covariance `Σ = Γ Σ Γ^T + W`.
pub fn stationary_covariance(sys: &LqSystem, policy: &LinearPolicy) -> Result<SymMatrix> {
    solve_lyapunov(&sys.closed_loop(policy), &sys.w)
}

/// `max_x |x^T H x - c(x, -Kx) + λ - (x^T Γ^T H Γ x + tr(H W))|`, the
/// average-cost Bellman residual with the expectation taken analytically.
pub fn bellman_residual(
    sys: &LqSystem,
    policy: &LinearPolicy,
    h: &SymMatrix,
    lambda: f64,
    test_states: &[DVector<f64>],
) -> f64 {
    let gamma = sys.closed_loop(policy);
    let noise_term = h.frobenius_inner(&sys.w);
    test_states
        .iter()
        .map(|x| {
            let a = policy.act(x);
            let next = &gamma * x;
            (h.quad(x) - sys.cost(x, &a) + lambda - (h.quad(&next) + noise_term)).abs()
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub x: DVector<f64>,
    pub a: DVector<f64>,
    pub cost: f64,
    pub x_next: DVector<f64>,
    pub exploratory: bool,
}

/// Contiguous sequence of transitions; `steps[t].x_next == steps[t + 1].x`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
    /// Index of the step whose successor state exceeded the blow-up
    /// threshold, if any. The offending step is included.
    pub diverged_at: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.cost).sum()
    }

    pub fn final_state(&self) -> Option<&DVector<f64>> {
        self.steps.last().map(|s| &s.x_next)
    }

    /// The trajectory without its first `k` steps.
    pub fn skip(&self, k: usize) -> Trajectory {
        Trajectory {
            steps: self.steps.iter().skip(k).cloned().collect(),
            diverged_at: self.diverged_at.and_then(|t| t.checked_sub(k)),
        }
    }

    pub fn append(&mut self, other: Trajectory) {
        let offset = self.steps.len();
        if self.diverged_at.is_none() {
            self.diverged_at = other.diverged_at.map(|t| t + offset);
        }
        self.steps.extend(other.steps);
    }
}

/// Exploratory tuples `(x, a, x+)` with their observed cost.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransitionDataset {
    pub tuples: Vec<Transition>,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }
}

/// Runs `a_t = -K x_t` for `steps` steps from `x0`. Stops early (and records
/// the step) if `||x_{t+1}||` exceeds `blowup`.
pub fn rollout(
    sys: &LqSystem,
    policy: &LinearPolicy,
    steps: usize,
    x0: &DVector<f64>,
    rng: &mut RunRng,
    blowup: f64,
) -> Result<Trajectory> {
    check_policy(sys, policy)?;
    if x0.len() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "initial state",
            expected: sys.state_dim(),
            got: x0.len(),
        });
    }
    let mut traj = Trajectory {
        steps: Vec::with_capacity(steps),
        diverged_at: None,
    };
    let mut x = x0.clone();
    for t in 0..steps {
        let a = policy.act(&x);
        let (next, cost) = sys.step_unchecked(&x, &a, rng);
        let blown = !(next.norm() <= blowup);
        traj.steps.push(Transition {
            x,
            a,
            cost,
            x_next: next.clone(),
            exploratory: false,
        });
        if blown {
            traj.diverged_at = Some(t);
            break;
        }
        x = next;
    }
    Ok(traj)
}

fn check_policy(sys: &LqSystem, policy: &LinearPolicy) -> Result<()> {
    let k = policy.gain();
    if k.nrows() != sys.action_dim() || k.ncols() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "policy gain",
            expected: sys.action_dim() * sys.state_dim(),
            got: k.nrows() * k.ncols(),
        });
    }
    Ok(())
}

/// Output of [`collect_data`]: the exploratory tuples plus every step taken
/// (needed for cost accounting).
#[derive(Clone, Debug, Default)]
pub struct Collected {
    pub dataset: TransitionDataset,
    pub trajectory: Trajectory,
}

/// Repeats `floor(budget / period)` times: follow the policy for
/// `period - 1` steps, then play `a ~ N(0, Σ_a)` and record `(x, a, x+)`.
/// The state is carried over between repetitions. With `include_all`, every
/// transition is flagged exploratory and recorded.
#[allow(clippy::too_many_arguments)]
pub fn collect_data(
    sys: &LqSystem,
    policy: &LinearPolicy,
    budget: usize,
    period: usize,
    action_cov_chol: &DMatrix<f64>,
    x0: &DVector<f64>,
    rng: &mut RunRng,
    include_all: bool,
    blowup: f64,
) -> Result<Collected> {
    check_policy(sys, policy)?;
    if period == 0 {
        return Err(Error::InvalidParameter {
            name: "period",
            reason: "exploration period must be at least 1",
        });
    }
    if action_cov_chol.nrows() != sys.action_dim() {
        return Err(Error::DimensionMismatch {
            context: "action covariance",
            expected: sys.action_dim(),
            got: action_cov_chol.nrows(),
        });
    }
    let mut out = Collected::default();
    let mut x = x0.clone();
    'outer: for _ in 0..budget / period {
        for j in 0..period {
            let explore = j + 1 == period;
            let a = if explore {
                exploratory_action(rng.explore(), action_cov_chol)
            } else {
                policy.act(&x)
            };
            let (next, cost) = sys.step_unchecked(&x, &a, rng);
            let blown = !(next.norm() <= blowup);
            let step = Transition {
                x,
                a,
                cost,
                x_next: next.clone(),
                exploratory: explore || include_all,
            };
            if step.exploratory {
                out.dataset.tuples.push(step.clone());
            }
            out.trajectory.steps.push(step);
            if blown {
                out.trajectory.diverged_at = Some(out.trajectory.len() - 1);
                break 'outer;
            }
            x = next;
        }
    }
    Ok(out)
}

pub fn exploratory_action(sampler: &mut NormalSampler, chol: &DMatrix<f64>) -> DVector<f64> {
    sampler.correlated(chol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn scalar(a: f64, b: f64) -> LqSystem {
        LqSystem::new(
            dmatrix![a],
            dmatrix![b],
            SymMatrix::identity(1),
            SymMatrix::identity(1),
            SymMatrix::identity(1),
        )
        .unwrap()
    }

    fn ident2(m: f64, n: f64) -> LqSystem {
        LqSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            SymMatrix::from_diagonal(&[m, 2.0]),
            SymMatrix::from_diagonal(&[3.0, n]),
            SymMatrix::identity(2),
        )
        .unwrap()
    }

    #[test]
    fn noiseless_step_arithmetic() {
        let sys = ident2(1.5, 4.0);
        let mut rng = RunRng::noiseless(0);
        let (next, cost) = sys.step(&dvector![1.0, 0.0], &dvector![0.0, 1.0], &mut rng).unwrap();
        assert_eq!(next, dvector![1.0, 1.0]);
        assert_eq!(cost, 1.5 + 4.0);
    }

    #[test]
    fn zero_state_zero_cost() {
        let sys = ident2(1.0, 1.0);
        let mut rng = RunRng::new(0);
        let (_, cost) = sys.step(&dvector![0.0, 0.0], &dvector![0.0, 0.0], &mut rng).unwrap();
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn step_dimension_mismatch() {
        let sys = ident2(1.0, 1.0);
        let mut rng = RunRng::new(0);
        assert!(sys.step(&dvector![0.0], &dvector![0.0, 0.0], &mut rng).is_err());
    }

    #[test]
    fn system_validation() {
        let bad_m = LqSystem::new(
            dmatrix![1.0],
            dmatrix![1.0],
            SymMatrix::from_diagonal(&[-1.0]),
            SymMatrix::identity(1),
            SymMatrix::identity(1),
        );
        assert_eq!(bad_m, Err(Error::NotPositiveDefinite("M")));
    }

    #[test]
    fn noiseless_rollout_from_origin_stays_zero() {
        let sys = scalar(0.9, 1.0);
        let pol = LinearPolicy::new(dmatrix![0.3]).unwrap();
        let mut rng = RunRng::noiseless(3);
        let traj = rollout(&sys, &pol, 50, &dvector![0.0], &mut rng, DEFAULT_BLOWUP).unwrap();
        assert_eq!(traj.len(), 50);
        assert_eq!(traj.total_cost(), 0.0);
        assert!(traj.steps.iter().all(|s| s.x_next[0] == 0.0));
    }

    #[test]
    fn unstable_open_loop_diverges() {
        let sys = scalar(2.0, 0.0);
        let pol = LinearPolicy::new(dmatrix![5.0]).unwrap();
        let mut rng = RunRng::noiseless(0);
        let traj = rollout(&sys, &pol, 1000, &dvector![1.0], &mut rng, DEFAULT_BLOWUP).unwrap();
        // |x_{t+1}| = 2^{t+1} first exceeds 1e8 at t + 1 = 27.
        assert_eq!(traj.diverged_at, Some(26));
        assert_eq!(traj.len(), 27);
    }

    #[test]
    fn rollout_chains_states() {
        let sys = scalar(0.9, 1.0);
        let pol = LinearPolicy::new(dmatrix![0.2]).unwrap();
        let mut rng = RunRng::new(11);
        let traj = rollout(&sys, &pol, 100, &dvector![0.5], &mut rng, DEFAULT_BLOWUP).unwrap();
        assert_eq!(traj.len(), 100);
        for w in traj.steps.windows(2) {
            assert_eq!(w[0].x_next, w[1].x);
        }
        for s in &traj.steps {
            assert_eq!(s.cost, s.x[0] * s.x[0] + s.a[0] * s.a[0]);
        }
    }

    #[test]
    fn policy_value_zero_dynamics() {
        let sys = LqSystem::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            SymMatrix::from_diagonal(&[2.0, 3.0]),
            SymMatrix::identity(1),
            SymMatrix::from_diagonal(&[0.5, 4.0]),
        )
        .unwrap();
        let pv = policy_value(&sys, &LinearPolicy::zeros(1, 2)).unwrap();
        assert_relative_eq!(pv.h.0.as_matrix(), sys.m().as_matrix(), epsilon = 1e-14);
        assert_relative_eq!(pv.lambda, 2.0 * 0.5 + 3.0 * 4.0, epsilon = 1e-12);
    }

    #[test]
    fn policy_value_scalar_series() {
        let (a, b, k) = (1.2, 0.8, 0.9);
        let sys = scalar(a, b);
        let pv = policy_value(&sys, &LinearPolicy::new(dmatrix![k]).unwrap()).unwrap();
        let gamma: f64 = a - b * k;
        assert_relative_eq!(pv.h.0[(0, 0)], (1.0 + k * k) / (1.0 - gamma * gamma), epsilon = 1e-12);
        assert_relative_eq!(pv.lambda, pv.h.0[(0, 0)], epsilon = 1e-12);
    }

    #[test]
    fn policy_value_rejects_unstable() {
        let sys = scalar(1.2, 1.0);
        assert!(matches!(
            policy_value(&sys, &LinearPolicy::zeros(1, 1)),
            Err(Error::Unstable(_))
        ));
    }

    #[test]
    fn greedy_cases() {
        let floor = QMatrix::new(SymMatrix::from_diagonal(&[1.0, 2.0, 3.0]), 2).unwrap();
        assert_eq!(greedy_policy(&floor).unwrap().gain(), &DMatrix::zeros(1, 2));
        let g = QMatrix::new(SymMatrix::new(dmatrix![2.0, 1.0; 1.0, 2.0]).unwrap(), 1).unwrap();
        assert_relative_eq!(greedy_policy(&g).unwrap().gain()[(0, 0)], 0.5, epsilon = 1e-14);
        let scaled = QMatrix::new(g.matrix().scale(7.5), 1).unwrap();
        assert_relative_eq!(
            greedy_policy(&scaled).unwrap().gain(),
            greedy_policy(&g).unwrap().gain(),
            epsilon = 1e-14
        );
        let indefinite =
            QMatrix::new(SymMatrix::new(dmatrix![2.0, 1.0; 1.0, -1.0]).unwrap(), 1).unwrap();
        assert_eq!(greedy_policy(&indefinite), Err(Error::IllConditioned));
    }

    #[test]
    fn stationary_covariance_cases() {
        let sys = LqSystem::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            SymMatrix::identity(2),
            SymMatrix::identity(1),
            SymMatrix::from_diagonal(&[0.5, 2.0]),
        )
        .unwrap();
        let cov = stationary_covariance(&sys, &LinearPolicy::zeros(1, 2)).unwrap();
        assert_relative_eq!(cov.as_matrix(), sys.w().as_matrix(), epsilon = 1e-14);
        let s = scalar(0.5, 1.0);
        let cov = stationary_covariance(&s, &LinearPolicy::zeros(1, 1)).unwrap();
        assert_relative_eq!(cov[(0, 0)], 4.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn bellman_residual_cases() {
        let sys = scalar(1.2, 0.8);
        let pol = LinearPolicy::new(dmatrix![0.9]).unwrap();
        let pv = policy_value(&sys, &pol).unwrap();
        let states: Vec<_> = (-5..=5).map(|i| dvector![i as f64 * 0.7]).collect();
        assert!(bellman_residual(&sys, &pol, &pv.h.0, pv.lambda, &states) < 1e-10);
        let bumped = pv.h.0.add(&SymMatrix::identity(1));
        // Scalar expansion: residual(x) = |x^2 (1 - γ^2) - 1| with λ unchanged.
        let gamma: f64 = 1.2 - 0.8 * 0.9;
        let expect = states
            .iter()
            .map(|x| (x[0] * x[0] * (1.0 - gamma * gamma) - 1.0).abs())
            .fold(0.0, f64::max);
        assert_relative_eq!(
            bellman_residual(&sys, &pol, &bumped, pv.lambda, &states),
            expect,
            epsilon = 1e-10
        );
    }

    #[test]
    fn collect_data_counts() {
        let sys = ident2(1.0, 1.0);
        let pol = LinearPolicy::new(DMatrix::identity(2, 2) * 0.5).unwrap();
        let chol = DMatrix::identity(2, 2);
        let mut rng = RunRng::new(1);
        let c = collect_data(&sys, &pol, 10, 5, &chol, &dvector![0.0, 0.0], &mut rng, false, DEFAULT_BLOWUP)
            .unwrap();
        assert_eq!(c.dataset.len(), 2);
        assert_eq!(c.trajectory.len(), 10);
        assert!(c.dataset.tuples.iter().all(|t| t.exploratory));
        let mut rng = RunRng::new(1);
        let all = collect_data(&sys, &pol, 10, 5, &chol, &dvector![0.0, 0.0], &mut rng, true, DEFAULT_BLOWUP)
            .unwrap();
        assert_eq!(all.dataset.len(), 10);
    }

    #[test]
    fn closed_loop_value_dominates_state_cost() {
        let sys = scalar(1.2, 1.0);
        let pv = policy_value(&sys, &LinearPolicy::new(dmatrix![0.7]).unwrap()).unwrap();
        assert!(pv.h.0[(0, 0)] >= 1.0);
        let h_from_q = pv.q.value_matrix_for(&LinearPolicy::new(dmatrix![0.7]).unwrap());
        assert_relative_eq!(h_from_q.0.as_matrix(), pv.h.0.as_matrix(), epsilon = 1e-10);
    }
}
