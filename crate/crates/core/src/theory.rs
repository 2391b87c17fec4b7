//! Computable forms of the concentration, mixing and moment bounds behind
//! the estimator analysis, with Monte-Carlo estimators to check them against.

use alloc::vec::Vec;
use core::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    hinf_resolvent_norm, solve_lyapunov, spectral_radius, svec, sym_mat, SymMatrix, VecImage,
};
use crate::rng::NormalSampler;

/// First ChaCha stream used for per-trial generators, clear of the run
/// streams.
pub const TRIAL_STREAM_BASE: u64 = 1 << 16;
/// Length of the pre-run used to center observables.
pub const CENTERING_STEPS: usize = 1_000_000;
/// Small-ball level and probability floor for quadratic difference features.
pub const SMALL_BALL_OMEGA: f64 = 1.0;
pub const SMALL_BALL_PROBABILITY: f64 = 1.0 / 324.0;

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonteCarlo {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl MonteCarlo {
    fn from_sums(sum: f64, sum_sq: f64, samples: usize) -> Self {
        let k = samples as f64;
        let mean = sum / k;
        let var = if samples > 1 {
            ((sum_sq - k * mean * mean) / (k - 1.0)).max(0.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_error: libm::sqrt(var / k),
            samples,
        }
    }

    /// `|mean - target| <= z * std_error`.
    pub fn within(&self, target: f64, z: f64) -> bool {
        (self.mean - target).abs() <= z * self.std_error
    }
}

/// Geometric β-mixing envelope of `x_{t+1} = Γ x_t + w_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingBoundSpec {
    gamma: DMatrix<f64>,
    alpha: f64,
    /// `Σ = Σ_{s>=1} Γ^s Γ^sᵀ`.
    sigma: SymMatrix,
    resolvent: f64,
}

impl MixingBoundSpec {
    /// Requires `ρ(Γ) < α < 1`.
    pub fn new(gamma: DMatrix<f64>, alpha: f64) -> Result<Self> {
        if gamma.nrows() != gamma.ncols() {
            return Err(Error::NotSquare {
                rows: gamma.nrows(),
                cols: gamma.ncols(),
            });
        }
        let rho = spectral_radius(&gamma);
        if !(alpha > rho && alpha < 1.0) {
            return Err(Error::InvalidParameter {
                name: "alpha",
                reason: "must lie strictly between the spectral radius and 1",
            });
        }
        let ggt = SymMatrix::symmetrize(&gamma * gamma.transpose());
        let sigma = solve_lyapunov(&gamma, &ggt)?;
        let resolvent = hinf_resolvent_norm(&gamma.scale(1.0 / alpha))?;
        Ok(Self {
            gamma,
            alpha,
            sigma,
            resolvent,
        })
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.gamma.nrows()
    }

    /// Solution of `Σ = Γ Σ Γᵀ + Γ Γᵀ`; not the stationary covariance.
    pub fn mixing_covariance(&self) -> &SymMatrix {
        &self.sigma
    }

    /// `||(zI - Γ/α)^-1||` on the unit circle.
    pub fn resolvent_norm(&self) -> f64 {
        self.resolvent
    }

    /// `β̄`, the lag-zero value of the envelope.
    pub fn beta_bar(&self) -> f64 {
        beta_mixing_bound(self, 0)
    }

    /// Decay rate `-ln α` of the envelope.
    pub fn rate(&self) -> f64 {
        -libm::log(self.alpha)
    }
}

/// `β_k <= (||R_{Γ/α}|| / 2) sqrt(tr Σ + d / (1 - α²)) α^k`.
pub fn beta_mixing_bound(spec: &MixingBoundSpec, k: u32) -> f64 {
    let d = spec.dim() as f64;
    let a = spec.alpha;
    0.5 * spec.resolvent
        * libm::sqrt(spec.sigma.trace() + d / (1.0 - a * a))
        * libm::pow(a, k as f64)
}

/// Alternating head and tail blocks of length `b` over `0..n`, followed by a
/// residual shorter than `2b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPartition {
    pub n: usize,
    pub b: usize,
    pub m: usize,
    pub heads: Vec<Range<usize>>,
    pub tails: Vec<Range<usize>>,
    pub residual: Range<usize>,
}

/// Zero-based version of the head/tail/residual split: head `j` covers
/// `2jb..(2j+1)b`, tail `j` covers `(2j+1)b..(2j+2)b`.
pub fn block_partition(n: usize, b: usize) -> Result<BlockPartition> {
    if b == 0 || 2 * b > n {
        return Err(Error::InvalidParameter {
            name: "b",
            reason: "block length must satisfy 1 <= b <= n/2",
        });
    }
    let m = n / (2 * b);
    let heads = (0..m).map(|j| 2 * j * b..(2 * j + 1) * b).collect();
    let tails = (0..m).map(|j| (2 * j + 1) * b..(2 * j + 2) * b).collect();
    Ok(BlockPartition {
        n,
        b,
        m,
        heads,
        tails,
        residual: 2 * m * b..n,
    })
}

/// Block length `b = ceil(ln(2β̄n/δ) / rate)` and the partial-sum bound
/// `2 ln(2β̄n/δ) (sqrt(n/rate) + 1/rate)`, which holds for sums of `n` terms
/// in `[-1, 1]` with probability at least `1 - 4δ`.
pub fn partial_sum_bound(n: usize, rate: f64, beta_bar: f64, delta: f64) -> Result<(usize, f64)> {
    if !(rate > 0.0) {
        return Err(Error::InvalidParameter {
            name: "rate",
            reason: "must be positive",
        });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter {
            name: "delta",
            reason: "must lie in (0, 1)",
        });
    }
    if !(2.0 * beta_bar * n as f64 >= 1.0) {
        return Err(Error::InvalidParameter {
            name: "beta_bar",
            reason: "requires 2 * beta_bar * n >= 1",
        });
    }
    let log = libm::log(2.0 * beta_bar * n as f64 / delta);
    let b = (libm::ceil(log / rate) as usize).max(1);
    let s = 2.0 * log * (libm::sqrt(n as f64 / rate) + 1.0 / rate);
    Ok((b, s))
}

/// Outcome of [`verify_block_bound`].
#[derive(Clone, Debug, PartialEq)]
pub struct BlockBoundCheck {
    pub violation_rate: f64,
    pub trials: usize,
    pub s_bound: f64,
    pub b: usize,
    pub beta_bar: f64,
    /// Envelope base `(1 + ρ(Γ)) / 2`.
    pub alpha: f64,
    /// Stationary mean of the observable subtracted before summing.
    pub center: f64,
}

/// Simulates `trials` stationary runs of `x_{t+1} = Γ x_t + w_t` (`w ~ N(0, I)`)
/// of length `n` and reports how often the centered partial sum of `f`
/// exceeds the bound from [`partial_sum_bound`]. The envelope base is
/// `(1 + ρ(Γ)) / 2`. Trial `i` draws from stream `TRIAL_STREAM_BASE + i`.
pub fn verify_block_bound<F>(
    gamma: &DMatrix<f64>,
    f: F,
    n: usize,
    delta: f64,
    trials: usize,
    seed: u64,
) -> Result<BlockBoundCheck>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let alpha = 0.5 * (1.0 + spectral_radius(gamma));
    let spec = MixingBoundSpec::new(gamma.clone(), alpha)?;
    let beta_bar = spec.beta_bar();
    let (b, s_bound) = partial_sum_bound(n, spec.rate(), beta_bar, delta)?;
    let dim = gamma.nrows();
    let stationary = solve_lyapunov(gamma, &SymMatrix::identity(dim))?;
    let root = stationary.psd_sqrt();

    let mut pre = NormalSampler::new(seed, TRIAL_STREAM_BASE - 1);
    let mut x = root.as_matrix() * pre.vector(dim);
    let mut acc = 0.0;
    for _ in 0..CENTERING_STEPS {
        acc += f(&x);
        x = gamma * &x + pre.vector(dim);
    }
    let center = acc / CENTERING_STEPS as f64;

    let mut violations = 0usize;
    for trial in 0..trials {
        let mut s = NormalSampler::new(seed, TRIAL_STREAM_BASE + trial as u64);
        let mut x = root.as_matrix() * s.vector(dim);
        let mut sum = 0.0;
        for _ in 0..n {
            sum += f(&x) - center;
            x = gamma * &x + s.vector(dim);
        }
        if sum > s_bound {
            violations += 1;
        }
    }
    Ok(BlockBoundCheck {
        violation_rate: if trials == 0 {
            0.0
        } else {
            violations as f64 / trials as f64
        },
        trials,
        s_bound,
        b,
        beta_bar,
        alpha,
        center,
    })
}

/// `E[gᵀFg · gᵀF'g] = 2 <F, F'> + tr F tr F'` for `g ~ N(0, I)`.
pub fn gaussian_fourth_moment(f: &SymMatrix, f2: &SymMatrix) -> Result<f64> {
    if f.dim() != f2.dim() {
        return Err(Error::DimensionMismatch {
            context: "fourth moment",
            expected: f.dim(),
            got: f2.dim(),
        });
    }
    Ok(2.0 * f.frobenius_inner(f2) + f.trace() * f2.trace())
}

pub fn gaussian_fourth_moment_mc(
    f: &SymMatrix,
    f2: &SymMatrix,
    samples: usize,
    sampler: &mut NormalSampler,
) -> MonteCarlo {
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let g = sampler.vector(f.dim());
        let v = f.quad(&g) * f2.quad(&g);
        s += v;
        s2 += v * v;
    }
    MonteCarlo::from_sums(s, s2, samples)
}

/// Checked inputs of the quadratic small-ball statistic
/// `f_v = x'ᵀVx' - xᵀVx` with `x = Σ^(1/2) g`, `x' = Γx + g'`.
#[derive(Clone, Debug)]
struct SmallBall {
    root: SymMatrix,
    gamma: DMatrix<f64>,
    v: SymMatrix,
}

impl SmallBall {
    fn new(sigma: &SymMatrix, gamma: &DMatrix<f64>, v: &DVector<f64>) -> Result<Self> {
        let n = sigma.dim();
        if gamma.nrows() != n || gamma.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "small-ball dynamics",
                expected: n,
                got: gamma.nrows(),
            });
        }
        let v = VecImage::from_dvector(v.clone())?;
        if v.source_dim() != n {
            return Err(Error::DimensionMismatch {
                context: "small-ball direction",
                expected: n * n,
                got: v.as_vector().len(),
            });
        }
        Ok(Self {
            root: sigma.psd_sqrt(),
            gamma: gamma.clone(),
            v: sym_mat(&v),
        })
    }

    fn sample(&self, s: &mut NormalSampler) -> f64 {
        let n = self.root.dim();
        let x = self.root.as_matrix() * s.vector(n);
        let xn = &self.gamma * &x + s.vector(n);
        self.v.quad(&xn) - self.v.quad(&x)
    }
}

/// Closed form of `E f_v²`:
/// `(tr F + tr V)² + 2||F||² + 2||V||² + 4||Σ^(1/2) Γᵀ V||²` with
/// `F = Σ^(1/2)(ΓᵀVΓ - V)Σ^(1/2)` and `V = mat(v)`.
pub fn small_ball_second_moment(
    sigma: &SymMatrix,
    gamma: &DMatrix<f64>,
    v: &DVector<f64>,
) -> Result<f64> {
    let sb = SmallBall::new(sigma, gamma, v)?;
    let r = sb.root.as_matrix();
    let v = sb.v.as_matrix();
    let f = r * (gamma.transpose() * v * gamma - v) * r;
    let cross = r * gamma.transpose() * v;
    let t = f.trace() + v.trace();
    Ok(t * t + 2.0 * f.norm_squared() + 2.0 * v.norm_squared() + 4.0 * cross.norm_squared())
}

pub fn small_ball_second_moment_mc(
    sigma: &SymMatrix,
    gamma: &DMatrix<f64>,
    v: &DVector<f64>,
    samples: usize,
    sampler: &mut NormalSampler,
) -> Result<MonteCarlo> {
    let sb = SmallBall::new(sigma, gamma, v)?;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let f = sb.sample(sampler);
        s += f * f;
        s2 += f * f * f * f;
    }
    Ok(MonteCarlo::from_sums(s, s2, samples))
}

/// Monte-Carlo estimate of `P(|f_v| >= omega)`.
pub fn small_ball_probability(
    sigma: &SymMatrix,
    gamma: &DMatrix<f64>,
    v: &DVector<f64>,
    omega: f64,
    samples: usize,
    sampler: &mut NormalSampler,
) -> Result<MonteCarlo> {
    let sb = SmallBall::new(sigma, gamma, v)?;
    let mut hits = 0usize;
    for _ in 0..samples {
        if sb.sample(sampler).abs() >= omega {
            hits += 1;
        }
    }
    let h = hits as f64;
    Ok(MonteCarlo::from_sums(h, h, samples))
}

/// Uniformly random unit direction in the symmetric subspace, as `vect(V)`
/// with `||V||_F = 1`.
pub fn random_symmetric_direction(n: usize, sampler: &mut NormalSampler) -> DVector<f64> {
    let g = DMatrix::from_column_slice(n, n, sampler.vector(n * n).as_slice());
    let v = (&g + g.transpose()) * 0.5;
    let v = &v / v.norm();
    DVector::from_iterator(n * n, v.transpose().iter().copied())
}

/// Smallest eigenvalue of `(1/τ) Σ x_k x_kᵀ` next to the floor `ω² P(ω) / 8`.
pub fn gram_floor_check(features: &[DVector<f64>], omega: f64, p_omega: f64) -> Result<(f64, f64)> {
    let first = features
        .first()
        .ok_or(Error::InsufficientData("no features"))?;
    let p = first.len();
    let mut gram = DMatrix::zeros(p, p);
    for x in features {
        if x.len() != p {
            return Err(Error::DimensionMismatch {
                context: "feature",
                expected: p,
                got: x.len(),
            });
        }
        gram.ger(1.0, x, x, 1.0);
    }
    let gram = SymMatrix::symmetrize(gram / features.len() as f64);
    Ok((gram.min_eigenvalue(), omega * omega * p_omega / 8.0))
}

/// Features `svec(x_{t+1} x_{t+1}ᵀ - x_t x_tᵀ)` of a state sequence.
pub fn difference_features(states: &[DVector<f64>]) -> Vec<DVector<f64>> {
    states
        .windows(2)
        .map(|w| svec(&SymMatrix::symmetrize(&w[1] * w[1].transpose() - &w[0] * w[0].transpose())))
        .collect()
}

/// Bounds `(C_X, C_A)` on state and action norms:
/// `C_X = sqrt(2n ln(Tn/δ₂)) / (1 - sqrt(1 - (2 C_H)^-2))`, `C_A = sqrt(C_H) C_X`.
pub fn state_bounds(c_h: f64, n: usize, horizon: usize, delta2: f64) -> Result<(f64, f64)> {
    if !(c_h > 0.5) {
        return Err(Error::InvalidParameter {
            name: "C_H",
            reason: "must exceed 1/2",
        });
    }
    if !(delta2 > 0.0 && delta2 < 1.0) {
        return Err(Error::InvalidParameter {
            name: "delta2",
            reason: "must lie in (0, 1)",
        });
    }
    let log = libm::log(horizon as f64 * n as f64 / delta2);
    let num = libm::sqrt(2.0 * n as f64 * log.max(0.0));
    let inv = 1.0 / (2.0 * c_h);
    let c_x = num / (1.0 - libm::sqrt(1.0 - inv * inv));
    Ok((c_x, libm::sqrt(c_h) * c_x))
}

/// `12 tr(Σ^(1/2))²`, the second-moment bound on difference features in
/// its square-root form. Sampling shows it fails once `Σ` is large; see
/// [`upper_moment_bound_trace`].
pub fn upper_moment_bound(sigma: &SymMatrix) -> f64 {
    let t = sigma.psd_sqrt().trace();
    12.0 * t * t
}

/// `12 (tr Σ)²`, which follows from `E ||xxᵀ||_F² = 2||Σ||_F² + (tr Σ)²`
/// and always dominates `E ||x'x'ᵀ - xxᵀ||_F²`.
pub fn upper_moment_bound_trace(sigma: &SymMatrix) -> f64 {
    let t = sigma.trace();
    12.0 * t * t
}

/// `E ||x'x'ᵀ - xxᵀ||_F²` for `x ~ N(0, Σ)` stationary under
/// `x' = Γx + w`, `w ~ N(0, I)`.
pub fn upper_moment_mc(
    gamma: &DMatrix<f64>,
    samples: usize,
    sampler: &mut NormalSampler,
) -> Result<(SymMatrix, MonteCarlo)> {
    let n = gamma.nrows();
    let sigma = solve_lyapunov(gamma, &SymMatrix::identity(n))?;
    let root = sigma.psd_sqrt();
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let x = root.as_matrix() * sampler.vector(n);
        let xn = gamma * &x + sampler.vector(n);
        let d = (&xn * xn.transpose() - &x * x.transpose()).norm_squared();
        s += d;
        s2 += d * d;
    }
    Ok((sigma, MonteCarlo::from_sums(s, s2, samples)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    #[test]
    fn mixing_bound_zero_dynamics() {
        let spec = MixingBoundSpec::new(DMatrix::zeros(2, 2), 0.5).unwrap();
        assert_relative_eq!(spec.mixing_covariance().trace(), 0.0);
        assert_relative_eq!(spec.resolvent_norm(), 1.0, epsilon = 1e-12);
        let expect = 0.5f64.powi(3) / 2.0 * (2.0 / 0.75f64).sqrt();
        assert_relative_eq!(beta_mixing_bound(&spec, 3), expect, epsilon = 1e-12);
    }

    #[test]
    fn mixing_bound_scalar() {
        let spec = MixingBoundSpec::new(dmatrix![0.5], 0.75).unwrap();
        assert_relative_eq!(spec.mixing_covariance().trace(), 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(spec.resolvent_norm(), 3.0, epsilon = 1e-9);
        let expect = 1.5 * (1.0 / 3.0 + 1.0 / 0.4375f64).sqrt() * 0.75f64.powi(4);
        assert_relative_eq!(beta_mixing_bound(&spec, 4), expect, epsilon = 1e-9);
        for k in 0..20 {
            let r = beta_mixing_bound(&spec, k + 1) / beta_mixing_bound(&spec, k);
            assert_relative_eq!(r, 0.75, epsilon = 1e-14);
        }
        assert!(MixingBoundSpec::new(dmatrix![0.5], 0.4).is_err());
        assert!(MixingBoundSpec::new(dmatrix![0.5], 1.0).is_err());
    }

    #[test]
    fn partition_small_case() {
        let p = block_partition(10, 2).unwrap();
        assert_eq!(p.m, 2);
        assert_eq!(p.heads, alloc::vec![0..2, 4..6]);
        assert_eq!(p.tails, alloc::vec![2..4, 6..8]);
        assert_eq!(p.residual, 8..10);
        let p = block_partition(8, 4).unwrap();
        assert_eq!((p.m, p.residual.len()), (1, 0));
        assert!(block_partition(5, 3).is_err());
        assert!(block_partition(5, 0).is_err());
    }

    #[test]
    fn partial_sum_plug_in() {
        let (b, s) = partial_sum_bound(1000, 0.5, 1.0, 0.01).unwrap();
        assert_eq!(b, 25);
        let log = (2e5f64).ln();
        assert_relative_eq!(s, 2.0 * log * ((2000f64).sqrt() + 2.0), epsilon = 1e-12);
        assert!(partial_sum_bound(1000, 0.5, 1e-4, 0.01).is_err());
        let (_, s_small) = partial_sum_bound(1000, 0.5, 1.0, 0.001).unwrap();
        assert!(s_small >= s);
    }

    #[test]
    fn fourth_moment_identity() {
        let i = SymMatrix::identity(3);
        assert_relative_eq!(gaussian_fourth_moment(&i, &i).unwrap(), 15.0);
        assert_eq!(gaussian_fourth_moment(&i, &SymMatrix::zeros(3)).unwrap(), 0.0);
    }

    #[test]
    fn small_ball_degenerate_case() {
        let mut s = NormalSampler::new(0, 5);
        let v = random_symmetric_direction(2, &mut s);
        let vm = sym_mat(&VecImage::from_dvector(v.clone()).unwrap());
        let got = small_ball_second_moment(&SymMatrix::zeros(2), &DMatrix::zeros(2, 2), &v).unwrap();
        assert_relative_eq!(got, vm.trace().powi(2) + 2.0, epsilon = 1e-12);
        let p = small_ball_probability(&SymMatrix::zeros(2), &DMatrix::zeros(2, 2), &v, 1.0, 10_000, &mut s)
            .unwrap();
        assert!(p.mean > 0.0);
    }

    #[test]
    fn gram_floor_arithmetic() {
        let (_, floor) = gram_floor_check(&[DVector::from_element(1, 1.0)], 2.0, 0.5).unwrap();
        assert_relative_eq!(floor, 0.25);
        let x = DVector::from_vec(alloc::vec![1.0, 2.0]);
        let (lmin, _) = gram_floor_check(&[x.clone(), x.clone(), x], 1.0, 1.0).unwrap();
        assert!(lmin.abs() < 1e-12);
        assert!(gram_floor_check(&[], 1.0, 1.0).is_err());
    }

    #[test]
    fn state_bounds_plug_in() {
        let (cx, ca) = state_bounds(5.0, 3, 10_000, 0.05).unwrap();
        let num = (6.0 * (3e4f64 / 0.05).ln()).sqrt();
        assert_relative_eq!(cx, num / (1.0 - (1.0 - 0.01f64).sqrt()), epsilon = 1e-12);
        assert_relative_eq!(ca / cx, 5f64.sqrt(), epsilon = 1e-14);
        let (cx2, _) = state_bounds(5.0, 3, 10_000, 0.1).unwrap();
        let (cx3, _) = state_bounds(5.0, 3, 20_000, 0.05).unwrap();
        let (cx4, _) = state_bounds(5.0, 4, 10_000, 0.05).unwrap();
        assert!(cx2 < cx && cx3 > cx && cx4 > cx);
        assert!(state_bounds(0.5, 3, 10, 0.05).is_err());
    }

    #[test]
    fn upper_moment_arithmetic() {
        assert_relative_eq!(upper_moment_bound(&SymMatrix::identity(3)), 108.0, epsilon = 1e-12);
        assert_eq!(upper_moment_bound(&SymMatrix::zeros(2)), 0.0);
    }

    #[test]
    fn zero_observable_never_violates() {
        let r = verify_block_bound(&dmatrix![0.5], |_| 0.0, 1000, 0.05, 20, 1).unwrap();
        assert_eq!(r.violation_rate, 0.0);
    }
}
