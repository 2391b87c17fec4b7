//! Dense small-matrix kernels: symmetric matrices and their vectorization,
//! Lyapunov and Riccati solvers, PSD projection, pseudo-inverse solves and
//! spectral quantities.

use core::f64::consts::PI;
use core::ops::Deref;

use alloc::vec::Vec;
use nalgebra::{ComplexField, DMatrix, DVector, Schur};

use crate::error::{Error, Result};

/// Largest state dimension accepted by the Kronecker Lyapunov solver.
pub const MAX_LYAPUNOV_DIM: usize = 32;
/// Default relative singular-value cutoff of [`pinv_solve`].
pub const DEFAULT_PINV_TOL: f64 = 1e-10;
/// Relative change at which Riccati value iteration stops.
pub const RICCATI_TOL: f64 = 1e-12;
pub const RICCATI_MAX_ITER: usize = 100_000;
/// Grid size of the unit-circle search in [`hinf_resolvent_norm`].
pub const HINF_GRID: usize = 4096;

/// A real symmetric matrix. Construction symmetrizes via `(X + X^T) / 2`, so
/// `self[(i, j)] == self[(j, i)]` holds bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::NotSquare {
                rows: m.nrows(),
                cols: m.ncols(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("symmetric matrix"));
        }
        Ok(Self::symmetrize(m))
    }

    /// Symmetrizes a square matrix without validating its entries.
    pub(crate) fn symmetrize(m: DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut out = m;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Self(out)
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn scaled_identity(n: usize, scale: f64) -> Self {
        Self(DMatrix::identity(n, n) * scale)
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Block-diagonal matrix `[[a, 0], [0, b]]`.
    pub fn block_diag(a: &SymMatrix, b: &SymMatrix) -> Self {
        let (n, d) = (a.dim(), b.dim());
        let mut out = DMatrix::zeros(n + d, n + d);
        out.view_mut((0, 0), (n, n)).copy_from(&a.0);
        out.view_mut((n, n), (d, d)).copy_from(&b.0);
        Self(out)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn scale(&self, c: f64) -> Self {
        Self(&self.0 * c)
    }

    pub fn add(&self, other: &SymMatrix) -> Self {
        Self(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> Self {
        Self(&self.0 - &other.0)
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        self.0.clone().symmetric_eigenvalues()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().min()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues().max()
    }

    pub fn is_positive_definite(&self) -> bool {
        self.dim() > 0 && self.min_eigenvalue() > 0.0
    }

    /// Trace inner product `tr(self * other)`.
    pub fn frobenius_inner(&self, other: &SymMatrix) -> f64 {
        self.0.dot(&other.0)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    /// Spectral norm, i.e. the largest absolute eigenvalue.
    pub fn spectral_norm(&self) -> f64 {
        self.eigenvalues().amax()
    }

    /// Principal square root of the PSD part (negative eigenvalues are
    /// clipped to zero first).
    pub fn psd_sqrt(&self) -> SymMatrix {
        let eig = self.0.clone().symmetric_eigen();
        let roots = eig.eigenvalues.map(|l| if l > 0.0 { l.sqrt() } else { 0.0 });
        let v = &eig.eigenvectors;
        Self::symmetrize(v * DMatrix::from_diagonal(&roots) * v.transpose())
    }

    /// Lower Cholesky factor; fails unless positive definite.
    pub fn cholesky_factor(&self) -> Result<DMatrix<f64>> {
        self.0
            .clone()
            .cholesky()
            .map(|c| c.l())
            .ok_or(Error::NotPositiveDefinite("matrix"))
    }

    /// Quadratic form `x^T self x`.
    pub fn quad(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.0 * x))
    }
}

impl Deref for SymMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Full row-major vectorization of a square matrix (length `n^2`).
#[derive(Clone, Debug, PartialEq)]
pub struct VecImage {
    data: DVector<f64>,
    source_dim: usize,
}

impl VecImage {
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let len = data.len();
        let n = isqrt(len).ok_or(Error::NotPerfectSquare(len))?;
        Ok(Self {
            data: DVector::from_vec(data),
            source_dim: n,
        })
    }

    pub fn from_dvector(data: DVector<f64>) -> Result<Self> {
        let len = data.len();
        let n = isqrt(len).ok_or(Error::NotPerfectSquare(len))?;
        Ok(Self {
            data,
            source_dim: n,
        })
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn dot(&self, other: &VecImage) -> f64 {
        self.data.dot(&other.data)
    }
}

fn isqrt(len: usize) -> Option<usize> {
    let mut n = (len as f64).sqrt() as usize;
    while n * n > len {
        n -= 1;
    }
    while (n + 1) * (n + 1) <= len {
        n += 1;
    }
    (n * n == len).then_some(n)
}

/// `vect(X)`: row-major, off-diagonal entries duplicated and unscaled, so that
/// `sym_vec(X) . sym_vec(Y) = tr(XY)` for symmetric `X`, `Y`.
pub fn sym_vec(x: &SymMatrix) -> VecImage {
    let n = x.dim();
    let data = DVector::from_iterator(n * n, x.transpose().iter().copied());
    VecImage {
        data,
        source_dim: n,
    }
}

/// Inverse of [`sym_vec`]: reshape row-major, then symmetrize.
pub fn sym_mat(v: &VecImage) -> SymMatrix {
    let n = v.source_dim;
    SymMatrix::symmetrize(DMatrix::from_row_slice(n, n, v.data.as_slice()))
}

/// Writes `vect(x x^T)` into `out` (length `x.len()^2`).
pub fn outer_vec(x: &[f64], out: &mut [f64]) {
    let n = x.len();
    debug_assert_eq!(out.len(), n * n);
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = x[i] * x[j];
        }
    }
}

/// Orthonormal coordinates of the symmetric subspace: diagonal entries, then
/// `sqrt(2) * X_ij` for `i < j`. Isometric with [`sym_vec`] on symmetric
/// matrices, but without the duplicated coordinates.
pub fn svec(x: &SymMatrix) -> DVector<f64> {
    let n = x.dim();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        out.push(x[(i, i)]);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(core::f64::consts::SQRT_2 * x[(i, j)]);
        }
    }
    DVector::from_vec(out)
}

fn require_square(m: &DMatrix<f64>) -> Result<usize> {
    if m.is_square() {
        Ok(m.nrows())
    } else {
        Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        })
    }
}

/// Maximum eigenvalue modulus. Uses a real Schur decomposition and falls back
/// to Gelfand's formula via repeated squaring if the QR iteration stalls.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    if n == 1 {
        return a[(0, 0)].abs();
    }
    match Schur::try_new(a.clone(), f64::EPSILON, 10_000) {
        Some(schur) => schur
            .complex_eigenvalues()
            .iter()
            .map(|z| libm::hypot(z.re, z.im))
            .fold(0.0, f64::max),
        None => spectral_radius_power(a, 60),
    }
}

/// Gelfand estimate `||A^(2^k)||^(1/2^k)` computed with rescaling; an
/// independent check of [`spectral_radius`].
pub fn spectral_radius_power(a: &DMatrix<f64>, squarings: usize) -> f64 {
    let mut p = a.clone();
    let mut log_scale = 0.0;
    let mut power = 1.0;
    for _ in 0..squarings {
        let s = p.norm();
        if s == 0.0 {
            return 0.0;
        }
        p /= s;
        log_scale += libm::log(s) / power;
        p = &p * &p;
        power *= 2.0;
    }
    let s = p.norm();
    if s == 0.0 {
        return 0.0;
    }
    libm::exp(log_scale + libm::log(s) / power)
}

/// Solves `X = G X G^T + Q` through `(I - G (x) G) vec(X) = vec(Q)`, with one
/// step of iterative refinement.
pub fn solve_lyapunov(gamma: &DMatrix<f64>, q: &SymMatrix) -> Result<SymMatrix> {
    let n = require_square(gamma)?;
    if q.dim() != n {
        return Err(Error::DimensionMismatch {
            context: "solve_lyapunov",
            expected: n,
            got: q.dim(),
        });
    }
    if n > MAX_LYAPUNOV_DIM {
        return Err(Error::UnsupportedDimension {
            dim: n,
            max: MAX_LYAPUNOV_DIM,
        });
    }
    let rho = spectral_radius(gamma);
    if rho >= 1.0 {
        return Err(Error::Unstable(rho));
    }
    let system = DMatrix::identity(n * n, n * n) - gamma.kronecker(gamma);
    let rhs = sym_vec(q).data;
    let lu = system.clone().lu();
    let mut x = lu.solve(&rhs).ok_or(Error::Unstable(rho))?;
    let residual = &rhs - &system * &x;
    if let Some(dx) = lu.solve(&residual) {
        x += dx;
    }
    let out = sym_mat(&VecImage {
        data: x,
        source_dim: n,
    });
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Lyapunov solution"));
    }
    Ok(out)
}

/// Frobenius residual `||X - G X G^T - Q||_F`.
pub fn lyapunov_residual(gamma: &DMatrix<f64>, q: &SymMatrix, x: &SymMatrix) -> f64 {
    (x.as_matrix() - gamma * x.as_matrix() * gamma.transpose() - q.as_matrix()).norm()
}

/// Rank test on `[B, AB, ..., A^(n-1) B]`.
pub fn is_controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let d = b.ncols();
    if n == 0 {
        return true;
    }
    let mut ctrb = DMatrix::zeros(n, n * d);
    let mut block = b.clone();
    for k in 0..n {
        ctrb.view_mut((0, k * d), (n, d)).copy_from(&block);
        block = a * block;
    }
    let sv = ctrb.singular_values();
    let smax = sv.max();
    if !(smax > 0.0) {
        return false;
    }
    sv.iter().filter(|&&s| s > 1e-10 * smax).count() == n
}

/// Optimal LQR gain and value matrix for `(A, B, M, N)` by value iteration on
/// the Riccati map, started from `P = M`. Returns `(K, P)` with
/// `K = (N + B^T P B)^-1 B^T P A`.
pub fn solve_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    m: &SymMatrix,
    n: &SymMatrix,
) -> Result<(DMatrix<f64>, SymMatrix)> {
    let dim = require_square(a)?;
    if b.nrows() != dim {
        return Err(Error::DimensionMismatch {
            context: "riccati B rows",
            expected: dim,
            got: b.nrows(),
        });
    }
    if m.dim() != dim || n.dim() != b.ncols() {
        return Err(Error::DimensionMismatch {
            context: "riccati cost blocks",
            expected: dim,
            got: m.dim(),
        });
    }
    if !m.is_positive_definite() {
        return Err(Error::NotPositiveDefinite("M"));
    }
    if !n.is_positive_definite() {
        return Err(Error::NotPositiveDefinite("N"));
    }
    if !is_controllable(a, b) {
        return Err(Error::Uncontrollable);
    }
    let mut p = m.clone();
    for _ in 0..RICCATI_MAX_ITER {
        let k = riccati_gain(a, b, &p, n)?;
        let closed = a - b * &k;
        let next = SymMatrix::symmetrize(
            m.as_matrix()
                + k.transpose() * n.as_matrix() * &k
                + closed.transpose() * p.as_matrix() * &closed,
        );
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Riccati iterate"));
        }
        let change = (next.as_matrix() - p.as_matrix()).norm();
        p = next;
        if change <= RICCATI_TOL * p.frobenius_norm() {
            let k = riccati_gain(a, b, &p, n)?;
            return Ok((k, p));
        }
    }
    Err(Error::RiccatiDivergence(RICCATI_MAX_ITER))
}

fn riccati_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    p: &SymMatrix,
    n: &SymMatrix,
) -> Result<DMatrix<f64>> {
    let btp = b.transpose() * p.as_matrix();
    let s = SymMatrix::symmetrize(n.as_matrix() + &btp * b);
    let chol = s.0.cholesky().ok_or(Error::IllConditioned)?;
    Ok(chol.solve(&(btp * a)))
}

/// Frobenius-nearest `Y` with `Y - floor` PSD: eigen-clip `X - floor` and add
/// the floor back.
pub fn psd_project(x: &SymMatrix, floor: &SymMatrix) -> SymMatrix {
    let diff = x.as_matrix() - floor.as_matrix();
    let eig = diff.symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return x.clone();
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    SymMatrix::symmetrize(v * DMatrix::from_diagonal(&clipped) * v.transpose() + floor.as_matrix())
}

/// Result of a pseudo-inverse solve.
#[derive(Clone, Debug)]
pub struct PinvSolution {
    pub x: DVector<f64>,
    pub rank: usize,
    /// Smallest singular value kept by the cutoff (0 when rank is 0).
    pub smallest_retained: f64,
}

/// Minimum-norm least-squares solution of `A x = b`; singular values below
/// `tol * sigma_max` are treated as zero.
pub fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> DVector<f64> {
    pinv_solve_detailed(a, b, tol).x
}

pub fn pinv_solve_detailed(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> PinvSolution {
    assert_eq!(a.nrows(), b.len(), "pinv_solve: incompatible dimensions");
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let sv = &svd.singular_values;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let cutoff = tol * smax;
    let utb = u.transpose() * b;
    let mut coeffs = DVector::zeros(sv.len());
    let mut rank = 0;
    let mut smallest = f64::INFINITY;
    for i in 0..sv.len() {
        if smax > 0.0 && sv[i] > cutoff {
            coeffs[i] = utb[i] / sv[i];
            rank += 1;
            smallest = smallest.min(sv[i]);
        }
    }
    PinvSolution {
        x: v_t.transpose() * coeffs,
        rank,
        smallest_retained: if rank == 0 { 0.0 } else { smallest },
    }
}

/// Smallest singular value of `z I - A` for `z = e^(i theta)`, through the
/// real embedding `[[Re, -Im], [Im, Re]]`.
fn resolvent_min_singular(a: &DMatrix<f64>, theta: f64) -> f64 {
    let n = a.nrows();
    let (c, s) = (libm::cos(theta), libm::sin(theta));
    let mut emb = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let re = if i == j { c } else { 0.0 } - a[(i, j)];
            emb[(i, j)] = re;
            emb[(n + i, n + j)] = re;
        }
        emb[(i, n + i)] = -s;
        emb[(n + i, i)] = s;
    }
    emb.singular_values().min()
}

/// Resolvent norm at a point of the unit circle, `||(e^(i theta) I - A)^-1||_2`.
pub fn resolvent_norm_at(a: &DMatrix<f64>, theta: f64) -> f64 {
    1.0 / resolvent_min_singular(a, theta)
}

/// `sup_{|z|=1} ||(zI - A)^-1||_2`, approximated by a uniform grid of
/// [`HINF_GRID`] angles (including `z = 1` and `z = -1`) followed by
/// golden-section refinement around the best grid point. Being a maximum over
/// sampled points it can only under-estimate the true norm.
pub fn hinf_resolvent_norm(a: &DMatrix<f64>) -> Result<f64> {
    require_square(a)?;
    let rho = spectral_radius(a);
    if rho >= 1.0 {
        return Err(Error::Unstable(rho));
    }
    if a.nrows() == 0 {
        return Ok(1.0);
    }
    let step = 2.0 * PI / HINF_GRID as f64;
    let mut best = (0.0, resolvent_norm_at(a, 0.0));
    for k in 1..HINF_GRID {
        let theta = k as f64 * step;
        let v = resolvent_norm_at(a, theta);
        if v > best.1 {
            best = (theta, v);
        }
    }
    let f = |t: f64| resolvent_norm_at(a, t);
    let (mut lo, mut hi) = (best.0 - step, best.0 + step);
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..80 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        }
    }
    Ok(best.1.max(f1).max(f2))
}

/// Spectral norm of a general matrix.
pub fn operator_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().max()
}
