//! LSTD estimation of the value matrix `H` from on-policy trajectories and of
//! the state-action matrix `G` from exploratory transitions.
//!
//! Both estimators work in the full row-major vectorization: `vect(H) .
//! vect(x x^T) = x^T H x`. Duplicated off-diagonal coordinates make the normal
//! matrices rank deficient by construction; the pseudo-inverse picks the
//! minimum-norm (hence symmetric) solution.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::env::{Trajectory, TransitionDataset};
use crate::error::{Error, Result};
use crate::linalg::{
    outer_vec, pinv_solve_detailed, psd_project, sym_vec, SymMatrix, VecImage, DEFAULT_PINV_TOL,
};

/// Design matrices of the value regression: rows of `phi` are `vect(x_t x_t^T)`,
/// rows of `phi_plus` are `vect(x_{t+1} x_{t+1}^T)`.
#[derive(Clone, Debug)]
pub struct FeatureBlock {
    pub phi: DMatrix<f64>,
    pub phi_plus: DMatrix<f64>,
    pub costs: DVector<f64>,
    /// The constant row `vect(W)`.
    pub w_row: DVector<f64>,
}

impl FeatureBlock {
    pub fn from_trajectory(traj: &Trajectory, w: &SymMatrix) -> Result<Self> {
        if traj.is_empty() {
            return Err(Error::InsufficientData("empty trajectory"));
        }
        let n = traj.steps[0].x.len();
        if w.dim() != n {
            return Err(Error::DimensionMismatch {
                context: "noise covariance",
                expected: n,
                got: w.dim(),
            });
        }
        let tau = traj.len();
        let mut phi = DMatrix::zeros(tau, n * n);
        let mut phi_plus = DMatrix::zeros(tau, n * n);
        let mut costs = DVector::zeros(tau);
        let mut buf = alloc::vec![0.0; n * n];
        for (t, s) in traj.steps.iter().enumerate() {
            outer_vec(s.x.as_slice(), &mut buf);
            phi.row_mut(t).copy_from_slice(&buf);
            outer_vec(s.x_next.as_slice(), &mut buf);
            phi_plus.row_mut(t).copy_from_slice(&buf);
            costs[t] = s.cost;
        }
        Ok(Self {
            phi,
            phi_plus,
            costs,
            w_row: sym_vec(w).as_vector().clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        let k = self.phi.ncols();
        (1..=k).find(|n| n * n == k).unwrap_or(0)
    }
}

/// Design matrices of the state-action regression: rows of `psi` are
/// `vect(z z^T)` with `z = (x; a)`, rows of `phi_plus` are `vect(x+ x+^T)`.
#[derive(Clone, Debug)]
pub struct QFeatureBlock {
    pub psi: DMatrix<f64>,
    pub phi_plus: DMatrix<f64>,
    pub costs: DVector<f64>,
    pub w_row: DVector<f64>,
    pub state_dim: usize,
}

impl QFeatureBlock {
    pub fn from_dataset(data: &TransitionDataset, w: &SymMatrix) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InsufficientData("empty transition dataset"));
        }
        let first = &data.tuples[0];
        let (n, d) = (first.x.len(), first.a.len());
        let k = n + d;
        let tau = data.len();
        let mut psi = DMatrix::zeros(tau, k * k);
        let mut phi_plus = DMatrix::zeros(tau, n * n);
        let mut costs = DVector::zeros(tau);
        let mut z = alloc::vec![0.0; k];
        let mut zbuf = alloc::vec![0.0; k * k];
        let mut xbuf = alloc::vec![0.0; n * n];
        for (t, s) in data.tuples.iter().enumerate() {
            z[..n].copy_from_slice(s.x.as_slice());
            z[n..].copy_from_slice(s.a.as_slice());
            outer_vec(&z, &mut zbuf);
            psi.row_mut(t).copy_from_slice(&zbuf);
            outer_vec(s.x_next.as_slice(), &mut xbuf);
            phi_plus.row_mut(t).copy_from_slice(&xbuf);
            costs[t] = s.cost;
        }
        Ok(Self {
            psi,
            phi_plus,
            costs,
            w_row: sym_vec(w).as_vector().clone(),
            state_dim: n,
        })
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }
}

/// A projected estimate together with its raw (symmetrized, unprojected)
/// version and solver diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimationReport {
    pub estimate: SymMatrix,
    pub raw_estimate: SymMatrix,
    pub sample_count: usize,
    /// Smallest singular value retained by the pseudo-inverse.
    pub condition_diagnostic: f64,
    /// Fewer samples than unknown coordinates.
    pub rank_deficient: bool,
}

fn finish(
    solution: DVector<f64>,
    floor: &SymMatrix,
    sample_count: usize,
    smallest: f64,
) -> Result<EstimationReport> {
    let params = solution.len();
    let raw = crate::linalg::sym_mat(&VecImage::from_dvector(solution)?);
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("estimate"));
    }
    Ok(EstimationReport {
        estimate: psd_project(&raw, floor),
        raw_estimate: raw,
        sample_count,
        condition_diagnostic: smallest,
        rank_deficient: sample_count < params,
    })
}

/// `vect(H) = (Φ^T (Φ - Φ+ + 1 vect(W)^T))^† Φ^T c`, symmetrized and
/// projected onto `H ⪰ floor`.
pub fn estimate_h_from_features(block: &FeatureBlock, floor: &SymMatrix) -> Result<EstimationReport> {
    if block.is_empty() {
        return Err(Error::InsufficientData("no value-estimation samples"));
    }
    let ones = DVector::from_element(block.len(), 1.0);
    let diff = &block.phi - &block.phi_plus + &ones * block.w_row.transpose();
    let lhs = block.phi.tr_mul(&diff);
    let rhs = block.phi.tr_mul(&block.costs);
    let sol = pinv_solve_detailed(&lhs, &rhs, DEFAULT_PINV_TOL);
    finish(sol.x, floor, block.len(), sol.smallest_retained)
}

/// LSTD estimate of the value matrix with known noise covariance `w`,
/// projected onto `H ⪰ m`.
pub fn estimate_h(traj: &Trajectory, w: &SymMatrix, m: &SymMatrix) -> Result<EstimationReport> {
    estimate_h_from_features(&FeatureBlock::from_trajectory(traj, w)?, m)
}

/// Variant for unknown `W`: centers the costs by their empirical mean instead
/// of using `vect(W)`.
pub fn estimate_h_unknown_w(traj: &Trajectory, m: &SymMatrix) -> Result<EstimationReport> {
    if traj.len() < 2 {
        return Err(Error::InsufficientData("need at least two transitions"));
    }
    let n = traj.steps[0].x.len();
    let block = FeatureBlock::from_trajectory(traj, &SymMatrix::zeros(n))?;
    let mean = block.costs.mean();
    let centered = block.costs.map(|c| c - mean);
    let lhs = block.phi.tr_mul(&(&block.phi - &block.phi_plus));
    let rhs = block.phi.tr_mul(&centered);
    let sol = pinv_solve_detailed(&lhs, &rhs, DEFAULT_PINV_TOL);
    finish(sol.x, m, block.len(), sol.smallest_retained)
}

/// `vect(G) = (Ψ^T Ψ)^† Ψ^T (c + (Φ+ - 1 vect(W)^T) vect(H_hat))`, symmetrized
/// and projected onto `G ⪰ floor`.
pub fn estimate_g_from_features(
    block: &QFeatureBlock,
    h_hat: &SymMatrix,
    floor: &SymMatrix,
) -> Result<EstimationReport> {
    if block.is_empty() {
        return Err(Error::InsufficientData("no exploratory tuples"));
    }
    let h = sym_vec(h_hat);
    let h = h.as_vector();
    if h.len() != block.phi_plus.ncols() {
        return Err(Error::DimensionMismatch {
            context: "value matrix for G estimation",
            expected: block.state_dim,
            got: h_hat.dim(),
        });
    }
    let noise_term = block.w_row.dot(h);
    let target = &block.costs + (&block.phi_plus * h).add_scalar(-noise_term);
    let gram = block.psi.tr_mul(&block.psi);
    let rhs = block.psi.tr_mul(&target);
    let sol = pinv_solve_detailed(&gram, &rhs, DEFAULT_PINV_TOL);
    finish(sol.x, floor, block.len(), sol.smallest_retained)
}

/// State-action estimate from exploratory tuples and a value estimate; the
/// result is projected onto `G ⪰ blockdiag(M, N)`.
pub fn estimate_g(
    data: &TransitionDataset,
    h_hat: &SymMatrix,
    w: &SymMatrix,
    m: &SymMatrix,
    n: &SymMatrix,
) -> Result<EstimationReport> {
    let block = QFeatureBlock::from_dataset(data, w)?;
    estimate_g_from_features(&block, h_hat, &SymMatrix::block_diag(m, n))
}

/// Relative Frobenius error `||est - truth||_F / ||truth||_F`.
pub fn relative_error(est: &SymMatrix, truth: &SymMatrix) -> f64 {
    (est.as_matrix() - truth.as_matrix()).norm() / truth.frobenius_norm()
}

/// Plain list of per-row feature vectors, used by the Gram floor check.
pub fn feature_rows(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    m.row_iter().map(|r| r.transpose()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{policy_value, LinearPolicy, LqSystem, Transition};
    use crate::rng::NormalSampler;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn system() -> LqSystem {
        LqSystem::new(
            dmatrix![0.9, 0.3; -0.2, 1.1],
            dmatrix![0.0; 1.0],
            SymMatrix::from_diagonal(&[1.0, 2.0]),
            SymMatrix::identity(1),
            SymMatrix::new(dmatrix![1.0, 0.2; 0.2, 0.5]).unwrap(),
        )
        .unwrap()
    }

    /// Φ+ replaced by its conditional expectation, so the Bellman identity is
    /// exact row by row.
    #[test]
    fn exact_bellman_data_recovers_h() {
        let sys = system();
        let pol = LinearPolicy::new(dmatrix![0.1, 0.9]).unwrap();
        let pv = policy_value(&sys, &pol).unwrap();
        let gamma = sys.closed_loop(&pol);
        let mut s = NormalSampler::new(4, 0);
        let tau = 200;
        let n = 2;
        let mut phi = DMatrix::zeros(tau, n * n);
        let mut phi_plus = DMatrix::zeros(tau, n * n);
        let mut costs = DVector::zeros(tau);
        let mut buf = [0.0; 4];
        for t in 0..tau {
            let x = s.vector(n) * 2.0;
            outer_vec(x.as_slice(), &mut buf);
            phi.row_mut(t).copy_from_slice(&buf);
            let gx = &gamma * &x;
            let expected = SymMatrix::symmetrize(&gx * gx.transpose() + sys.w().as_matrix());
            phi_plus
                .row_mut(t)
                .copy_from_slice(sym_vec(&expected).as_vector().as_slice());
            costs[t] = sys.cost(&x, &pol.act(&x));
        }
        let block = FeatureBlock {
            phi,
            phi_plus,
            costs,
            w_row: sym_vec(sys.w()).as_vector().clone(),
        };
        let rep = estimate_h_from_features(&block, sys.m()).unwrap();
        assert_relative_eq!(rep.raw_estimate.as_matrix(), pv.h.0.as_matrix(), epsilon = 1e-6);
        assert_relative_eq!(rep.estimate.as_matrix(), pv.h.0.as_matrix(), epsilon = 1e-6);
    }

    #[test]
    fn exact_bellman_data_recovers_g() {
        let sys = system();
        let pol = LinearPolicy::new(dmatrix![0.1, 0.9]).unwrap();
        let pv = policy_value(&sys, &pol).unwrap();
        let mut s = NormalSampler::new(9, 0);
        let tau = 300;
        let (n, d) = (2, 1);
        let k = n + d;
        let mut psi = DMatrix::zeros(tau, k * k);
        let mut phi_plus = DMatrix::zeros(tau, n * n);
        let mut costs = DVector::zeros(tau);
        let mut zb = [0.0; 9];
        for t in 0..tau {
            let z = s.vector(k);
            outer_vec(z.as_slice(), &mut zb);
            psi.row_mut(t).copy_from_slice(&zb);
            let x = z.rows(0, n).into_owned();
            let a = z.rows(n, d).into_owned();
            let mean = sys.a() * &x + sys.b() * &a;
            let expected = SymMatrix::symmetrize(&mean * mean.transpose() + sys.w().as_matrix());
            phi_plus
                .row_mut(t)
                .copy_from_slice(sym_vec(&expected).as_vector().as_slice());
            costs[t] = sys.cost(&x, &a);
        }
        let block = QFeatureBlock {
            psi,
            phi_plus,
            costs,
            w_row: sym_vec(sys.w()).as_vector().clone(),
            state_dim: n,
        };
        let rep = estimate_g_from_features(&block, &pv.h.0, &sys.cost_floor()).unwrap();
        assert_relative_eq!(rep.raw_estimate.as_matrix(), pv.q.matrix().as_matrix(), epsilon = 1e-6);
        assert!(!rep.rank_deficient);
    }

    fn constant_cost_trajectory(len: usize) -> Trajectory {
        let mut s = NormalSampler::new(2, 0);
        let mut steps = Vec::new();
        let mut x = s.vector(2);
        for _ in 0..len {
            let next = s.vector(2);
            steps.push(Transition {
                x: x.clone(),
                a: DVector::zeros(1),
                cost: 3.0,
                x_next: next.clone(),
                exploratory: false,
            });
            x = next;
        }
        Trajectory {
            steps,
            diverged_at: None,
        }
    }

    #[test]
    fn constant_costs_project_to_floor() {
        let m = SymMatrix::from_diagonal(&[1.0, 2.0]);
        let rep = estimate_h_unknown_w(&constant_cost_trajectory(50), &m).unwrap();
        assert!(rep.raw_estimate.frobenius_norm() < 1e-12);
        assert_relative_eq!(rep.estimate.as_matrix(), m.as_matrix(), epsilon = 1e-12);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let m = SymMatrix::identity(2);
        let empty = Trajectory::default();
        assert!(matches!(
            estimate_h(&empty, &m, &m),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            estimate_h_unknown_w(&constant_cost_trajectory(1), &m),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            estimate_g(&TransitionDataset::default(), &m, &m, &m, &SymMatrix::identity(1)),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn projection_floor_holds_on_small_dataset() {
        let sys = system();
        let mut rng = crate::rng::RunRng::new(5);
        let pol = LinearPolicy::new(dmatrix![0.1, 0.9]).unwrap();
        let chol = DMatrix::identity(1, 1);
        let c = crate::env::collect_data(
            &sys,
            &pol,
            20,
            4,
            &chol,
            &DVector::zeros(2),
            &mut rng,
            false,
            1e8,
        )
        .unwrap();
        let rep = estimate_g(&c.dataset, &SymMatrix::identity(2), sys.w(), sys.m(), sys.n()).unwrap();
        assert!(rep.rank_deficient);
        let gap = rep.estimate.sub(&sys.cost_floor());
        assert!(gap.min_eigenvalue() >= -1e-10);
    }
}
