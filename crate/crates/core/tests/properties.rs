use mflq_core::env::{greedy_policy, policy_value, LinearPolicy, LqSystem};
use mflq_core::linalg::{
    lyapunov_residual, psd_project, solve_lyapunov, spectral_radius, svec, sym_mat, sym_vec,
    SymMatrix, VecImage,
};
use mflq_core::mflq::{make_schedule, Variant};
use mflq_core::theory::{
    beta_mixing_bound, block_partition, small_ball_second_moment, MixingBoundSpec,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(n: usize, m: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, n * m).prop_map(move |v| DMatrix::from_vec(n, m, v))
}

/// Random matrix rescaled to a spectral radius in `[0, 0.95)`.
fn stable(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (matrix(n, n), 0.0f64..0.95).prop_map(|(a, r)| {
        let rho = spectral_radius(&a);
        if rho < 1e-9 {
            a
        } else {
            a * (r / rho)
        }
    })
}

fn sym(n: usize) -> impl Strategy<Value = SymMatrix> {
    matrix(n, n).prop_map(|a| SymMatrix::new(&a + a.transpose()).unwrap())
}

fn psd(n: usize) -> impl Strategy<Value = SymMatrix> {
    matrix(n, n).prop_map(|a| SymMatrix::new(&a * a.transpose()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lyapunov_solution_satisfies_equation(
        (g, q) in (1usize..6).prop_flat_map(|n| (stable(n), psd(n)))
    ) {
        let x = solve_lyapunov(&g, &q).unwrap();
        prop_assert!(lyapunov_residual(&g, &q, &x) <= 1e-10 * (1.0 + x.frobenius_norm()));
        prop_assert!(x.min_eigenvalue() >= -1e-9);
    }

    #[test]
    fn vect_round_trip(x in sym(4)) {
        let back = sym_mat(&sym_vec(&x));
        prop_assert!((back.as_matrix() - x.as_matrix()).amax() == 0.0);
        prop_assert!((sym_vec(&x).as_vector().norm() - x.frobenius_norm()).abs() < 1e-12);
        prop_assert!((svec(&x).norm() - x.frobenius_norm()).abs() < 1e-12);
    }

    #[test]
    fn projection_respects_floor(x in sym(3), f in psd(3)) {
        let p = psd_project(&x, &f);
        prop_assert!(p.sub(&f).min_eigenvalue() >= -1e-10);
        let again = psd_project(&p, &f);
        prop_assert!((again.as_matrix() - p.as_matrix()).amax() < 1e-9);
    }

    #[test]
    fn greedy_of_optimal_q_is_optimal(a in matrix(3, 3), b in matrix(3, 2)) {
        let sys = LqSystem::new(a, b, SymMatrix::identity(3), SymMatrix::identity(2), SymMatrix::identity(3));
        let Ok(sys) = sys else { return Ok(()) };
        let Ok((k, _)) = sys.optimal_controller() else { return Ok(()) };
        let pv = policy_value(&sys, &k).unwrap();
        let greedy = greedy_policy(&pv.q).unwrap();
        prop_assert!((greedy.gain() - k.gain()).amax() <= 1e-6);
    }

    #[test]
    fn policy_improvement_never_hurts(gamma in stable(2), b in matrix(2, 1)) {
        // A stable closed loop built from an arbitrary gain.
        let k = LinearPolicy::new(DMatrix::from_row_slice(1, 2, &[0.3, -0.2])).unwrap();
        let a = &gamma + &b * k.gain();
        let sys = LqSystem::new(a, b, SymMatrix::identity(2), SymMatrix::identity(1), SymMatrix::identity(2)).unwrap();
        let pv = policy_value(&sys, &k).unwrap();
        let next = greedy_policy(&pv.q).unwrap();
        prop_assert!(sys.is_stable(&next));
        let improved = policy_value(&sys, &next).unwrap();
        prop_assert!(improved.lambda <= pv.lambda * (1.0 + 1e-9));
    }

    #[test]
    fn small_ball_moment_at_least_two(gamma in stable(3), sigma in psd(3), v in prop::collection::vec(-1.0f64..1.0, 9)) {
        let raw = DMatrix::from_row_slice(3, 3, &v);
        let vs = (&raw + raw.transpose()) * 0.5;
        prop_assume!(vs.norm() > 1e-6);
        let vs = &vs / vs.norm();
        let v = DVector::from_iterator(9, vs.transpose().iter().copied());
        prop_assert!(VecImage::from_dvector(v.clone()).is_ok());
        let m2 = small_ball_second_moment(&sigma, &gamma, &v).unwrap();
        prop_assert!(m2 >= 2.0 - 1e-9);
    }

    #[test]
    fn mixing_envelope_ratio(g in stable(2), frac in 0.01f64..0.99) {
        let rho = spectral_radius(&g);
        let alpha = rho + frac * (1.0 - rho);
        let spec = MixingBoundSpec::new(g, alpha).unwrap();
        for k in 0..10 {
            let r = beta_mixing_bound(&spec, k) / beta_mixing_bound(&spec, k + 1);
            prop_assert!((r - 1.0 / alpha).abs() <= 1e-12 / alpha);
        }
    }

    #[test]
    fn blocks_partition_indices(n in 2usize..500, b_frac in 0.0f64..1.0) {
        let b = 1 + ((n / 2 - 1) as f64 * b_frac) as usize;
        let p = block_partition(n, b).unwrap();
        let mut seen = vec![0u8; n];
        for r in p.heads.iter().chain(&p.tails).chain(std::iter::once(&p.residual)) {
            for i in r.clone() {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert!(2 * p.m * b <= n && n < 2 * p.m * b + 2 * b);
        for j in 1..p.m {
            prop_assert!(p.tails[j - 1].end == p.heads[j].start);
        }
    }

    #[test]
    fn schedule_never_exceeds_horizon(t in 64usize..400_000, xi in 0.0f64..0.249, v in 0usize..3) {
        let variant = [Variant::V1, Variant::V2, Variant::V3][v];
        if let Ok(s) = make_schedule(t, xi, variant, 10) {
            prop_assert!(s.total_steps() <= t);
            prop_assert!(s.phases >= 1 && s.eval_steps >= 1 && s.tuples_per_phase >= 1);
        }
    }
}
