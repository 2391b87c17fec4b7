use mflq_core::env::{policy_value, rollout, LinearPolicy, LqSystem};
use mflq_core::estimation::{estimate_h, estimate_h_unknown_w, relative_error};
use mflq_core::linalg::{spectral_radius, SymMatrix};
use mflq_core::rng::{NormalSampler, RunRng};
use mflq_core::theory::{
    difference_features, gaussian_fourth_moment, gaussian_fourth_moment_mc, gram_floor_check,
    small_ball_second_moment, small_ball_second_moment_mc, random_symmetric_direction,
    upper_moment_bound, upper_moment_bound_trace, upper_moment_mc, SMALL_BALL_OMEGA, SMALL_BALL_PROBABILITY,
};
use nalgebra::{dmatrix, DMatrix, DVector};

fn two_dim() -> (LqSystem, LinearPolicy) {
    let sys = LqSystem::new(
        dmatrix![0.9, 0.2; 0.0, 0.8],
        dmatrix![0.0; 1.0],
        SymMatrix::identity(2),
        SymMatrix::identity(1),
        SymMatrix::identity(2),
    )
    .unwrap();
    let k = LinearPolicy::new(dmatrix![0.1, 0.2]).unwrap();
    (sys, k)
}

fn h_error(steps: usize, seed: u64, known_w: bool) -> f64 {
    let (sys, k) = two_dim();
    let truth = policy_value(&sys, &k).unwrap().h.0;
    let traj = rollout(&sys, &k, steps, &DVector::zeros(2), &mut RunRng::new(seed), 1e8).unwrap();
    let est = if known_w {
        estimate_h(&traj, sys.w(), sys.m()).unwrap()
    } else {
        estimate_h_unknown_w(&traj, sys.m()).unwrap()
    };
    relative_error(&est.estimate, &truth)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn value_estimate_improves_with_data() {
    let short = median((0..9).map(|s| h_error(2_000, s, true)).collect());
    let long = median((0..9).map(|s| h_error(32_000, s, true)).collect());
    assert!(long < 0.1, "{long}");
    assert!(short / long > 1.5, "{short} {long}");
    let unknown = median((0..9).map(|s| h_error(32_000, s, false)).collect());
    assert!(unknown < 0.15, "{unknown}");
}

#[test]
fn fourth_moment_matches_sampling() {
    let mut s = NormalSampler::new(11, 3);
    for _ in 0..3 {
        let a = DMatrix::from_fn(3, 3, |_, _| s.sample());
        let b = DMatrix::from_fn(3, 3, |_, _| s.sample());
        let f = SymMatrix::new(&a + a.transpose()).unwrap();
        let f2 = SymMatrix::new(&b + b.transpose()).unwrap();
        let mc = gaussian_fourth_moment_mc(&f, &f2, 200_000, &mut s);
        assert!(mc.within(gaussian_fourth_moment(&f, &f2).unwrap(), 4.0), "{mc:?}");
    }
}

#[test]
fn small_ball_moment_matches_sampling() {
    let mut s = NormalSampler::new(12, 3);
    let gamma = dmatrix![0.5, 0.1; -0.2, 0.3];
    let sigma = SymMatrix::new(dmatrix![1.5, 0.2; 0.2, 1.1]).unwrap();
    let v = random_symmetric_direction(2, &mut s);
    let exact = small_ball_second_moment(&sigma, &gamma, &v).unwrap();
    let mc = small_ball_second_moment_mc(&sigma, &gamma, &v, 200_000, &mut s).unwrap();
    assert!(mc.within(exact, 4.0), "{mc:?} vs {exact}");
}

#[test]
fn gram_of_difference_features_clears_floor() {
    let gamma = dmatrix![0.6, 0.2; -0.1, 0.5];
    assert!(spectral_radius(&gamma) < 1.0);
    let mut s = NormalSampler::new(13, 3);
    let mut x = DVector::zeros(2);
    let states: Vec<_> = (0..20_000)
        .map(|_| {
            x = &gamma * &x + s.vector(2);
            x.clone()
        })
        .collect();
    let (lmin, floor) =
        gram_floor_check(&difference_features(&states), SMALL_BALL_OMEGA, SMALL_BALL_PROBABILITY)
            .unwrap();
    assert!((floor - 1.0 / 2592.0).abs() < 1e-15);
    assert!(lmin >= floor, "{lmin}");
}

#[test]
fn upper_moment_bounds_against_sampling() {
    let mut s = NormalSampler::new(14, 3);
    for _ in 0..20 {
        let a = DMatrix::from_fn(2, 2, |_, _| s.sample());
        let gamma = &a * (0.9 / spectral_radius(&a));
        let (sigma, mc) = upper_moment_mc(&gamma, 20_000, &mut s).unwrap();
        assert!(mc.mean <= upper_moment_bound_trace(&sigma), "{mc:?}");
    }
    // Square-root form: holds near white noise, fails for a non-normal loop.
    let (sigma, mc) = upper_moment_mc(&DMatrix::zeros(2, 2), 20_000, &mut s).unwrap();
    assert!(mc.mean <= upper_moment_bound(&sigma));
    let (sigma, mc) = upper_moment_mc(&dmatrix![0.9, 2.0; 0.0, 0.9], 20_000, &mut s).unwrap();
    assert!(mc.mean > upper_moment_bound(&sigma) + 5.0 * mc.std_error, "{mc:?}");
}
