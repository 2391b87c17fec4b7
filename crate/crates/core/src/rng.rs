//! Deterministic Gaussian sampling.
//!
//! Standard normals come from the Box-Muller transform applied to uniforms
//! drawn from a ChaCha8 stream. The transcendental functions are the
//! software implementations from `libm`, so a given `(seed, stream)` produces
//! the same sequence on every platform.

use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// ChaCha stream carrying the process noise `w_t` of a run.
pub const PROCESS_STREAM: u64 = 0;
/// ChaCha stream carrying exploratory actions and parameter samples.
pub const EXPLORE_STREAM: u64 = 1;
/// ChaCha stream reserved for comparator rollouts in regret accounting.
pub const REFERENCE_STREAM: u64 = 2;

/// Source of i.i.d. standard normal variates.
#[derive(Clone, Debug)]
pub struct NormalSampler {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalSampler {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    /// Uniform variate in (0, 1].
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * PI * u2;
        (r * libm::cos(theta), r * libm::sin(theta))
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let (z0, z1) = self.pair();
        self.spare = Some(z1);
        z0
    }

    /// Fills `out` with fresh normals, consuming exactly `ceil(len / 2)`
    /// Box-Muller pairs and ignoring any cached spare. The fixed consumption
    /// keeps step `t` of two runs on the same stream aligned.
    pub fn fill(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_exact_mut(2);
        for c in &mut chunks {
            let (z0, z1) = self.pair();
            c[0] = z0;
            c[1] = z1;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.pair().0;
        }
    }

    pub fn vector(&mut self, dim: usize) -> DVector<f64> {
        let mut v = DVector::zeros(dim);
        self.fill(v.as_mut_slice());
        v
    }

    /// Draw from `N(0, L L^T)` given the lower Cholesky factor `L`.
    pub fn correlated(&mut self, chol: &DMatrix<f64>) -> DVector<f64> {
        let z = self.vector(chol.ncols());
        chol * z
    }
}

/// The generators owned by one simulated run.
///
/// Process noise and the learner's own randomness live on separate streams,
/// so two algorithms run with the same seed see the same `w_t` at every step
/// and differ only through the actions they take.
#[derive(Clone, Debug)]
pub struct RunRng {
    seed: u64,
    process: Option<NormalSampler>,
    explore: NormalSampler,
}

impl RunRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            process: Some(NormalSampler::new(seed, PROCESS_STREAM)),
            explore: NormalSampler::new(seed, EXPLORE_STREAM),
        }
    }

    /// Process noise switched off; exploration is still random.
    pub fn noiseless(seed: u64) -> Self {
        Self {
            seed,
            process: None,
            explore: NormalSampler::new(seed, EXPLORE_STREAM),
        }
    }

    /// Generator for an independent comparator rollout of the same seed.
    pub fn reference(seed: u64) -> Self {
        Self {
            seed,
            process: Some(NormalSampler::new(seed, REFERENCE_STREAM)),
            explore: NormalSampler::new(seed, EXPLORE_STREAM),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_noiseless(&self) -> bool {
        self.process.is_none()
    }

    /// Standard-normal process noise, or `None` in noiseless mode.
    pub fn process_noise(&mut self, dim: usize) -> Option<DVector<f64>> {
        self.process.as_mut().map(|s| s.vector(dim))
    }

    pub fn explore(&mut self) -> &mut NormalSampler {
        &mut self.explore
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = NormalSampler::new(7, 3);
        let mut b = NormalSampler::new(7, 3);
        for _ in 0..100 {
            assert_eq!(a.sample().to_bits(), b.sample().to_bits());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = NormalSampler::new(7, 0);
        let mut b = NormalSampler::new(7, 1);
        assert_ne!(a.sample(), b.sample());
    }

    #[test]
    fn moments_are_standard() {
        let mut s = NormalSampler::new(1, 0);
        let n = 200_000;
        let (mut m1, mut m2, mut m4) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let z = s.sample();
            m1 += z;
            m2 += z * z;
            m4 += z * z * z * z;
        }
        let n = n as f64;
        assert!((m1 / n).abs() < 0.01);
        assert!((m2 / n - 1.0).abs() < 0.015);
        assert!((m4 / n - 3.0).abs() < 0.08);
    }

    #[test]
    fn fill_consumption_is_fixed() {
        let mut a = NormalSampler::new(5, 0);
        let mut b = NormalSampler::new(5, 0);
        let mut buf3 = [0.0; 3];
        let mut buf4 = [0.0; 4];
        a.fill(&mut buf3);
        b.fill(&mut buf4);
        assert_eq!(a.uniform(), b.uniform());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut s = NormalSampler::new(0, 0);
        for _ in 0..10_000 {
            let u = s.uniform();
            assert!(u > 0.0 && u <= 1.0);
        }
    }
}
