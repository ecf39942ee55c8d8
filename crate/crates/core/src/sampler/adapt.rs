//! Adaptive tuning of proposal scales during burn-in.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Robbins–Monro step size at adaptation step `n`.
fn gain(n: u64) -> f64 {
    (n as f64 + 1.0).powf(-0.6)
}

/// Scalar step tuned on the log scale toward a target acceptance rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalarTuner {
    log_value: f64,
    target: f64,
    lo: f64,
    hi: f64,
    steps: u64,
}

impl ScalarTuner {
    pub fn new(initial: f64, target: f64, lo: f64, hi: f64) -> Self {
        ScalarTuner {
            log_value: initial.clamp(lo, hi).ln(),
            target,
            lo,
            hi,
            steps: 0,
        }
    }

    pub fn value(&self) -> f64 {
        self.log_value.exp()
    }

    pub fn update(&mut self, accept_prob: f64) {
        self.log_value += gain(self.steps) * (accept_prob - self.target);
        self.log_value = self.log_value.clamp(self.lo.ln(), self.hi.ln());
        self.steps += 1;
    }
}

/// Acceptance target for a `d`-dimensional random walk: 0.4 up to two
/// dimensions, falling linearly to 0.234 from five on.
pub fn walk_target(d: usize) -> f64 {
    match d {
        0..=2 => 0.4,
        5.. => 0.234,
        _ => 0.4 - (0.4 - 0.234) * (d as f64 - 2.0) / 3.0,
    }
}

/// Gaussian random walk with a Haario-style running covariance estimate and
/// a global scale tuned toward [`walk_target`].
#[derive(Debug, Clone)]
pub struct CovarianceWalk {
    dim: usize,
    initial_sd: f64,
    scale: ScalarTuner,
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    chol: DMatrix<f64>,
}

impl CovarianceWalk {
    pub fn new(dim: usize, initial_sd: f64) -> Self {
        CovarianceWalk {
            dim,
            initial_sd,
            scale: ScalarTuner::new(1.0, walk_target(dim), 1e-3, 1e3),
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * dim],
            chol: DMatrix::identity(dim, dim) * initial_sd,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> f64 {
        self.scale.value()
    }

    /// Proposal increment `s · L z`.
    pub fn increment<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_iterator(self.dim, (0..self.dim).map(|_| StandardNormal.sample(rng)));
        let step = &self.chol * z * self.scale.value();
        step.iter().copied().collect()
    }

    /// Feed the acceptance probability of the last move and the current
    /// position of the chain.
    pub fn adapt(&mut self, accept_prob: f64, position: &[f64]) {
        self.scale.update(accept_prob);
        self.n += 1;
        let n = self.n as f64;
        let d = self.dim;
        let delta: Vec<f64> = position.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        for i in 0..d {
            for j in 0..d {
                self.m2[i * d + j] += delta[i] * (position[j] - self.mean[j]);
            }
        }
        if self.n as usize >= 20 * d.max(5) {
            let factor = 2.38 * 2.38 / d as f64 / (n - 1.0);
            let floor = 1e-4 * self.initial_sd * self.initial_sd;
            let cov = DMatrix::from_fn(d, d, |i, j| {
                self.m2[i * d + j] * factor + if i == j { floor } else { 0.0 }
            });
            if let Some(c) = cov.cholesky() {
                self.chol = c.l();
            }
        }
    }
}

/// Doubles or halves the number of squares so that the mean per-square
/// acceptance of the auxiliary update stays inside `[lo, hi]`.
#[derive(Debug, Clone)]
pub struct SquareTuner {
    pub lo: f64,
    pub hi: f64,
    pub batch: usize,
    pub max_squares: usize,
    sum: f64,
    seen: usize,
}

impl SquareTuner {
    pub fn new(batch: usize, max_squares: usize) -> Self {
        SquareTuner {
            lo: 0.7,
            hi: 0.9,
            batch,
            max_squares,
            sum: 0.0,
            seen: 0,
        }
    }

    /// Record one sweep's mean acceptance; returns a new square count when
    /// a batch completes outside the band.
    pub fn record(&mut self, mean_accept: f64, squares: usize) -> Option<usize> {
        self.sum += mean_accept;
        self.seen += 1;
        if self.seen < self.batch {
            return None;
        }
        let rate = self.sum / self.seen as f64;
        self.sum = 0.0;
        self.seen = 0;
        if rate < self.lo && squares * 2 <= self.max_squares {
            Some(squares * 2)
        } else if rate > self.hi && squares > 1 {
            Some(squares / 2)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn walk_targets() {
        assert_eq!(walk_target(1), 0.4);
        assert_eq!(walk_target(2), 0.4);
        assert_eq!(walk_target(9), 0.234);
        assert!(walk_target(3) < 0.4 && walk_target(4) > 0.234);
    }

    #[test]
    fn scalar_tuner_moves_toward_target() {
        let mut t = ScalarTuner::new(0.5, 0.234, 1e-4, 1.0);
        for _ in 0..100 {
            t.update(1.0);
        }
        assert_eq!(t.value(), 1.0);
        for _ in 0..1000 {
            t.update(0.0);
        }
        assert!(t.value() < 0.01);
    }

    #[test]
    fn covariance_walk_learns_scale() {
        let mut w = CovarianceWalk::new(2, 1.0);
        let mut rng = seeded(5);
        for _ in 0..5000 {
            let x: f64 = StandardNormal.sample(&mut rng);
            let y: f64 = StandardNormal.sample(&mut rng);
            w.adapt(0.4, &[0.01 * x, 10.0 * y]);
        }
        let inc: Vec<Vec<f64>> = (0..4000).map(|_| w.increment(&mut rng)).collect();
        let sd = |i: usize| (inc.iter().map(|v| v[i] * v[i]).sum::<f64>() / 4000.0).sqrt();
        assert!(sd(1) / sd(0) > 300.0, "{} {}", sd(0), sd(1));
    }

    #[test]
    fn square_tuner_band() {
        let mut t = SquareTuner::new(2, 64);
        assert_eq!(t.record(0.5, 8), None);
        assert_eq!(t.record(0.5, 8), Some(16));
        t.record(0.95, 16);
        assert_eq!(t.record(0.95, 16), Some(8));
        t.record(0.8, 8);
        assert_eq!(t.record(0.8, 8), None);
        t.record(0.1, 64);
        assert_eq!(t.record(0.1, 64), None);
    }
}
