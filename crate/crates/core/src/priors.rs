//! Priors on the intensity levels: the repulsive gamma prior and the NGAR1
//! temporal prior.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 1.2;
pub const DEFAULT_ETA: f64 = 0.04;
pub const DEFAULT_RHO: f64 = 1.0;
pub const DEFAULT_NU: f64 = 3.0;

/// Repulsive gamma prior `RG(α, η, ρ, ν)` with an optional upper bound on
/// the largest rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RGSpec {
    alpha: Vec<f64>,
    eta: Vec<f64>,
    rho: f64,
    nu: f64,
    upper: Option<f64>,
}

fn all_positive(v: &[f64]) -> bool {
    v.iter().all(|x| *x > 0.0 && x.is_finite())
}

impl RGSpec {
    pub fn new(alpha: Vec<f64>, eta: Vec<f64>, rho: f64, nu: f64, upper: Option<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.len() != eta.len() {
            return Err(Error::param("alpha", "alpha and eta need one entry per level"));
        }
        if !all_positive(&alpha) || !all_positive(&eta) {
            return Err(Error::param("alpha", "shapes and rates must be positive"));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::param("rho", format!("must be positive, got {rho}")));
        }
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::param("nu", format!("must be positive, got {nu}")));
        }
        if let Some(u) = upper {
            if !(u > 0.0) {
                return Err(Error::param("upper", format!("must be positive, got {u}")));
            }
        }
        Ok(RGSpec { alpha, eta, rho, nu, upper })
    }

    /// Default hyperparameters for `k` levels.
    pub fn default_for(k: usize) -> Self {
        RGSpec {
            alpha: vec![DEFAULT_ALPHA; k],
            eta: vec![DEFAULT_ETA; k],
            rho: DEFAULT_RHO,
            nu: DEFAULT_NU,
            upper: None,
        }
    }

    /// Build from possibly scalar shape/rate lists, repeating a single value
    /// across `k` levels.
    pub fn broadcast(k: usize, alpha: &[f64], eta: &[f64], rho: f64, nu: f64, upper: Option<f64>) -> Result<Self> {
        let expand = |v: &[f64], name: &'static str| -> Result<Vec<f64>> {
            match v.len() {
                1 => Ok(vec![v[0]; k]),
                n if n == k => Ok(v.to_vec()),
                n => Err(Error::param(name, format!("expected 1 or {k} values, got {n}"))),
            }
        };
        Self::new(expand(alpha, "alpha")?, expand(eta, "eta")?, rho, nu, upper)
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn upper(&self) -> Option<f64> {
        self.upper
    }

    /// Same prior with levels permuted: entry `i` of the result is entry
    /// `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        RGSpec {
            alpha: perm.iter().map(|&i| self.alpha[i]).collect(),
            eta: perm.iter().map(|&i| self.eta[i]).collect(),
            ..self.clone()
        }
    }
}

/// `log(1 − exp(−ρ x^ν))`, the pairwise repulsion factor.
pub fn log_repulsion(x: f64, rho: f64, nu: f64) -> f64 {
    (-(-rho * x.powf(nu)).exp_m1()).ln()
}

/// Unnormalised log density of the repulsive gamma prior. Invalid rates
/// yield `−∞` rather than an error.
pub fn rg_log_density_unnorm(lambda: &[f64], spec: &RGSpec) -> f64 {
    if lambda.len() != spec.len() || !all_positive(lambda) {
        return f64::NEG_INFINITY;
    }
    if let Some(u) = spec.upper {
        if lambda.iter().any(|&l| l > u) {
            return f64::NEG_INFINITY;
        }
    }
    let gamma: f64 = lambda
        .iter()
        .zip(spec.alpha.iter().zip(&spec.eta))
        .map(|(&l, (&a, &e))| (a - 1.0) * l.ln() - e * l)
        .sum();
    let mut rep = 0.0;
    for i in 0..lambda.len() {
        for j in i + 1..lambda.len() {
            let x = (lambda[i] - lambda[j]).abs() / (lambda[i] + lambda[j]).sqrt();
            rep += log_repulsion(x, spec.rho, spec.nu);
        }
    }
    gamma + rep
}

/// NGAR1 prior on rate trajectories, one `(w_k, a_k)` pair per level and a
/// repulsive gamma prior at time zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGAR1Spec {
    w: Vec<f64>,
    a: Vec<f64>,
    initial: RGSpec,
}

impl NGAR1Spec {
    pub fn new(w: Vec<f64>, a: Vec<f64>, initial: RGSpec) -> Result<Self> {
        if w.len() != initial.len() || a.len() != initial.len() {
            return Err(Error::param("w", "w and a need one entry per level"));
        }
        if w.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
            return Err(Error::param("w", "persistence must lie in (0, 1)"));
        }
        if !all_positive(&a) {
            return Err(Error::param("a", "precision must be positive"));
        }
        Ok(NGAR1Spec { w, a, initial })
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn initial(&self) -> &RGSpec {
        &self.initial
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

fn beta_log_pdf(x: f64, a: f64, b: f64) -> f64 {
    ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p()
}

/// Log density of the transitions of one level's trajectory
/// `λ_0, …, λ_T` given `λ_0`. Returns `−∞` outside the support.
pub fn ngar1_log_density(traj: &[f64], w: f64, a: f64) -> f64 {
    if !all_positive(traj) {
        return f64::NEG_INFINITY;
    }
    let (p, q) = (w * a, (1.0 - w) * a);
    let mut total = 0.0;
    for pair in traj.windows(2) {
        let eps = w * pair[1] / pair[0];
        if !(eps > 0.0 && eps < 1.0) {
            return f64::NEG_INFINITY;
        }
        total += beta_log_pdf(eps, p, q) + (w / pair[0]).ln();
    }
    total
}

/// Joint log density of a `(T+1) × K` rate trajectory, `traj[t][k]`:
/// the unnormalised RG kernel at time zero plus the transitions.
pub fn ngar1_joint_log_density(traj: &[Vec<f64>], spec: &NGAR1Spec) -> f64 {
    let Some(first) = traj.first() else {
        return f64::NEG_INFINITY;
    };
    let mut total = rg_log_density_unnorm(first, &spec.initial);
    for k in 0..spec.len() {
        if !total.is_finite() {
            break;
        }
        let column: Vec<f64> = traj.iter().map(|row| row[k]).collect();
        total += ngar1_log_density(&column, spec.w[k], spec.a[k]);
    }
    total
}

/// Forward simulation of `t_max` transitions from `initial`; row `t` of the
/// result holds the rates at time `t`.
pub fn ngar1_simulate<R: Rng + ?Sized>(
    initial: &[f64],
    spec: &NGAR1Spec,
    t_max: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if initial.len() != spec.len() || !all_positive(initial) {
        return Err(Error::InvalidRates("initial rates must be positive, one per level".into()));
    }
    let shocks = spec
        .w
        .iter()
        .zip(&spec.a)
        .map(|(&w, &a)| Beta::new(w * a, (1.0 - w) * a).map_err(|e| Error::param("a", e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(t_max + 1);
    out.push(initial.to_vec());
    for t in 1..=t_max {
        let row = out[t - 1]
            .iter()
            .zip(spec.w.iter().zip(&shocks))
            .map(|(&prev, (&w, d))| prev * d.sample(rng).max(f64::MIN_POSITIVE) / w)
            .collect();
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn repulsion_factor_at_one() {
        let f = log_repulsion(1.0, 1.0, 3.0).exp();
        assert!((f - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((f - 0.63212).abs() < 1e-5);
        // λ = (1, 3): x = 2/2 = 1
        let spec = RGSpec::new(vec![1.0, 1.0], vec![1e-300, 1e-300], 1.0, 3.0, None).unwrap();
        let v = rg_log_density_unnorm(&[1.0, 3.0], &spec);
        assert!((v - f.ln()).abs() < 1e-12);
    }

    #[test]
    fn ties_and_invalid_rates_are_impossible() {
        let spec = RGSpec::default_for(3);
        assert_eq!(rg_log_density_unnorm(&[2.0, 5.0, 2.0], &spec), f64::NEG_INFINITY);
        assert_eq!(rg_log_density_unnorm(&[2.0, -5.0, 1.0], &spec), f64::NEG_INFINITY);
        assert_eq!(rg_log_density_unnorm(&[2.0, 5.0], &spec), f64::NEG_INFINITY);
        let capped = RGSpec::broadcast(3, &[1.2], &[0.04], 1.0, 3.0, Some(30.0)).unwrap();
        assert_eq!(rg_log_density_unnorm(&[2.0, 5.0, 31.0], &capped), f64::NEG_INFINITY);
        assert!(rg_log_density_unnorm(&[2.0, 5.0, 29.0], &capped).is_finite());
    }

    #[test]
    fn single_level_is_gamma_kernel() {
        let spec = RGSpec::new(vec![2.5], vec![0.3], 1.0, 3.0, None).unwrap();
        for l in [0.1, 1.0, 7.0] {
            let want = 1.5 * f64::ln(l) - 0.3 * l;
            assert!((rg_log_density_unnorm(&[l], &spec) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn repulsion_never_exceeds_gamma_kernel() {
        let spec = RGSpec::default_for(3);
        let plain = RGSpec { rho: 1e-300, ..spec.clone() };
        let mut rng = seeded(3);
        for _ in 0..1000 {
            let l: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 20.0 + 0.01).collect();
            let gamma: f64 = l.iter().map(|&x| 0.2 * x.ln() - 0.04 * x).sum();
            assert!(rg_log_density_unnorm(&l, &spec) <= gamma + 1e-12);
            assert!(rg_log_density_unnorm(&l, &plain) <= gamma);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(RGSpec::new(vec![1.0], vec![1.0, 2.0], 1.0, 3.0, None).is_err());
        assert!(RGSpec::new(vec![0.0], vec![1.0], 1.0, 3.0, None).is_err());
        assert!(RGSpec::new(vec![1.0], vec![1.0], 0.0, 3.0, None).is_err());
        assert!(RGSpec::broadcast(3, &[1.0, 2.0], &[1.0], 1.0, 3.0, None).is_err());
        let rg = RGSpec::default_for(2);
        assert!(NGAR1Spec::new(vec![1.0, 0.5], vec![5.0, 5.0], rg.clone()).is_err());
        assert!(NGAR1Spec::new(vec![0.5, 0.5], vec![5.0, 0.0], rg.clone()).is_err());
        assert!(NGAR1Spec::new(vec![0.5], vec![5.0], rg).is_err());
    }

    #[test]
    fn ngar1_support() {
        let flat = ngar1_log_density(&[4.0, 4.0], 0.5, 10.0);
        assert!(flat.is_finite());
        // ε = 0.5 with Beta(5, 5), Jacobian 0.5/4
        let want = beta_log_pdf(0.5, 5.0, 5.0) + (0.125f64).ln();
        assert!((flat - want).abs() < 1e-12);
        assert_eq!(ngar1_log_density(&[4.0, 12.0], 0.5, 10.0), f64::NEG_INFINITY);
        assert_eq!(ngar1_log_density(&[4.0, 8.0], 0.5, 10.0), f64::NEG_INFINITY);
        assert_eq!(ngar1_log_density(&[4.0], 0.5, 10.0), 0.0);
    }

    #[test]
    fn beta_log_pdf_matches_statrs() {
        use statrs::distribution::{Beta as SBeta, Continuous};
        let d = SBeta::new(2.5, 7.5).unwrap();
        for x in [0.05, 0.3, 0.9] {
            assert!((beta_log_pdf(x, 2.5, 7.5) - d.ln_pdf(x)).abs() < 1e-10);
        }
    }

    #[test]
    fn ngar1_transition_density_integrates_to_one() {
        // ∫ p(λ_1 | λ_0) dλ_1 over (0, λ_0 / w) by the midpoint rule
        let (l0, w, a) = (3.0, 0.5, 15.0);
        let top = l0 / w;
        let n = 200_000;
        let h = top / n as f64;
        let total: f64 = (0..n)
            .map(|i| ngar1_log_density(&[l0, (i as f64 + 0.5) * h], w, a).exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn ngar1_martingale_and_positivity() {
        let spec = NGAR1Spec::new(vec![0.5, 0.8], vec![5.0, 30.0], RGSpec::default_for(2)).unwrap();
        let mut rng = seeded(11);
        let n = 100_000;
        let mut sums = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for _ in 0..n {
            let traj = ngar1_simulate(&[4.0, 10.0], &spec, 1, &mut rng).unwrap();
            for k in 0..2 {
                assert!(traj[1][k] > 0.0);
                sums[k] += traj[1][k];
                sq[k] += traj[1][k] * traj[1][k];
            }
        }
        for (k, want) in [4.0, 10.0].into_iter().enumerate() {
            let mean = sums[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            assert!((mean - want).abs() < 3.0 * (var / n as f64).sqrt(), "level {k}: {mean}");
        }
        let t0 = ngar1_simulate(&[4.0, 10.0], &spec, 0, &mut rng).unwrap();
        assert_eq!(t0, vec![vec![4.0, 10.0]]);
        let long = ngar1_simulate(&[4.0, 10.0], &spec, 50, &mut rng).unwrap();
        assert!(long.iter().flatten().all(|&x| x > 0.0));
        assert!(ngar1_joint_log_density(&long, &spec).is_finite());
    }

    proptest! {
        #[test]
        fn rg_is_exchangeable(
            l in proptest::collection::vec(0.01f64..50.0, 4),
            a in proptest::collection::vec(0.5f64..3.0, 4),
            e in proptest::collection::vec(0.01f64..1.0, 4),
            rot in 0usize..4,
        ) {
            let spec = RGSpec::new(a, e, 2.0, 3.0, None).unwrap();
            let perm: Vec<usize> = (0..4).map(|i| (i + rot) % 4).rev().collect();
            let lp: Vec<f64> = perm.iter().map(|&i| l[i]).collect();
            let v = rg_log_density_unnorm(&l, &spec);
            let vp = rg_log_density_unnorm(&lp, &spec.permuted(&perm));
            prop_assert!((v - vp).abs() <= 1e-9 * v.abs().max(1.0));
        }
    }
}
