//! Dynamic level-set Cox process: a random-walk NNGP field over discrete
//! times, per-time rates under independent repulsive gamma or NGAR1 priors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceSpec;
use crate::error::{Error, Result};
use crate::geometry::{Point, PointPattern, Window};
use crate::nngp::{extend_offgrid, pcn_combine, LatentField, NngpPrior, PcnProposal, Provenance, SiteId};
use crate::priors::{NGAR1Spec, RGSpec};
use crate::rng::StreamKey;
use crate::sampler::{Chain, Model, ModelSpec, RatePrior, RunOutput, SamplerConfig};

pub const DEFAULT_XI2: f64 = 1.0;
pub const DEFAULT_VARRHO2: f64 = 0.5;
pub const DEFAULT_W: f64 = 0.5;

/// Default NGAR1 precisions: `(5, 15, 30)` for three levels, 15 otherwise.
pub fn default_ngar1_a(k: usize) -> Vec<f64> {
    if k == 3 {
        vec![5.0, 15.0, 30.0]
    } else {
        vec![15.0; k]
    }
}

/// Variance and range of the grid innovation `ζ_t ~ NNGP(0, Σ̃(ξ², ϱ²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnovationSpec {
    pub xi2: f64,
    pub varrho2: f64,
}

impl Default for InnovationSpec {
    fn default() -> Self {
        InnovationSpec {
            xi2: DEFAULT_XI2,
            varrho2: DEFAULT_VARRHO2,
        }
    }
}

impl InnovationSpec {
    /// Check against the static kernel: `ξ² ≤ σ²` and `ϱ² ≥ τ²`.
    pub fn validate(&self, base: &CovarianceSpec) -> Result<()> {
        if !(self.xi2 >= 0.0 && self.xi2 <= base.sigma2()) {
            return Err(Error::param(
                "xi2",
                format!("must lie in [0, {}], got {}", base.sigma2(), self.xi2),
            ));
        }
        if !(self.varrho2.is_finite() && self.varrho2 >= base.tau2()) {
            return Err(Error::param(
                "varrho2",
                format!("must be at least tau2 = {}, got {}", base.tau2(), self.varrho2),
            ));
        }
        Ok(())
    }

    /// Innovation prior on the same reference grid, `None` when `ξ² = 0`.
    pub fn build(&self, base: &NngpPrior) -> Result<Option<NngpPrior>> {
        self.validate(base.spec())?;
        if self.xi2 == 0.0 {
            return Ok(None);
        }
        let spec = CovarianceSpec::new(self.xi2, self.varrho2, base.spec().gamma())?;
        NngpPrior::new(base.grid().clone(), spec).map(Some)
    }
}

/// Static NNGP at time 0 plus the grid innovation.
#[derive(Debug, Clone)]
pub struct DynamicPrior {
    pub base: NngpPrior,
    pub innovation: Option<NngpPrior>,
}

impl DynamicPrior {
    pub fn new(base: NngpPrior, innovation: &InnovationSpec) -> Result<Self> {
        let innovation = innovation.build(&base)?;
        Ok(DynamicPrior { base, innovation })
    }

    /// Grid values at times `0..=t_max`: `β_0 ~ NNGP(0, Σ̃(1, τ²))`,
    /// `β_t = β_{t−1} + ζ_t`.
    pub fn sample_grids<R: Rng + ?Sized>(&self, t_max: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let mut grids = Vec::with_capacity(t_max + 1);
        grids.push(self.base.sample_grid(rng));
        for t in 1..=t_max {
            let next = match &self.innovation {
                Some(innov) => {
                    let z = innov.sample_grid(rng);
                    grids[t - 1].iter().zip(z).map(|(a, b)| a + b).collect()
                }
                None => grids[t - 1].clone(),
            };
            grids.push(next);
        }
        grids
    }
}

/// Per-time latent fields sharing one reference grid.
#[derive(Debug, Clone)]
pub struct DynamicField {
    pub fields: Vec<LatentField>,
}

impl DynamicField {
    pub fn times(&self) -> usize {
        self.fields.len()
    }

    pub fn field(&self, t: usize) -> &LatentField {
        &self.fields[t]
    }
}

/// Draw the lattice values of a dynamic field at times `0..=t_max`.
pub fn sample_dynamic_prior<R: Rng + ?Sized>(prior: &DynamicPrior, t_max: usize, rng: &mut R) -> DynamicField {
    DynamicField {
        fields: prior.sample_grids(t_max, rng).into_iter().map(LatentField::new).collect(),
    }
}

/// Reveal the field at time `t` at new sites, conditionally on that time's
/// lattice values under the static kernel.
pub fn extend_dynamic_offgrid<R: Rng + ?Sized>(
    field: &mut DynamicField,
    prior: &DynamicPrior,
    t: usize,
    sites: &[Point],
    provenance: Provenance,
    rng: &mut R,
) -> Result<Vec<SiteId>> {
    let times = field.times();
    let slot = field
        .fields
        .get_mut(t)
        .ok_or_else(|| Error::param("t", format!("time {t} outside 0..{times}")))?;
    extend_offgrid(slot, &prior.base, sites, provenance, rng)
}

/// Joint pCN proposal of every time: `β̈_t = √(1−ς²) β_t + ς ε_t` with `ε`
/// a dynamic-prior draw revealed at the same sites.
pub fn st_pcn_propose<R: Rng + ?Sized>(
    field: &DynamicField,
    prior: &DynamicPrior,
    varsigma: f64,
    rng: &mut R,
) -> Vec<PcnProposal> {
    let eps = prior.sample_grids(field.times().saturating_sub(1), rng);
    field
        .fields
        .iter()
        .zip(&eps)
        .map(|(f, e)| {
            let key = StreamKey::draw(rng);
            pcn_combine(f, e, varsigma, &key)
        })
        .collect()
}

/// Rate prior across times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TemporalRates {
    Independent,
    Ngar1 { w: Vec<f64>, a: Vec<f64> },
}

impl TemporalRates {
    pub fn default_ngar1(k: usize) -> Self {
        TemporalRates::Ngar1 {
            w: vec![DEFAULT_W; k],
            a: default_ngar1_a(k),
        }
    }
}

/// Spatiotemporal model: the spatial ingredients plus innovation and
/// temporal rate prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StModelSpec {
    pub spatial: ModelSpec,
    pub innovation: InnovationSpec,
    pub rates: TemporalRates,
}

impl StModelSpec {
    /// Defaults: `ξ² = 1`, `ϱ² = max(0.5, τ²)`, NGAR1 rates with `w = 0.5`.
    pub fn new(spatial: ModelSpec) -> Self {
        let k = spatial.levels;
        let innovation = InnovationSpec {
            varrho2: DEFAULT_VARRHO2.max(spatial.covariance.tau2()),
            ..InnovationSpec::default()
        };
        StModelSpec {
            spatial,
            innovation,
            rates: TemporalRates::default_ngar1(k),
        }
    }

    pub fn build(&self, window: &Window) -> Result<Model> {
        let base = self.spatial.build_prior(window)?;
        let innovation = self.innovation.build(&base)?;
        let rates_prior = match &self.rates {
            TemporalRates::Independent => RatePrior::Independent(self.spatial.prior.clone()),
            TemporalRates::Ngar1 { w, a } => {
                RatePrior::Ngar1(NGAR1Spec::new(w.clone(), a.clone(), self.spatial.prior.clone())?)
            }
        };
        Ok(Model {
            window: *window,
            levels: self.spatial.levels,
            prior: base,
            innovation,
            rates_prior,
        })
    }

    pub fn rg(&self) -> &RGSpec {
        &self.spatial.prior
    }
}

/// Build a spatiotemporal chain from a time-stamped pattern with times
/// `0..=horizon`.
pub fn initialize_st(
    pattern: &PointPattern,
    horizon: u32,
    model: &StModelSpec,
    config: &SamplerConfig,
) -> Result<Chain> {
    let slices = pattern.split_by_time(horizon)?;
    let m = model.build(pattern.window())?;
    Chain::new(m, slices.into_iter().map(|p| p.points().to_vec()).collect(), config)
}

/// Run a spatiotemporal fit to completion.
pub fn run_st(pattern: &PointPattern, horizon: u32, model: &StModelSpec, config: &SamplerConfig) -> Result<RunOutput> {
    initialize_st(pattern, horizon, model, config)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::homogeneous_poisson;
    use crate::nngp::ReferenceGrid;
    use crate::rng::seeded;
    use crate::sampler::{run, DeltaChoice};
    use std::sync::Arc;

    fn dyn_prior(xi2: f64) -> DynamicPrior {
        let w = Window::square(3.0).unwrap();
        let grid = Arc::new(ReferenceGrid::build(&w, 25, 8).unwrap());
        let base = NngpPrior::new(grid, CovarianceSpec::unit(0.5, 1.95).unwrap()).unwrap();
        DynamicPrior::new(base, &InnovationSpec { xi2, varrho2: 0.5 }).unwrap()
    }

    #[test]
    fn single_time_is_the_spatial_prior() {
        let p = dyn_prior(1.0);
        let a = sample_dynamic_prior(&p, 0, &mut seeded(4));
        let b = p.base.sample_grid(&mut seeded(4));
        assert_eq!(a.times(), 1);
        assert_eq!(a.field(0).grid(), &b[..]);
    }

    #[test]
    fn zero_innovation_freezes_the_field() {
        let p = dyn_prior(0.0);
        assert!(p.innovation.is_none());
        let f = sample_dynamic_prior(&p, 3, &mut seeded(1));
        for t in 1..4 {
            assert_eq!(f.field(t).grid(), f.field(0).grid());
        }
    }

    #[test]
    fn innovation_constraints() {
        let base = CovarianceSpec::unit(1.0, 1.95).unwrap();
        assert!(InnovationSpec { xi2: 1.0, varrho2: 1.0 }.validate(&base).is_ok());
        assert!(InnovationSpec { xi2: 1.1, varrho2: 1.0 }.validate(&base).is_err());
        assert!(InnovationSpec { xi2: 0.5, varrho2: 0.9 }.validate(&base).is_err());
        assert!(InnovationSpec { xi2: -0.1, varrho2: 2.0 }.validate(&base).is_err());
    }

    #[test]
    fn marginal_variance_grows_by_xi2() {
        let p = dyn_prior(0.3);
        let mut rng = seeded(8);
        let n = 10_000;
        let site = 12;
        let mut sums = [[0.0f64; 2]; 3];
        let (mut cross, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let g = p.sample_grids(2, &mut rng);
            for t in 0..3 {
                sums[t][0] += g[t][site];
                sums[t][1] += g[t][site] * g[t][site];
            }
            cross += g[1][site] * g[2][site];
            m1 += g[1][site];
            m2 += g[2][site];
        }
        let nf = n as f64;
        for (t, s) in sums.iter().enumerate() {
            let var = s[1] / nf - (s[0] / nf).powi(2);
            let want = 1.0 + t as f64 * 0.3;
            let se = want * (2.0 / nf).sqrt();
            assert!((var - want).abs() < 3.0 * se, "t={t}: {var} vs {want}");
        }
        let var = |s: &[f64; 2]| s[1] / nf - (s[0] / nf).powi(2);
        let corr = (cross / nf - m1 * m2 / nf / nf) / (var(&sums[1]) * var(&sums[2])).sqrt();
        let want = (1.3f64 / 1.6).sqrt();
        assert!((corr - want).abs() < 3.0 * (1.0 - want * want) / nf.sqrt(), "{corr} vs {want}");
    }

    #[test]
    fn offgrid_draws_depend_only_on_their_own_time() {
        let p = dyn_prior(1.0);
        let mut rng = seeded(2);
        let site = [Point::new(1.3, 1.7)];
        let (mut a, mut b, mut ab) = (0.0f64, 0.0f64, 0.0f64);
        let (mut ma, mut mb) = (0.0f64, 0.0f64);
        let n = 4000;
        // Residuals from the conditional means, same grids, independent draws.
        let grids = p.sample_grids(1, &mut rng);
        let ca = p.base.conditional_at(&site[0]).unwrap();
        for _ in 0..n {
            let mut f = DynamicField {
                fields: grids.iter().cloned().map(LatentField::new).collect(),
            };
            let i0 = extend_dynamic_offgrid(&mut f, &p, 0, &site, Provenance::Data, &mut rng).unwrap();
            let i1 = extend_dynamic_offgrid(&mut f, &p, 1, &site, Provenance::Data, &mut rng).unwrap();
            let r0 = f.field(0).value(i0[0]).unwrap() - ca.mean(&grids[0]);
            let r1 = f.field(1).value(i1[0]).unwrap() - ca.mean(&grids[1]);
            ma += r0;
            mb += r1;
            a += r0 * r0;
            b += r1 * r1;
            ab += r0 * r1;
        }
        let nf = n as f64;
        let cov = ab / nf - ma * mb / nf / nf;
        let corr = cov / ((a / nf) * (b / nf)).sqrt();
        assert!(corr.abs() < 4.0 / nf.sqrt(), "{corr}");
        let mut f = DynamicField { fields: vec![LatentField::new(grids[0].clone())] };
        assert!(extend_dynamic_offgrid(&mut f, &p, 0, &[], Provenance::Data, &mut rng).unwrap().is_empty());
        assert!(extend_dynamic_offgrid(&mut f, &p, 3, &site, Provenance::Data, &mut rng).is_err());
    }

    #[test]
    fn st_pcn_limits() {
        let p = dyn_prior(0.5);
        let mut rng = seeded(3);
        let f = sample_dynamic_prior(&p, 2, &mut rng);
        let same = st_pcn_propose(&f, &p, 0.0, &mut rng);
        for (t, prop) in same.iter().enumerate() {
            assert_eq!(prop.grid(), f.field(t).grid());
        }
        let mut r1 = seeded(7);
        let fresh = st_pcn_propose(&f, &p, 1.0, &mut r1);
        let mut r2 = seeded(7);
        let eps = p.sample_grids(2, &mut r2);
        for (prop, e) in fresh.iter().zip(&eps) {
            assert_eq!(prop.grid(), &e[..]);
        }
    }

    #[test]
    fn single_time_reduces_to_the_spatial_chain() {
        let w = Window::square(2.0).unwrap();
        let pattern = homogeneous_poisson(&w, 12.0, &mut seeded(6));
        let spatial = ModelSpec::new(2, 1.0, 36, 8).unwrap();
        let config = SamplerConfig {
            iterations: 80,
            burn_in: 20,
            squares: 4,
            delta: DeltaChoice::Auto { target: 60.0 },
            seed: 12,
            ..SamplerConfig::default()
        };
        let a = run(&pattern, &spatial, &config).unwrap();
        for rates in [TemporalRates::Independent, TemporalRates::default_ngar1(2)] {
            let st = StModelSpec {
                rates,
                ..StModelSpec::new(spatial.clone())
            };
            let b = run_st(&pattern, 0, &st, &config).unwrap();
            let ta: Vec<_> = a.samples.iter().map(|s| s.rates.clone()).collect();
            let tb: Vec<_> = b.samples.iter().map(|s| s.rates.clone()).collect();
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn two_time_threshold_ratio_is_the_double_product() {
        use crate::estimator::RateVector;
        use crate::sampler::accept::log_alpha_partition;
        let rates = [[1.0, 3.0], [2.0, 5.0]];
        let deltas = [1.5, 2.0];
        let n = [([4usize, 6], [5usize, 5]), ([3, 9], [1, 11])];
        let y = [([7usize, 2], [6usize, 3]), ([2, 8], [4, 6])];
        let mut log_a = 0.0;
        let mut direct = 1.0;
        for t in 0..2 {
            let rv = RateVector::new(rates[t].to_vec()).unwrap();
            log_a += log_alpha_partition(&rv.log_ratios(deltas[t]), &rates[t], &n[t].0, &n[t].1, &y[t].0, &y[t].1);
            let star = deltas[t] * rates[t][1] - rates[t][0];
            for k in 0..2 {
                let r = (deltas[t] * rates[t][1] - rates[t][k]) / star;
                direct *= r.powi(n[t].1[k] as i32 - n[t].0[k] as i32);
                direct *= rates[t][k].powi(y[t].1[k] as i32 - y[t].0[k] as i32);
            }
        }
        // r = (1, 3/7) then (1, 5/8): (7/3)(3)(5/8)^2(2/5)^2 = 7/16.
        let oracle = 7.0 / 16.0;
        assert!((direct - oracle).abs() < 1e-12 * oracle);
        assert!((log_a - oracle.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_time_chain_runs_with_audit() {
        let w = Window::square(2.0).unwrap();
        let mut rng = seeded(9);
        let p0 = homogeneous_poisson(&w, 6.0, &mut rng);
        let p1 = homogeneous_poisson(&w, 9.0, &mut rng);
        let pattern = PointPattern::stack(w, &[p0, p1]).unwrap();
        let st = StModelSpec::new(ModelSpec::new(2, 1.0, 36, 8).unwrap());
        let config = SamplerConfig {
            iterations: 40,
            burn_in: 10,
            squares: 4,
            delta: DeltaChoice::Auto { target: 40.0 },
            audit: true,
            ..SamplerConfig::default()
        };
        let out = run_st(&pattern, 1, &st, &config).unwrap();
        assert_eq!(out.samples[0].rates.len(), 2);
        assert_eq!(out.summary.deltas.len(), 2);
        assert_eq!(out.summary.rate_scales.len(), 1);
    }
}
