//! Pseudo-marginal Gibbs sampler for level-set Cox processes.
//!
//! One sweep updates, in order: the latent field β by a pCN move, the
//! auxiliary process N square by square, the rates λ by an adaptive random
//! walk, and the thresholds c by a uniform random walk. Virtual updates
//! after the N and λ blocks discard latent values that no longer belong to
//! the state.
//!
//! The same engine runs the spatiotemporal model: the chain holds one time
//! slice per observation time, and a purely spatial fit is the single-slice
//! case.

pub mod accept;
pub mod adapt;

pub use accept::{log_alpha_partition, log_alpha_rates, log_alpha_square, log_walk_jacobian};
pub use adapt::{walk_target, CovarianceWalk, ScalarTuner, SquareTuner};

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceSpec;
use crate::error::{Error, Result};
use crate::estimator::{
    auto_delta, log_m_hat, sample_aux, sample_slab, AuxiliaryProcess, RateVector,
};
use crate::geometry::{is_strictly_increasing, PartitionLevels, Point, PointPattern, Window};
use crate::nngp::{
    extend_offgrid, pcn_combine, prune_scratch, LatentField, NngpPrior, OffgridSite, Provenance,
    ReferenceGrid, SiteId,
};
use crate::priors::{ngar1_joint_log_density, rg_log_density_unnorm, NGAR1Spec, RGSpec};
use crate::rng::{seeded, ChainRng, StreamKey};

/// Target acceptance of the pCN move.
pub const PCN_TARGET: f64 = 0.234;
/// Target acceptance of the threshold walk.
pub const LEVEL_TARGET: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaChoice {
    Fixed(f64),
    /// Choose δ from the initial rates so that `E|N| = target`.
    Auto { target: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub squares: usize,
    pub tune_squares: bool,
    pub delta: DeltaChoice,
    pub varsigma: f64,
    pub rate_step: f64,
    pub level_width: f64,
    /// Last iteration (exclusive) at which proposals adapt; burn-in by default.
    pub adapt_until: Option<usize>,
    pub seed: u64,
    /// Keep `λ_1 < … < λ_K`; on by default from three levels.
    pub fixed_order: Option<bool>,
    /// Random walk on `ln λ` (with Jacobian) instead of on `λ`.
    pub log_walk: bool,
    /// Store a latent-field snapshot every this many retained draws.
    pub snapshot_every: usize,
    /// Recompute every cached count after every block.
    pub audit: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            iterations: 10_000,
            burn_in: 5_000,
            thin: 1,
            squares: 64,
            tune_squares: true,
            delta: DeltaChoice::Auto { target: 6000.0 },
            varsigma: 0.1,
            rate_step: 0.05,
            level_width: 0.2,
            adapt_until: None,
            seed: 0,
            fixed_order: None,
            log_walk: true,
            snapshot_every: 10,
            audit: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(Error::param("iterations", "must exceed burn_in"));
        }
        if self.thin == 0 {
            return Err(Error::param("thin", "must be at least 1"));
        }
        if self.squares == 0 {
            return Err(Error::param("squares", "must be at least 1"));
        }
        match self.delta {
            DeltaChoice::Fixed(d) if !(d > 1.0 && d.is_finite()) => {
                return Err(Error::param("delta", format!("must exceed 1, got {d}")))
            }
            DeltaChoice::Auto { target } if !(target > 0.0 && target.is_finite()) => {
                return Err(Error::param("target_aux", "must be positive"))
            }
            _ => {}
        }
        if !(self.varsigma > 0.0 && self.varsigma <= 1.0) {
            return Err(Error::param("varsigma", "must lie in (0, 1]"));
        }
        if !(self.rate_step > 0.0 && self.rate_step.is_finite()) {
            return Err(Error::param("rate_step", "must be positive"));
        }
        if !(self.level_width > 0.0 && self.level_width.is_finite()) {
            return Err(Error::param("level_width", "must be positive"));
        }
        if self.snapshot_every == 0 {
            return Err(Error::param("snapshot_every", "must be at least 1"));
        }
        Ok(())
    }

    pub fn adapt_until(&self) -> usize {
        self.adapt_until.unwrap_or(self.burn_in)
    }

    pub fn fixed_order_for(&self, k: usize) -> bool {
        self.fixed_order.unwrap_or(k >= 3)
    }

    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

/// Spatial model: number of levels, latent covariance, NNGP size and the
/// rate prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub levels: usize,
    pub covariance: CovarianceSpec,
    pub grid_size: usize,
    pub neighbors: usize,
    pub prior: RGSpec,
}

impl ModelSpec {
    pub fn new(levels: usize, tau2: f64, grid_size: usize, neighbors: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::param("levels", "need at least one level"));
        }
        Ok(ModelSpec {
            levels,
            covariance: CovarianceSpec::unit(tau2, crate::covariance::DEFAULT_GAMMA)?,
            grid_size,
            neighbors,
            prior: RGSpec::default_for(levels),
        })
    }

    pub fn build_prior(&self, window: &Window) -> Result<NngpPrior> {
        let grid = Arc::new(ReferenceGrid::build(window, self.grid_size, self.neighbors)?);
        NngpPrior::new(grid, self.covariance)
    }
}

/// Prior on the rate matrix of a chain.
#[derive(Debug, Clone)]
pub enum RatePrior {
    /// Independent repulsive gamma prior at every time.
    Independent(RGSpec),
    /// NGAR1 coupling across times; all rates move jointly.
    Ngar1(NGAR1Spec),
}

/// Fixed ingredients of a chain.
#[derive(Debug, Clone)]
pub struct Model {
    pub window: Window,
    pub levels: usize,
    pub prior: NngpPrior,
    /// Grid innovation of the dynamic field; `None` keeps the grid fixed over time.
    pub innovation: Option<NngpPrior>,
    pub rates_prior: RatePrior,
}

#[derive(Debug, Clone)]
pub(crate) struct Slice {
    points: Vec<Point>,
    data_sites: Vec<SiteId>,
    field: LatentField,
    aux: AuxiliaryProcess,
    rates: RateVector,
    delta: f64,
    y_counts: Vec<usize>,
    n_counts: Vec<usize>,
}

impl Slice {
    fn log_ratios(&self) -> Vec<f64> {
        self.rates.log_ratios(self.delta)
    }

    fn value(&self, site: Option<SiteId>) -> Result<f64> {
        site.and_then(|id| self.field.value(id)).ok_or(Error::MissingLatentValue)
    }

    fn data_values(&self) -> Vec<f64> {
        self.data_sites
            .iter()
            .map(|&id| self.field.value(id).expect("data sites are never pruned"))
            .collect()
    }

    fn count_data(&self, levels: &PartitionLevels) -> Vec<usize> {
        tally(self.data_values().into_iter(), levels)
    }

    fn count_aux_below(&self, height: f64, levels: &PartitionLevels) -> Result<Vec<usize>> {
        let mut counts = vec![0; levels.num_regions()];
        for p in self.aux.below(height) {
            counts[levels.region_of(self.value(p.site)?)] += 1;
        }
        Ok(counts)
    }

    fn log_likelihood_part(&self, area: f64, counts: &[usize]) -> f64 {
        let lm = log_m_hat(&self.rates, self.delta, counts, area).expect("δ validated at start");
        lm + self
            .y_counts
            .iter()
            .zip(self.rates.as_slice())
            .map(|(&y, l)| if y == 0 { 0.0 } else { y as f64 * l.ln() })
            .sum::<f64>()
    }

    /// Reveal β at unveiled points below `height` that lack a value.
    fn reveal_aux<R: Rng + ?Sized>(
        &mut self,
        prior: &NngpPrior,
        height: f64,
        provenance: Provenance,
        rng: &mut R,
    ) -> Result<()> {
        let idx: Vec<usize> = self
            .aux
            .points()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.site.is_none() && p.height < height)
            .map(|(i, _)| i)
            .collect();
        let locs: Vec<Point> = idx.iter().map(|&i| self.aux.points()[i].location).collect();
        let ids = extend_offgrid(&mut self.field, prior, &locs, provenance, rng)?;
        let pts = self.aux.points_mut();
        for (i, id) in idx.into_iter().zip(ids) {
            pts[i].site = Some(id);
        }
        Ok(())
    }

    /// Virtual update: keep β only at data sites and at points of `N`.
    fn virtual_update(&mut self) -> Result<()> {
        let star = self.aux.lambda_star();
        let mut doomed = false;
        for p in self.aux.points_mut() {
            if let Some(id) = p.site {
                let prov = if p.height < star {
                    Provenance::Auxiliary
                } else {
                    doomed = true;
                    p.site = None;
                    Provenance::Scratch
                };
                self.field.set_provenance(id, prov);
            }
        }
        if doomed {
            prune_scratch(&mut self.field, |_, s| s.provenance != Provenance::Scratch)?;
        }
        Ok(())
    }
}

fn tally<I: Iterator<Item = f64>>(values: I, levels: &PartitionLevels) -> Vec<usize> {
    let mut counts = vec![0; levels.num_regions()];
    for v in values {
        counts[levels.region_of(v)] += 1;
    }
    counts
}

/// Initial rates: the homogeneous MLE times a small per-level spread so
/// that no two levels tie.
pub fn initial_rates(events: usize, area: f64, levels: usize) -> Vec<f64> {
    let base = events as f64 / area;
    let kf = levels as f64;
    (0..levels)
        .map(|k| base * (1.0 + 0.1 * (k as f64 - (kf - 1.0) / 2.0) / kf))
        .collect()
}

/// Acceptance outcome of one sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepAcceptance {
    pub beta: f64,
    /// Fraction of squares whose proposal was accepted.
    pub aux: f64,
    /// Fraction of rate blocks accepted.
    pub rates: f64,
    pub levels: f64,
}

impl SweepAcceptance {
    fn add(&mut self, other: &SweepAcceptance) {
        self.beta += other.beta;
        self.aux += other.aux;
        self.rates += other.rates;
        self.levels += other.levels;
    }

    fn scaled(&self, f: f64) -> SweepAcceptance {
        SweepAcceptance {
            beta: self.beta * f,
            aux: self.aux * f,
            rates: self.rates * f,
            levels: self.levels * f,
        }
    }
}

/// One retained iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub iteration: usize,
    /// `rates[t][k]`; a single row for spatial fits.
    pub rates: Vec<Vec<f64>>,
    pub levels: Vec<f64>,
    pub log_pseudo_marginal: f64,
    pub aux_count: usize,
    pub accept: SweepAcceptance,
    /// Index of the accompanying [`PosteriorDraw`], if one was stored.
    pub snapshot: Option<usize>,
}

/// Full state needed to evaluate the intensity surface of one draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraw {
    pub iteration: usize,
    pub rates: Vec<Vec<f64>>,
    pub levels: Vec<f64>,
    /// Lattice values per time.
    pub grids: Vec<Vec<f64>>,
    /// Latent values at the observed events per time, in input order.
    pub data_values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub enum Output {
    Sample(SampleRecord),
    Draw(PosteriorDraw),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub retained: usize,
    /// Mean acceptance after burn-in.
    pub acceptance: SweepAcceptance,
    pub varsigma: f64,
    pub level_width: f64,
    pub squares: usize,
    pub deltas: Vec<f64>,
    pub rate_scales: Vec<f64>,
    pub mean_aux_count: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub samples: Vec<SampleRecord>,
    pub draws: Vec<PosteriorDraw>,
    pub summary: RunSummary,
}

/// A running chain: model, configuration, state and adaptation.
#[derive(Debug, Clone)]
pub struct Chain {
    model: Model,
    config: SamplerConfig,
    slices: Vec<Slice>,
    levels: PartitionLevels,
    iteration: usize,
    rng: ChainRng,
    varsigma: ScalarTuner,
    level_width: ScalarTuner,
    rate_walks: Vec<CovarianceWalk>,
    square_tuner: Option<SquareTuner>,
    fixed_order: bool,
    post_burn: SweepAcceptance,
    post_burn_sweeps: usize,
    aux_total: f64,
}

/// Initial state for a spatial fit.
pub fn initialize(pattern: &PointPattern, model: &ModelSpec, config: &SamplerConfig) -> Result<Chain> {
    let window = *pattern.window();
    let m = Model {
        window,
        levels: model.levels,
        prior: model.build_prior(&window)?,
        innovation: None,
        rates_prior: RatePrior::Independent(model.prior.clone()),
    };
    Chain::new(m, vec![pattern.points().to_vec()], config)
}

/// Run a spatial fit to completion, keeping everything in memory.
pub fn run(pattern: &PointPattern, model: &ModelSpec, config: &SamplerConfig) -> Result<RunOutput> {
    initialize(pattern, model, config)?.run()
}

impl Chain {
    /// Build the initial state from one event list per time.
    pub fn new(model: Model, patterns: Vec<Vec<Point>>, config: &SamplerConfig) -> Result<Self> {
        config.validate()?;
        let k = model.levels;
        if let RatePrior::Independent(rg) = &model.rates_prior {
            if rg.len() != k {
                return Err(Error::param("alpha", "rate prior must have one entry per level"));
            }
        }
        if let RatePrior::Ngar1(spec) = &model.rates_prior {
            if spec.len() != k {
                return Err(Error::param("w", "NGAR1 prior must have one entry per level"));
            }
        }
        let total: usize = patterns.iter().map(Vec::len).sum();
        if total == 0 {
            return Err(Error::EmptyPattern("fitting needs at least one event".into()));
        }
        let area = model.window.area();
        let mut rng = seeded(config.seed);
        let grids = dynamic_grids(&model, patterns.len(), &mut rng);
        let levels = PartitionLevels::initial(k)?;
        let times = patterns.len();
        let mut slices = Vec::with_capacity(times);
        for (points, grid) in patterns.into_iter().zip(grids) {
            let mut field = LatentField::new(grid);
            let data_sites = extend_offgrid(&mut field, &model.prior, &points, Provenance::Data, &mut rng)?;
            let events = if points.is_empty() { total.div_ceil(times) } else { points.len() };
            let rates = RateVector::new(initial_rates(events, area, k))?;
            let delta = match config.delta {
                DeltaChoice::Fixed(d) => d,
                DeltaChoice::Auto { target } => auto_delta(&rates, area, target),
            };
            let aux = sample_aux(&model.window, rates.lambda_star(delta), config.squares, &mut rng)?;
            let mut slice = Slice {
                points,
                data_sites,
                field,
                aux,
                rates,
                delta,
                y_counts: Vec::new(),
                n_counts: Vec::new(),
            };
            slice.reveal_aux(&model.prior, f64::INFINITY, Provenance::Auxiliary, &mut rng)?;
            slice.y_counts = slice.count_data(&levels);
            slice.n_counts = slice.count_aux_below(slice.aux.lambda_star(), &levels)?;
            slices.push(slice);
        }
        let fixed_order = config.fixed_order_for(k);
        let rate_walks = match model.rates_prior {
            RatePrior::Independent(_) => slices.iter().map(|_| CovarianceWalk::new(k, config.rate_step)).collect(),
            RatePrior::Ngar1(_) => vec![CovarianceWalk::new(k * slices.len(), config.rate_step)],
        };
        Ok(Chain {
            config: config.clone(),
            levels,
            iteration: 0,
            rng,
            varsigma: ScalarTuner::new(config.varsigma, PCN_TARGET, 1e-4, 1.0),
            level_width: ScalarTuner::new(config.level_width, LEVEL_TARGET, 1e-6, 5.0),
            rate_walks,
            square_tuner: config.tune_squares.then(|| SquareTuner::new(25, 1 << 14)),
            fixed_order,
            post_burn: SweepAcceptance::default(),
            post_burn_sweeps: 0,
            aux_total: 0.0,
            slices,
            model,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn times(&self) -> usize {
        self.slices.len()
    }

    pub fn levels(&self) -> &PartitionLevels {
        &self.levels
    }

    pub fn rates(&self, t: usize) -> &RateVector {
        &self.slices[t].rates
    }

    pub fn rate_matrix(&self) -> Vec<Vec<f64>> {
        self.slices.iter().map(|s| s.rates.as_slice().to_vec()).collect()
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.slices[t].delta
    }

    pub fn field(&self, t: usize) -> &LatentField {
        &self.slices[t].field
    }

    pub fn aux(&self, t: usize) -> &AuxiliaryProcess {
        &self.slices[t].aux
    }

    /// Observed events of time `t`.
    pub fn events(&self, t: usize) -> &[Point] {
        &self.slices[t].points
    }

    pub fn data_counts(&self, t: usize) -> &[usize] {
        &self.slices[t].y_counts
    }

    pub fn aux_counts(&self, t: usize) -> &[usize] {
        &self.slices[t].n_counts
    }

    pub fn data_values(&self, t: usize) -> Vec<f64> {
        self.slices[t].data_values()
    }

    pub fn varsigma(&self) -> f64 {
        self.varsigma.value()
    }

    pub fn level_width(&self) -> f64 {
        self.level_width.value()
    }

    pub fn squares(&self) -> usize {
        self.slices[0].aux.squares().count()
    }

    fn adapting(&self) -> bool {
        self.iteration < self.config.adapt_until()
    }

    /// `ln M̂ + Σ_k |Y_k| ln λ_k` summed over times, from cached counts.
    pub fn log_pseudo_marginal(&self) -> f64 {
        let area = self.model.window.area();
        self.slices.iter().map(|s| s.log_likelihood_part(area, &s.n_counts)).sum()
    }

    fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// pCN move of the latent field at every revealed location, jointly
    /// over times. Returns the acceptance probability.
    pub fn update_beta(&mut self) -> Result<f64> {
        let vs = self.varsigma.value();
        let eps = dynamic_grids(&self.model, self.slices.len(), &mut self.rng);
        let mut log_a = 0.0;
        let mut proposals = Vec::with_capacity(self.slices.len());
        for (slice, e) in self.slices.iter().zip(&eps) {
            let key = StreamKey::draw(&mut self.rng);
            let prop = pcn_combine(&slice.field, e, vs, &key);
            let y_new = tally(slice.data_sites.iter().map(|&id| prop.value(id)), &self.levels);
            let mut n_new = vec![0; self.model.levels];
            for p in slice.aux.active() {
                let id = p.site.ok_or(Error::MissingLatentValue)?;
                n_new[self.levels.region_of(prop.value(id))] += 1;
            }
            log_a += log_alpha_partition(
                &slice.log_ratios(),
                slice.rates.as_slice(),
                &slice.n_counts,
                &n_new,
                &slice.y_counts,
                &y_new,
            );
            proposals.push((prop, y_new, n_new));
        }
        let accept = self.uniform().ln() < log_a;
        if accept {
            for (slice, (prop, y, n)) in self.slices.iter_mut().zip(proposals) {
                slice.field.accept(prop);
                slice.y_counts = y;
                slice.n_counts = n;
            }
        }
        let prob = log_a.min(0.0).exp();
        if self.adapting() {
            self.varsigma.update(prob);
        }
        Ok(if accept { 1.0 } else { 0.0 })
    }

    /// Independent proposal of N in every square of every time, each square
    /// accepted on its own; then the virtual update. Returns the fraction
    /// of accepted squares.
    pub fn update_aux(&mut self) -> Result<f64> {
        let k = self.model.levels;
        let mut accepted = 0usize;
        let mut proposed = 0usize;
        let mut prob_sum = 0.0;
        for t in 0..self.slices.len() {
            let key = StreamKey::draw(&mut self.rng);
            let slice = &self.slices[t];
            let squares = *slice.aux.squares();
            let lr = slice.log_ratios();
            let star = slice.aux.lambda_star();
            let mut current = vec![vec![0usize; k]; squares.count()];
            for p in slice.aux.active() {
                current[p.square as usize][self.levels.region_of(slice.value(p.site)?)] += 1;
            }
            let prior = &self.model.prior;
            let levels = &self.levels;
            let grid = slice.field.grid();
            let outcomes = (0..squares.count())
                .into_par_iter()
                .map(|l| {
                    let mut rng = key.stream(l as u64);
                    let fresh = sample_slab(&squares, l, 0.0, star, &mut rng);
                    let mut counts = vec![0usize; k];
                    let mut sites = Vec::with_capacity(fresh.len());
                    for p in &fresh {
                        let cond = prior.conditional_at(&p.location)?;
                        let z: f64 = StandardNormal.sample(&mut rng);
                        let value = cond.draw(grid, z);
                        counts[levels.region_of(value)] += 1;
                        sites.push(OffgridSite {
                            location: p.location,
                            value,
                            provenance: Provenance::Auxiliary,
                            conditional: cond,
                        });
                    }
                    let log_a = log_alpha_square(&lr, &current[l], &counts);
                    let accept = rng.random::<f64>().ln() < log_a;
                    Ok((accept, log_a.min(0.0).exp(), accept.then_some((fresh, sites, counts))))
                })
                .collect::<Result<Vec<_>>>()?;
            let slice = &mut self.slices[t];
            let mut fresh_by_square = Vec::with_capacity(outcomes.len());
            for (l, (acc, prob, payload)) in outcomes.into_iter().enumerate() {
                proposed += 1;
                prob_sum += prob;
                match payload {
                    Some((mut pts, sites, counts)) => {
                        accepted += usize::from(acc);
                        for (p, s) in pts.iter_mut().zip(sites) {
                            p.site = Some(slice.field.insert(s));
                        }
                        for (n, (c, old)) in slice.n_counts.iter_mut().zip(counts.iter().zip(&current[l])) {
                            *n = *n + c - old;
                        }
                        fresh_by_square.push(Some(pts));
                    }
                    None => fresh_by_square.push(None),
                }
            }
            for gone in slice.aux.apply_sweep(fresh_by_square) {
                if let Some(id) = gone.site {
                    slice.field.remove(id);
                }
            }
        }
        if self.adapting() {
            if let Some(tuner) = self.square_tuner.as_mut() {
                let current = self.slices[0].aux.squares().count();
                if let Some(next) = tuner.record(prob_sum / proposed as f64, current) {
                    for slice in &mut self.slices {
                        slice.aux.resquare(next)?;
                    }
                }
            }
        }
        Ok(accepted as f64 / proposed as f64)
    }

    /// Random-walk move of the rates: per time under independent priors,
    /// jointly under NGAR1. Returns the fraction of accepted blocks.
    pub fn update_lambda(&mut self) -> Result<f64> {
        let groups: Vec<Vec<usize>> = match self.model.rates_prior {
            RatePrior::Independent(_) => (0..self.slices.len()).map(|t| vec![t]).collect(),
            RatePrior::Ngar1(_) => vec![(0..self.slices.len()).collect()],
        };
        let mut accepted = 0;
        for (g, times) in groups.iter().enumerate() {
            accepted += usize::from(self.update_rate_block(g, times)?);
        }
        Ok(accepted as f64 / groups.len() as f64)
    }

    fn rate_log_prior(&self, times: &[usize], rates: &[Vec<f64>]) -> f64 {
        match &self.model.rates_prior {
            RatePrior::Independent(rg) => rates.iter().map(|r| rg_log_density_unnorm(r, rg)).sum(),
            RatePrior::Ngar1(spec) => {
                debug_assert_eq!(times.len(), self.slices.len());
                ngar1_joint_log_density(rates, spec)
            }
        }
    }

    fn update_rate_block(&mut self, g: usize, times: &[usize]) -> Result<bool> {
        let k = self.model.levels;
        let area = self.model.window.area();
        let log_walk = self.config.log_walk;
        let inc = self.rate_walks[g].increment(&mut self.rng);
        let current: Vec<Vec<f64>> = times.iter().map(|&t| self.slices[t].rates.as_slice().to_vec()).collect();
        let proposed: Vec<Vec<f64>> = current
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .zip(&inc[i * k..(i + 1) * k])
                    .map(|(l, d)| if log_walk { l * d.exp() } else { l + d })
                    .collect()
            })
            .collect();
        let in_support = proposed.iter().all(|row| {
            row.iter().all(|&l| l > 0.0 && l.is_finite()) && (!self.fixed_order || is_strictly_increasing(row))
        });
        // Every |N̈_k| ln r̈_k term is non-positive, so dropping them bounds
        // log α from above; proposals failing the bound are rejected before
        // any auxiliary point is unveiled.
        let mut accept = false;
        if in_support {
            let mut bound = self.rate_log_prior(times, &proposed) - self.rate_log_prior(times, &current);
            let none = vec![0usize; k];
            let mut props = Vec::with_capacity(times.len());
            for (i, &t) in times.iter().enumerate() {
                let prop = RateVector::new(proposed[i].clone())?;
                let slice = &self.slices[t];
                bound += log_alpha_rates(
                    area,
                    slice.rates.as_slice(),
                    prop.as_slice(),
                    &slice.log_ratios(),
                    &prop.log_ratios(slice.delta),
                    &slice.n_counts,
                    &none,
                    &slice.y_counts,
                );
                if log_walk {
                    bound += log_walk_jacobian(slice.rates.as_slice(), prop.as_slice());
                }
                props.push(prop);
            }
            let log_u = self.uniform().ln();
            if log_u < bound {
                let mut log_a = bound;
                let mut staged = Vec::with_capacity(times.len());
                for (prop, &t) in props.into_iter().zip(times) {
                    let slice = &mut self.slices[t];
                    let new_star = prop.lambda_star(slice.delta);
                    if new_star > slice.aux.lambda_star() {
                        slice.aux.extend_heights(new_star, &mut self.rng);
                        slice.reveal_aux(&self.model.prior, new_star, Provenance::Scratch, &mut self.rng)?;
                    }
                    let n_new = slice.count_aux_below(new_star, &self.levels)?;
                    log_a += n_new
                        .iter()
                        .zip(prop.log_ratios(slice.delta))
                        .filter(|(&n, _)| n > 0)
                        .map(|(&n, r)| n as f64 * r)
                        .sum::<f64>();
                    staged.push((t, prop, new_star, n_new));
                }
                accept = log_u < log_a;
                if accept {
                    for (t, prop, star, n_new) in staged {
                        let slice = &mut self.slices[t];
                        slice.rates = prop;
                        slice.aux.set_lambda_star(star);
                        slice.n_counts = n_new;
                    }
                }
            }
        }
        for &t in times {
            self.slices[t].virtual_update()?;
        }
        if self.adapting() {
            let position: Vec<f64> = times
                .iter()
                .flat_map(|&t| self.slices[t].rates.as_slice().to_vec())
                .map(|l| if log_walk { l.ln() } else { l })
                .collect();
            self.rate_walks[g].adapt(if accept { 1.0 } else { 0.0 }, &position);
        }
        Ok(accept)
    }

    /// Joint uniform random-walk move of the thresholds, shared by all
    /// times. Returns the acceptance indicator.
    pub fn update_levels(&mut self) -> Result<f64> {
        if self.model.levels < 2 {
            return Ok(1.0);
        }
        let h = self.level_width.value();
        let proposed: Vec<f64> = self
            .levels
            .thresholds()
            .to_vec()
            .into_iter()
            .map(|c| c + h * (2.0 * self.rng.random::<f64>() - 1.0))
            .collect();
        let Ok(new_levels) = PartitionLevels::new(proposed) else {
            if self.adapting() {
                self.level_width.update(0.0);
            }
            return Ok(0.0);
        };
        let mut log_a = 0.0;
        let mut staged = Vec::with_capacity(self.slices.len());
        for slice in &self.slices {
            let y_new = slice.count_data(&new_levels);
            let n_new = slice.count_aux_below(slice.aux.lambda_star(), &new_levels)?;
            log_a += log_alpha_partition(
                &slice.log_ratios(),
                slice.rates.as_slice(),
                &slice.n_counts,
                &n_new,
                &slice.y_counts,
                &y_new,
            );
            staged.push((y_new, n_new));
        }
        let accept = self.uniform().ln() < log_a;
        if accept {
            self.levels = new_levels;
            for (slice, (y, n)) in self.slices.iter_mut().zip(staged) {
                slice.y_counts = y;
                slice.n_counts = n;
            }
        }
        if self.adapting() {
            self.level_width.update(log_a.min(0.0).exp());
        }
        Ok(if accept { 1.0 } else { 0.0 })
    }

    /// One full sweep of the four blocks.
    pub fn step(&mut self) -> Result<SweepAcceptance> {
        let beta = self.update_beta()?;
        self.audit_if_enabled("beta")?;
        let aux = self.update_aux()?;
        self.audit_if_enabled("aux")?;
        let rates = self.update_lambda()?;
        self.audit_if_enabled("rates")?;
        let levels = self.update_levels()?;
        self.audit_if_enabled("levels")?;
        self.iteration += 1;
        let acc = SweepAcceptance { beta, aux, rates, levels };
        if self.iteration > self.config.burn_in {
            self.post_burn.add(&acc);
            self.post_burn_sweeps += 1;
            self.aux_total += self.slices.iter().map(|s| s.aux.active_count()).sum::<usize>() as f64;
        }
        Ok(acc)
    }

    fn audit_if_enabled(&self, block: &str) -> Result<()> {
        if self.config.audit {
            self.audit().map_err(|e| Error::Audit(format!("after {block} update: {e}")))
        } else {
            Ok(())
        }
    }

    /// Recompute every cached quantity from scratch and compare.
    pub fn audit(&self) -> Result<()> {
        let area = self.model.window.area();
        for (t, s) in self.slices.iter().enumerate() {
            let y = s.count_data(&self.levels);
            let n = s.count_aux_below(s.aux.lambda_star(), &self.levels)?;
            if y != s.y_counts || n != s.n_counts {
                return Err(Error::Audit(format!(
                    "time {t}: cached counts {:?}/{:?}, recomputed {y:?}/{n:?}",
                    s.y_counts, s.n_counts
                )));
            }
            let stale_sites = s.aux.points().iter().filter(|p| !s.aux.is_active(p) && p.site.is_some()).count();
            if stale_sites > 0 || s.field.len() != s.data_sites.len() + s.aux.active_count() {
                return Err(Error::Audit(format!(
                    "time {t}: {} revealed sites for {} events and {} auxiliary points",
                    s.field.len(),
                    s.data_sites.len(),
                    s.aux.active_count()
                )));
            }
            let direct = log_m_hat(&s.rates, s.delta, &n, area)?
                + y.iter().zip(s.rates.as_slice()).map(|(&c, l)| c as f64 * l.ln()).sum::<f64>();
            let cached = s.log_likelihood_part(area, &s.n_counts);
            if (direct - cached).abs() > 1e-9 * direct.abs().max(1.0) {
                return Err(Error::Audit(format!("time {t}: log pseudo-marginal {cached} vs {direct}")));
            }
        }
        Ok(())
    }

    fn snapshot(&self) -> PosteriorDraw {
        PosteriorDraw {
            iteration: self.iteration,
            rates: self.rate_matrix(),
            levels: self.levels.thresholds().to_vec(),
            grids: self.slices.iter().map(|s| s.field.grid().to_vec()).collect(),
            data_values: self.slices.iter().map(Slice::data_values).collect(),
        }
    }

    /// Run all remaining iterations, passing every retained record (and
    /// snapshot) to `sink` as soon as it is produced.
    pub fn run_with<F>(mut self, mut sink: F) -> Result<RunSummary>
    where
        F: FnMut(Output) -> Result<()>,
    {
        let mut kept = 0usize;
        let mut snapshots = 0usize;
        while self.iteration < self.config.iterations {
            let acc = self.step()?;
            let i = self.iteration;
            if i <= self.config.burn_in || !(i - self.config.burn_in - 1).is_multiple_of(self.config.thin) {
                continue;
            }
            let snapshot = if kept.is_multiple_of(self.config.snapshot_every) {
                sink(Output::Draw(self.snapshot()))?;
                snapshots += 1;
                Some(snapshots - 1)
            } else {
                None
            };
            kept += 1;
            sink(Output::Sample(SampleRecord {
                iteration: i,
                rates: self.rate_matrix(),
                levels: self.levels.thresholds().to_vec(),
                log_pseudo_marginal: self.log_pseudo_marginal(),
                aux_count: self.slices.iter().map(|s| s.aux.active_count()).sum(),
                accept: acc,
                snapshot,
            }))?;
        }
        Ok(self.summary(kept))
    }

    pub fn run(self) -> Result<RunOutput> {
        let mut samples = Vec::new();
        let mut draws = Vec::new();
        let summary = self.run_with(|o| {
            match o {
                Output::Sample(s) => samples.push(s),
                Output::Draw(d) => draws.push(d),
            }
            Ok(())
        })?;
        Ok(RunOutput { samples, draws, summary })
    }

    fn summary(&self, retained: usize) -> RunSummary {
        let n = self.post_burn_sweeps.max(1) as f64;
        RunSummary {
            iterations: self.config.iterations,
            burn_in: self.config.burn_in,
            thin: self.config.thin,
            retained,
            acceptance: self.post_burn.scaled(1.0 / n),
            varsigma: self.varsigma(),
            level_width: self.level_width(),
            squares: self.squares(),
            deltas: self.slices.iter().map(|s| s.delta).collect(),
            rate_scales: self.rate_walks.iter().map(CovarianceWalk::scale).collect(),
            mean_aux_count: self.aux_total / n,
        }
    }
}

/// Lattice values of a dynamic field at `times` times: an NNGP draw at time
/// zero followed by a random walk of innovation draws.
pub fn dynamic_grids<R: Rng + ?Sized>(model: &Model, times: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut grids: Vec<Vec<f64>> = Vec::with_capacity(times);
    grids.push(model.prior.sample_grid(rng));
    for t in 1..times {
        let next = match &model.innovation {
            Some(innov) => grids[t - 1].iter().zip(innov.sample_grid(rng)).map(|(a, b)| a + b).collect(),
            None => grids[t - 1].clone(),
        };
        grids.push(next);
    }
    grids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::homogeneous_poisson;
    use std::collections::BTreeMap;

    fn small_config(seed: u64) -> SamplerConfig {
        SamplerConfig {
            iterations: 60,
            burn_in: 20,
            squares: 4,
            delta: DeltaChoice::Auto { target: 80.0 },
            seed,
            audit: true,
            ..SamplerConfig::default()
        }
    }

    fn toy_pattern(seed: u64) -> PointPattern {
        let w = Window::square(2.0).unwrap();
        homogeneous_poisson(&w, 10.0, &mut seeded(seed))
    }

    #[test]
    fn initial_state_follows_defaults() {
        let pattern = toy_pattern(1);
        let model = ModelSpec::new(3, 1.0, 36, 8).unwrap();
        let chain = initialize(&pattern, &model, &small_config(2)).unwrap();
        assert_eq!(chain.levels().thresholds(), &[-0.5, 0.5]);
        let base = pattern.len() as f64 / 4.0;
        let r = chain.rates(0).as_slice();
        assert!(r.iter().all(|l| (l / base - 1.0).abs() < 0.05));
        assert!(is_strictly_increasing(r));
        assert_eq!(chain.data_counts(0).iter().sum::<usize>(), pattern.len());
        chain.audit().unwrap();
        let one = ModelSpec::new(1, 1.0, 36, 8).unwrap();
        let c1 = initialize(&pattern, &one, &small_config(2)).unwrap();
        assert_eq!(c1.rates(0).as_slice(), &[base]);
    }

    #[test]
    fn white_oak_initial_rate() {
        assert!((initial_rates(448, 100.0, 1)[0] - 4.48).abs() < 1e-12);
        let r = initial_rates(448, 100.0, 3);
        assert!((r.iter().sum::<f64>() / 3.0 - 4.48).abs() < 1e-12);
    }

    #[test]
    fn empty_pattern_is_rejected() {
        let pattern = PointPattern::empty(Window::unit());
        let model = ModelSpec::new(2, 1.0, 16, 4).unwrap();
        assert!(matches!(initialize(&pattern, &model, &small_config(1)), Err(Error::EmptyPattern(_))));
    }

    #[test]
    fn audited_sweeps_keep_caches_consistent() {
        let pattern = toy_pattern(3);
        let model = ModelSpec::new(3, 0.5, 36, 8).unwrap();
        let mut chain = initialize(&pattern, &model, &small_config(4)).unwrap();
        for _ in 0..60 {
            chain.step().unwrap();
        }
        assert!(chain.rates(0).is_increasing());
    }

    #[test]
    fn seed_determines_the_trace() {
        let pattern = toy_pattern(5);
        let model = ModelSpec::new(2, 1.0, 36, 8).unwrap();
        let a = run(&pattern, &model, &small_config(9)).unwrap();
        let b = run(&pattern, &model, &small_config(9)).unwrap();
        let c = run(&pattern, &model, &small_config(10)).unwrap();
        let bits = |o: &RunOutput| o.samples.iter().map(|s| s.rates[0][0].to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
        assert_eq!(a.samples.len(), 40);
        assert_eq!(a.draws.len(), 4);
        assert!(a.samples.windows(2).all(|w| w[0].iteration < w[1].iteration));
    }

    #[test]
    fn thinning_and_snapshots() {
        let pattern = toy_pattern(6);
        let model = ModelSpec::new(2, 1.0, 16, 4).unwrap();
        let cfg = SamplerConfig { thin: 3, snapshot_every: 2, audit: false, ..small_config(1) };
        let out = run(&pattern, &model, &cfg).unwrap();
        let its: Vec<usize> = out.samples.iter().map(|s| s.iteration).collect();
        assert_eq!(its.first(), Some(&21));
        assert!(its.windows(2).all(|w| w[1] - w[0] == 3));
        assert_eq!(its.len(), cfg.retained());
        assert_eq!(out.draws.len(), its.len().div_ceil(2));
        for s in out.samples.iter().filter_map(|s| s.snapshot.map(|i| (s, i))) {
            assert_eq!(out.draws[s.1].iteration, s.0.iteration);
        }
    }

    #[test]
    fn virtual_update_keeps_retained_values() {
        let pattern = toy_pattern(7);
        let model = ModelSpec::new(2, 1.0, 36, 8).unwrap();
        let mut chain = initialize(&pattern, &model, &small_config(8)).unwrap();
        let snapshot = |c: &Chain| -> BTreeMap<SiteId, u64> {
            c.field(0).iter().map(|(id, s)| (id, s.value.to_bits())).collect()
        };
        for _ in 0..30 {
            chain.update_beta().unwrap();
            chain.update_aux().unwrap();
            let before = snapshot(&chain);
            let extra = chain.rng.random::<f64>() * 3.0 + 1.0;
            let slice_star = chain.slices[0].aux.lambda_star();
            chain.slices[0].aux.extend_heights(slice_star + extra, &mut chain.rng);
            let prior = chain.model.prior.clone();
            chain.slices[0]
                .reveal_aux(&prior, slice_star + extra, Provenance::Scratch, &mut chain.rng)
                .unwrap();
            chain.slices[0].virtual_update().unwrap();
            let after = snapshot(&chain);
            assert_eq!(before, after);
            chain.audit().unwrap();
        }
    }

    #[test]
    fn identity_moves_always_accept() {
        // A pCN step of zero length and a zero-width threshold step leave
        // every count unchanged.
        let pattern = toy_pattern(11);
        let model = ModelSpec::new(2, 1.0, 36, 8).unwrap();
        let cfg = SamplerConfig { varsigma: 1e-4, level_width: 1e-6, adapt_until: Some(0), ..small_config(12) };
        let mut chain = initialize(&pattern, &model, &cfg).unwrap();
        for _ in 0..20 {
            chain.varsigma = ScalarTuner::new(1e-12, PCN_TARGET, 1e-12, 1.0);
            chain.level_width = ScalarTuner::new(1e-12, LEVEL_TARGET, 1e-12, 1.0);
            assert_eq!(chain.update_beta().unwrap(), 1.0);
            assert_eq!(chain.update_levels().unwrap(), 1.0);
        }
    }

    #[test]
    fn config_validation() {
        let ok = SamplerConfig::default();
        ok.validate().unwrap();
        for bad in [
            SamplerConfig { iterations: 10, burn_in: 10, ..ok.clone() },
            SamplerConfig { thin: 0, ..ok.clone() },
            SamplerConfig { delta: DeltaChoice::Fixed(1.0), ..ok.clone() },
            SamplerConfig { varsigma: 1.5, ..ok.clone() },
            SamplerConfig { squares: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(ok.fixed_order_for(3));
        assert!(!ok.fixed_order_for(2));
    }
}
