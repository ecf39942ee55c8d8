//! Posterior predictive quantities computed from retained draws.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{simulate_lscp, FieldSampler, PartitionLevels, Point, PointPattern, Window};
use crate::nngp::{ConditionalField, NngpPrior};
use crate::priors::{ngar1_simulate, NGAR1Spec};
use crate::rng::StreamKey;
use crate::sampler::PosteriorDraw;

/// What to predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictiveRequest {
    /// `Λ = ∫_{S₀} λ(s) ds` over a sub-rectangle (whole window if absent).
    IntegratedIntensity { region: Option<Window> },
    /// A fresh pattern from the fitted intensity.
    ReplicatePattern,
    /// Rates, grids and patterns `d` steps past the last observed time.
    Future { horizons: usize },
}

fn check_region(window: &Window, region: &Window) -> Result<()> {
    if window.contains_window(region) {
        Ok(())
    } else {
        Err(Error::param("region", "must lie inside the observation window"))
    }
}

fn draw_parts(draw: &PosteriorDraw, t: usize) -> Result<(PartitionLevels, &[f64], &[f64])> {
    let rates = draw
        .rates
        .get(t)
        .ok_or_else(|| Error::param("t", format!("draw has {} times", draw.rates.len())))?;
    let levels = PartitionLevels::new(draw.levels.clone())?;
    Ok((levels, rates, &draw.grids[t]))
}

/// Unbiased single-point estimate `μ(S₀) λ(U)` of the integrated intensity
/// with `U ~ Uniform(S₀)`.
pub fn integrated_intensity<F: FieldSampler, R: Rng + ?Sized>(
    field: &mut F,
    levels: &PartitionLevels,
    rates: &[f64],
    region: &Window,
    rng: &mut R,
) -> Result<f64> {
    if rates.len() != levels.num_regions() {
        return Err(Error::InvalidRates(format!("{} rates for {} regions", rates.len(), levels.num_regions())));
    }
    if rates.len() == 1 {
        return Ok(region.area() * rates[0]);
    }
    let u = region.sample(rng);
    let beta = field.values_at(&[u], rng)?[0];
    Ok(region.area() * rates[levels.region_of(beta)])
}

/// [`integrated_intensity`] for one posterior draw at time `t`.
pub fn integrated_intensity_draw<R: Rng + ?Sized>(
    draw: &PosteriorDraw,
    t: usize,
    prior: &NngpPrior,
    region: &Window,
    rng: &mut R,
) -> Result<f64> {
    check_region(prior.grid().window(), region)?;
    let (levels, rates, grid) = draw_parts(draw, t)?;
    integrated_intensity(&mut ConditionalField::new(prior, grid), &levels, rates, region, rng)
}

/// A replicate pattern from the intensity of one draw at time `t`.
pub fn replicate_pattern<R: Rng + ?Sized>(
    draw: &PosteriorDraw,
    t: usize,
    prior: &NngpPrior,
    rng: &mut R,
) -> Result<PointPattern> {
    let (levels, rates, grid) = draw_parts(draw, t)?;
    let window = *prior.grid().window();
    simulate_lscp(&window, &levels, rates, &mut ConditionalField::new(prior, grid), rng)
}

/// Forward propagation of one draw past its last time.
#[derive(Debug, Clone, PartialEq)]
pub struct FutureDraw {
    /// Lattice values at `T + 1, …, T + d`.
    pub grids: Vec<Vec<f64>>,
    /// Rates at `T + 1, …, T + d`.
    pub rates: Vec<Vec<f64>>,
    pub patterns: Option<Vec<PointPattern>>,
}

/// Propagate grids by the random-walk innovation and rates by NGAR1 for
/// `horizons` steps, optionally thinning a pattern at each.
pub fn future_draw<R: Rng + ?Sized>(
    draw: &PosteriorDraw,
    prior: &NngpPrior,
    innovation: Option<&NngpPrior>,
    rates_spec: &NGAR1Spec,
    horizons: usize,
    with_patterns: bool,
    rng: &mut R,
) -> Result<FutureDraw> {
    if horizons < 1 {
        return Err(Error::param("horizons", "need at least one step ahead"));
    }
    let last = draw.rates.len() - 1;
    let levels = PartitionLevels::new(draw.levels.clone())?;
    let mut rates = ngar1_simulate(&draw.rates[last], rates_spec, horizons, rng)?;
    rates.remove(0);
    let mut grids: Vec<Vec<f64>> = Vec::with_capacity(horizons);
    let mut current = draw.grids[last].clone();
    for _ in 0..horizons {
        if let Some(innov) = innovation {
            for (b, z) in current.iter_mut().zip(innov.sample_grid(rng)) {
                *b += z;
            }
        }
        grids.push(current.clone());
    }
    let patterns = if with_patterns {
        let window = *prior.grid().window();
        let mut out = Vec::with_capacity(horizons);
        for (g, r) in grids.iter().zip(&rates) {
            out.push(simulate_lscp(&window, &levels, r, &mut ConditionalField::new(prior, g), rng)?);
        }
        Some(out)
    } else {
        None
    };
    Ok(FutureDraw { grids, rates, patterns })
}

/// Pointwise posterior summaries of the intensity on the lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub locations: Vec<Point>,
    /// Posterior mean intensity at each lattice site.
    pub mean_intensity: Vec<f64>,
    /// Pointwise modal region (0-based) at each lattice site.
    pub modal_region: Vec<usize>,
    /// Posterior probability of each region, site-major.
    pub region_probability: Vec<Vec<f64>>,
}

/// Summarise the draws at time `t` on the lattice.
pub fn grid_summary(draws: &[PosteriorDraw], t: usize, prior: &NngpPrior) -> Result<GridSummary> {
    if draws.is_empty() {
        return Err(Error::param("draws", "no posterior draws to summarise"));
    }
    let sites = prior.grid().len();
    let k = draws[0].levels.len() + 1;
    let mut mean = vec![0.0; sites];
    let mut hits = vec![vec![0usize; k]; sites];
    for d in draws {
        let (levels, rates, grid) = draw_parts(d, t)?;
        for (i, &b) in grid.iter().enumerate() {
            let r = levels.region_of(b);
            mean[i] += rates[r];
            hits[i][r] += 1;
        }
    }
    let n = draws.len() as f64;
    Ok(GridSummary {
        locations: prior.grid().locations().to_vec(),
        mean_intensity: mean.into_iter().map(|m| m / n).collect(),
        modal_region: hits.iter().map(|h| modal(h)).collect(),
        region_probability: hits.iter().map(|h| h.iter().map(|&c| c as f64 / n).collect()).collect(),
    })
}

/// Index of the largest count, lowest index on ties.
pub(crate) fn modal(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Integrated-intensity draws for many posterior draws in parallel, each
/// with its own stream of `key`.
pub fn integrated_intensity_draws(
    draws: &[PosteriorDraw],
    t: usize,
    prior: &NngpPrior,
    region: &Window,
    key: &StreamKey,
) -> Result<Vec<f64>> {
    draws
        .par_iter()
        .enumerate()
        .map(|(i, d)| integrated_intensity_draw(d, t, prior, region, &mut key.stream(i as u64)))
        .collect()
}

/// Posterior summary of a scalar predictive quantity; `reference` adds the
/// expected quadratic error `E[(h − h₀)²]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    pub quadratic_error: Option<f64>,
}

pub fn summarise(values: &[f64], reference: Option<f64>) -> Result<PredictiveSummary> {
    if values.is_empty() {
        return Err(Error::param("values", "nothing to summarise"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(PredictiveSummary {
        mean,
        sd: var.sqrt(),
        q025: quantile(&sorted, 0.025),
        q975: quantile(&sorted, 0.975),
        quadratic_error: reference.map(|h| values.iter().map(|v| (v - h).powi(2)).sum::<f64>() / n),
    })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}
