//! Chain diagnostics: effective sample size, DIC and trace summaries.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PartitionLevels, Point, Window};
use crate::nngp::{Conditional, NngpPrior};
use crate::predict::{modal, quantile};
use crate::rng::StreamKey;
use crate::sampler::PosteriorDraw;

/// Smallest Monte Carlo site set accepted by [`dic`].
pub const MIN_DIC_SITES: usize = 1000;
pub const DEFAULT_DIC_SITES: usize = 10_000;

/// Effective sample size by the initial monotone positive sequence
/// estimator. A constant trace has ESS equal to its length.
pub fn ess(trace: &[f64]) -> Result<f64> {
    let n = trace.len();
    if n < 10 {
        return Err(Error::param("trace", format!("need at least 10 values, got {n}")));
    }
    let nf = n as f64;
    if trace.iter().all(|&x| x == trace[0]) {
        return Ok(nf);
    }
    let mean = trace.iter().sum::<f64>() / nf;
    let centred: Vec<f64> = trace.iter().map(|x| x - mean).collect();
    let autocov = |lag: usize| centred[..n - lag].iter().zip(&centred[lag..]).map(|(a, b)| a * b).sum::<f64>() / nf;
    let g0 = autocov(0);
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = autocov(2 * m) + autocov(2 * m + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        m += 1;
    }
    let tau = (2.0 * sum - g0) / g0;
    Ok((nf / tau).min(nf))
}

/// Mean, standard deviation, 95% interval and ESS of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    pub ess: f64,
}

pub fn summarise_trace(name: &str, trace: &[f64]) -> Result<TraceSummary> {
    let n = trace.len() as f64;
    let e = ess(trace)?;
    let mean = trace.iter().sum::<f64>() / n;
    let sd = (trace.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = trace.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(TraceSummary {
        name: name.to_string(),
        mean,
        sd,
        q025: quantile(&sorted, 0.025),
        q975: quantile(&sorted, 0.975),
        ess: e,
    })
}

/// Uniform sites reused by every draw when estimating region areas.
#[derive(Debug, Clone)]
pub struct DicSites {
    window: Window,
    sites: Vec<Point>,
}

impl DicSites {
    pub fn new<R: Rng + ?Sized>(window: &Window, count: usize, rng: &mut R) -> Result<Self> {
        if count < MIN_DIC_SITES {
            return Err(Error::param(
                "mc_area_points",
                format!("need at least {MIN_DIC_SITES}, got {count}"),
            ));
        }
        Ok(DicSites {
            window: *window,
            sites: (0..count).map(|_| window.sample(rng)).collect(),
        })
    }

    pub fn sites(&self) -> &[Point] {
        &self.sites
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DicReport {
    pub dic: f64,
    pub mean_deviance: f64,
    pub plugin_deviance: f64,
    /// `p_D` = mean deviance minus plug-in deviance.
    pub effective_parameters: f64,
}

/// `−2 log L` of the Poisson process likelihood with region areas and
/// counts given per time.
fn deviance(rates: &[Vec<f64>], areas: &[Vec<f64>], counts: &[Vec<usize>]) -> f64 {
    let mut log_l = 0.0;
    for t in 0..rates.len() {
        for k in 0..rates[t].len() {
            log_l -= rates[t][k] * areas[t][k];
            if counts[t][k] > 0 {
                log_l += counts[t][k] as f64 * rates[t][k].ln();
            }
        }
    }
    -2.0 * log_l
}

struct DrawRegions {
    deviance: f64,
    /// Region per MC site, per time.
    sites: Vec<Vec<u8>>,
    /// Region per event, per time.
    events: Vec<Vec<u8>>,
}

/// DIC `= 2 D̄ − D(θ̂)` with `θ̂` the posterior mean rates on the pointwise
/// modal partition. Region areas are estimated on the common site set
/// with the field revealed at those sites per draw.
pub fn dic(draws: &[PosteriorDraw], prior: &NngpPrior, sites: &DicSites, seed: u64) -> Result<DicReport> {
    if draws.is_empty() {
        return Err(Error::param("draws", "no posterior draws"));
    }
    let k = draws[0].levels.len() + 1;
    let times = draws[0].rates.len();
    if draws.iter().any(|d| d.rates.len() != times || d.grids.iter().any(|g| g.len() != prior.grid().len())) {
        return Err(Error::param("draws", "draws disagree in shape with each other or the prior"));
    }
    let area = sites.window.area();
    let m = sites.sites.len() as f64;
    let conds: Vec<Conditional> = sites
        .sites
        .par_iter()
        .map(|p| prior.conditional_at(p))
        .collect::<Result<_>>()?;
    let key = StreamKey::from_seed(seed);
    let per_draw: Vec<DrawRegions> = draws
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let levels = PartitionLevels::new(d.levels.clone())?;
            let mut rng = key.stream(i as u64);
            let mut site_regions = Vec::with_capacity(times);
            let mut event_regions = Vec::with_capacity(times);
            let mut areas = Vec::with_capacity(times);
            let mut counts = Vec::with_capacity(times);
            for t in 0..times {
                let regions: Vec<u8> = conds
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        levels.region_of(c.draw(&d.grids[t], z)) as u8
                    })
                    .collect();
                let events: Vec<u8> = d.data_values[t].iter().map(|&b| levels.region_of(b) as u8).collect();
                areas.push(region_areas(&regions, k, area, m));
                counts.push(region_counts(&events, k));
                site_regions.push(regions);
                event_regions.push(events);
            }
            Ok(DrawRegions {
                deviance: deviance(&d.rates, &areas, &counts),
                sites: site_regions,
                events: event_regions,
            })
        })
        .collect::<Result<_>>()?;
    let n = draws.len() as f64;
    let mean_deviance = per_draw.iter().map(|r| r.deviance).sum::<f64>() / n;
    let mut mean_rates = vec![vec![0.0; k]; times];
    for d in draws {
        for (row, r) in mean_rates.iter_mut().zip(&d.rates) {
            for (a, b) in row.iter_mut().zip(r) {
                *a += b / n;
            }
        }
    }
    let modal_regions = |pick: &dyn Fn(&DrawRegions) -> &Vec<Vec<u8>>, t: usize| -> Vec<u8> {
        let len = pick(&per_draw[0])[t].len();
        let mut hits = vec![vec![0usize; k]; len];
        for r in &per_draw {
            for (h, &reg) in hits.iter_mut().zip(&pick(r)[t]) {
                h[reg as usize] += 1;
            }
        }
        hits.iter().map(|h| modal(h) as u8).collect()
    };
    let mut areas = Vec::with_capacity(times);
    let mut counts = Vec::with_capacity(times);
    for t in 0..times {
        areas.push(region_areas(&modal_regions(&|r| &r.sites, t), k, area, m));
        counts.push(region_counts(&modal_regions(&|r| &r.events, t), k));
    }
    let plugin_deviance = deviance(&mean_rates, &areas, &counts);
    Ok(DicReport {
        dic: 2.0 * mean_deviance - plugin_deviance,
        mean_deviance,
        plugin_deviance,
        effective_parameters: mean_deviance - plugin_deviance,
    })
}

fn region_areas(regions: &[u8], k: usize, area: f64, m: f64) -> Vec<f64> {
    let mut a = vec![0.0; k];
    for &r in regions {
        a[r as usize] += area / m;
    }
    a
}

fn region_counts(regions: &[u8], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &r in regions {
        c[r as usize] += 1;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::CovarianceSpec;
    use crate::nngp::ReferenceGrid;
    use crate::rng::seeded;
    use rand_distr::Gamma;
    use statrs::function::gamma::digamma;
    use std::sync::Arc;

    fn ar1(phi: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        let mut x = 0.0;
        (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                x = phi * x + e;
                x
            })
            .collect()
    }

    #[test]
    fn iid_trace_is_nearly_fully_effective() {
        let e = ess(&ar1(0.0, 10_000, 1)).unwrap();
        assert!((8500.0..=10_000.0).contains(&e), "{e}");
    }

    #[test]
    fn ar1_matches_the_closed_form() {
        let want = 1e5 * 0.1 / 1.9;
        let e = ess(&ar1(0.9, 100_000, 2)).unwrap();
        assert!((e / want - 1.0).abs() < 0.2, "{e} vs {want}");
    }

    #[test]
    fn ess_conventions() {
        assert_eq!(ess(&[3.0; 50]).unwrap(), 50.0);
        assert!(ess(&[1.0; 9]).is_err());
        let x = ar1(0.5, 2000, 3);
        let y: Vec<f64> = x.iter().map(|v| -3.0 * v + 7.0).collect();
        let (a, b) = (ess(&x).unwrap(), ess(&y).unwrap());
        assert!((a - b).abs() < 1e-6 * a);
        assert!(a <= 2000.0);
    }

    #[test]
    fn trace_summary_fields() {
        let s = summarise_trace("x", &(0..101).map(f64::from).collect::<Vec<_>>()).unwrap();
        assert_eq!(s.mean, 50.0);
        assert_eq!(s.q025, 2.5);
    }

    fn unit_prior() -> NngpPrior {
        let grid = Arc::new(ReferenceGrid::build(&Window::unit(), 16, 8).unwrap());
        NngpPrior::new(grid, CovarianceSpec::unit(1.0, 1.95).unwrap()).unwrap()
    }

    #[test]
    fn site_count_floor() {
        assert!(DicSites::new(&Window::unit(), 999, &mut seeded(1)).is_err());
        assert!(DicSites::new(&Window::unit(), 1000, &mut seeded(1)).is_ok());
    }

    #[test]
    fn single_level_dic_matches_gamma_poisson() {
        // Posterior Gamma(α + |Y|, η + μ) with |Y| = 40 on the unit square.
        let (y, mu) = (40usize, 1.0);
        let (a, b) = (1.2 + y as f64, 0.04 + mu);
        let prior = unit_prior();
        let mut rng = seeded(4);
        let gamma = Gamma::new(a, 1.0 / b).unwrap();
        let draws: Vec<PosteriorDraw> = (0..20_000)
            .map(|i| PosteriorDraw {
                iteration: i,
                rates: vec![vec![gamma.sample(&mut rng)]],
                levels: vec![],
                grids: vec![vec![0.0; 16]],
                data_values: vec![vec![0.0; y]],
            })
            .collect();
        let sites = DicSites::new(&Window::unit(), 1000, &mut rng).unwrap();
        let r = dic(&draws, &prior, &sites, 9).unwrap();
        let mean_l = a / b;
        let mean_dev = 2.0 * mu * mean_l - 2.0 * y as f64 * (digamma(a) - b.ln());
        let plug = 2.0 * mu * mean_l - 2.0 * y as f64 * mean_l.ln();
        let want = 2.0 * mean_dev - plug;
        // p_D for this model is close to 1.
        assert!((r.effective_parameters - (mean_dev - plug)).abs() < 0.05, "{r:?}");
        assert!((r.dic - want).abs() < 0.2, "{} vs {want}", r.dic);
        let again = dic(&draws, &prior, &sites, 9).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn dic_uses_areas_from_the_field() {
        // Two regions split by the lattice values: left half low, right half high.
        let prior = unit_prior();
        let grid: Vec<f64> = prior.grid().locations().iter().map(|p| if p.x < 0.5 { -5.0 } else { 5.0 }).collect();
        let draw = PosteriorDraw {
            iteration: 0,
            rates: vec![vec![2.0, 10.0]],
            levels: vec![0.0],
            grids: vec![grid],
            data_values: vec![vec![-1.0, 1.0, 1.0]],
        };
        let sites = DicSites::new(&Window::unit(), 4000, &mut seeded(5)).unwrap();
        let r = dic(&[draw], &prior, &sites, 1).unwrap();
        let want = -2.0 * (-(2.0 * 0.5 + 10.0 * 0.5) + 2.0f64.ln() + 2.0 * 10.0f64.ln());
        assert!((r.mean_deviance - want).abs() < 0.5, "{} vs {want}", r.mean_deviance);
        assert!((r.dic - r.mean_deviance).abs() < 1e-9);
    }
}
