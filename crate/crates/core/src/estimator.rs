//! The Poisson estimator of `M = exp(−Σ λ_k μ_k)` and the auxiliary
//! process it is built from.
//!
//! The auxiliary process is a unit-rate Poisson process on the cylinder
//! `S × [0, ∞)`. Only the points below the current height `λ*` enter the
//! estimator; they are unveiled lazily, square by square, and only up to the
//! height that has been needed so far.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{poisson_count, PartitionLevels, Point, Window};
use crate::nngp::SiteId;
use crate::rng::StreamKey;

/// Lower bound applied to automatically chosen δ.
pub const MIN_AUTO_DELTA: f64 = 1.05;

/// Positive intensity levels `λ_1, …, λ_K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RateVector(Vec<f64>);

impl TryFrom<Vec<f64>> for RateVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        RateVector::new(v)
    }
}

impl From<RateVector> for Vec<f64> {
    fn from(r: RateVector) -> Self {
        r.0
    }
}

impl RateVector {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::InvalidRates("need at least one rate".into()));
        }
        if let Some(r) = rates.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidRates(format!("rates must be positive, got {r}")));
        }
        Ok(RateVector(rates))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::MAX, f64::min)
    }

    /// Height of the auxiliary slab, `δ λ_M − λ_m`.
    pub fn lambda_star(&self, delta: f64) -> f64 {
        delta * self.max() - self.min()
    }

    /// `log((δλ_M − λ_k) / (δλ_M − λ_m))` for every k.
    pub fn log_ratios(&self, delta: f64) -> Vec<f64> {
        let top = delta * self.max();
        let denom = (top - self.min()).ln();
        self.0.iter().map(|l| (top - l).ln() - denom).collect()
    }

    pub fn is_increasing(&self) -> bool {
        crate::geometry::is_strictly_increasing(&self.0)
    }
}

/// δ giving an expected auxiliary count of `target` at the rates `rates`.
pub fn auto_delta(rates: &RateVector, area: f64, target: f64) -> f64 {
    ((target / area + rates.min()) / rates.max()).max(MIN_AUTO_DELTA)
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 1.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::param("delta", format!("must exceed 1, got {delta}")))
    }
}

/// Logarithm of the Poisson estimator for given per-region auxiliary counts.
pub fn log_m_hat(rates: &RateVector, delta: f64, counts: &[usize], area: f64) -> Result<f64> {
    check_delta(delta)?;
    let lr = rates.log_ratios(delta);
    Ok(-area * rates.min()
        + counts
            .iter()
            .zip(&lr)
            .map(|(&n, r)| if n == 0 { 0.0 } else { n as f64 * r })
            .sum::<f64>())
}

/// The Poisson estimator `M̂`; strictly positive.
pub fn m_hat(rates: &RateVector, delta: f64, counts: &[usize], area: f64) -> Result<f64> {
    log_m_hat(rates, delta, counts, area).map(f64::exp)
}

/// Closed-form variance of `M̂` for known region areas `areas`.
pub fn m_hat_variance(rates: &RateVector, delta: f64, areas: &[f64], area: f64) -> Result<f64> {
    check_delta(delta)?;
    if areas.len() != rates.len() {
        return Err(Error::param("areas", "one area per region required"));
    }
    let (lm, lmax) = (rates.min(), rates.max());
    let star = delta * lmax - lm;
    let mut second = 0.0;
    let mut first = 0.0;
    for (&mu, &l) in areas.iter().zip(rates.as_slice()) {
        let ratio = (delta * lmax - l) / star;
        second += mu * star * (1.0 - ratio * ratio);
        first += mu * (l - lm);
    }
    Ok((-2.0 * area * lm).exp() * ((-second).exp() - (-2.0 * first).exp()))
}

/// Tally latent values by region. `None` marks a location whose latent
/// value has not been revealed, which is an error.
pub fn count_regions<I>(values: I, levels: &PartitionLevels) -> Result<Vec<usize>>
where
    I: IntoIterator<Item = Option<f64>>,
{
    let mut counts = vec![0usize; levels.num_regions()];
    for v in values {
        let v = v.ok_or(Error::MissingLatentValue)?;
        counts[levels.region_of(v)] += 1;
    }
    Ok(counts)
}

/// Regular split of a window into `L` cells, as close to square as `L`'s
/// factorisations allow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquareGrid {
    window: Window,
    nx: usize,
    ny: usize,
}

impl SquareGrid {
    pub fn new(window: &Window, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::param("squares", "need at least one square"));
        }
        let (nx, ny) = (1..=count)
            .filter(|d| count.is_multiple_of(*d))
            .map(|nx| (nx, count / nx))
            .min_by(|a, b| {
                let skew = |(nx, ny): (usize, usize)| {
                    ((window.width() / nx as f64) / (window.height() / ny as f64))
                        .ln()
                        .abs()
                };
                skew(*a).total_cmp(&skew(*b))
            })
            .expect("count >= 1 has a divisor");
        Ok(SquareGrid {
            window: *window,
            nx,
            ny,
        })
    }

    pub fn count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn index_of(&self, p: &Point) -> usize {
        let w = &self.window;
        let ix = (((p.x - w.x_min()) / w.width() * self.nx as f64) as usize).min(self.nx - 1);
        let iy = (((p.y - w.y_min()) / w.height() * self.ny as f64) as usize).min(self.ny - 1);
        iy * self.nx + ix
    }

    pub fn cell(&self, l: usize) -> Window {
        let w = &self.window;
        let (ix, iy) = (l % self.nx, l / self.nx);
        let (cw, ch) = (w.width() / self.nx as f64, w.height() / self.ny as f64);
        let x0 = w.x_min() + ix as f64 * cw;
        let y0 = w.y_min() + iy as f64 * ch;
        let x1 = if ix + 1 == self.nx { w.x_max() } else { x0 + cw };
        let y1 = if iy + 1 == self.ny { w.y_max() } else { y0 + ch };
        Window::new(x0, x1, y0, y1).expect("sub-cell of a valid window")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxPoint {
    pub location: Point,
    pub height: f64,
    pub square: u32,
    /// Latent-field site holding `β(location)`, once revealed.
    pub site: Option<SiteId>,
}

/// Unveiled part of the auxiliary cylinder process.
#[derive(Debug, Clone)]
pub struct AuxiliaryProcess {
    squares: SquareGrid,
    points: Vec<AuxPoint>,
    lambda_star: f64,
    unveiled: Vec<f64>,
}

impl AuxiliaryProcess {
    pub fn squares(&self) -> &SquareGrid {
        &self.squares
    }

    pub fn points(&self) -> &[AuxPoint] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [AuxPoint] {
        &mut self.points
    }

    pub fn lambda_star(&self) -> f64 {
        self.lambda_star
    }

    /// Move the membership cut-off. Points above it stay unveiled (they
    /// belong to the cylinder process) but leave the projection `N`.
    pub fn set_lambda_star(&mut self, lambda_star: f64) {
        self.lambda_star = lambda_star;
    }

    /// Height up to which square `l` has been unveiled.
    pub fn unveiled(&self, l: usize) -> f64 {
        self.unveiled[l]
    }

    pub fn is_active(&self, p: &AuxPoint) -> bool {
        p.height < self.lambda_star
    }

    /// Points of the projection `N` (heights below `λ*`).
    pub fn active(&self) -> impl Iterator<Item = &AuxPoint> {
        self.points.iter().filter(move |p| p.height < self.lambda_star)
    }

    pub fn active_count(&self) -> usize {
        self.active().count()
    }

    /// Active points below an alternative cut-off.
    pub fn below(&self, height: f64) -> impl Iterator<Item = &AuxPoint> {
        self.points.iter().filter(move |p| p.height < height)
    }

    /// Unveil every square up to `height` (no-op where already unveiled).
    /// Returns the index of the first appended point.
    pub fn extend_heights<R: Rng + ?Sized>(&mut self, height: f64, rng: &mut R) -> usize {
        let start = self.points.len();
        if self.unveiled.iter().all(|&u| u >= height) {
            return start;
        }
        let key = StreamKey::draw(rng);
        let squares = self.squares;
        let fresh: Vec<Vec<AuxPoint>> = self
            .unveiled
            .par_iter()
            .enumerate()
            .map(|(l, &lo)| {
                if lo >= height {
                    return Vec::new();
                }
                sample_slab(&squares, l, lo, height, &mut key.stream(l as u64))
            })
            .collect();
        for (l, pts) in fresh.into_iter().enumerate() {
            self.unveiled[l] = self.unveiled[l].max(height);
            self.points.extend(pts);
        }
        start
    }

    /// Finish an auxiliary sweep in one pass. Squares with `Some(fresh)`
    /// have their contents replaced; the others only lose their points
    /// above `λ*`. Every square ends unveiled exactly to `λ*`. Returns the
    /// removed points.
    pub fn apply_sweep(&mut self, fresh: Vec<Option<Vec<AuxPoint>>>) -> Vec<AuxPoint> {
        assert_eq!(fresh.len(), self.squares.count(), "one entry per square");
        let star = self.lambda_star;
        let (gone, mut kept): (Vec<_>, Vec<_>) = std::mem::take(&mut self.points)
            .into_iter()
            .partition(|p| fresh[p.square as usize].is_some() || p.height >= star);
        for pts in fresh.into_iter().flatten() {
            kept.extend(pts);
        }
        self.points = kept;
        for u in &mut self.unveiled {
            *u = star;
        }
        gone
    }

    /// Re-split the window into `count` squares. Only valid when every
    /// square is unveiled exactly to `λ*` and no stale points remain.
    pub fn resquare(&mut self, count: usize) -> Result<()> {
        let squares = SquareGrid::new(self.squares.window(), count)?;
        let star = self.lambda_star;
        if self.points.iter().any(|p| p.height >= star) || self.unveiled.iter().any(|&u| u != star) {
            return Err(Error::Audit("cannot re-split squares with stale points".into()));
        }
        for p in &mut self.points {
            p.square = squares.index_of(&p.location) as u32;
        }
        self.squares = squares;
        self.unveiled = vec![star; count];
        Ok(())
    }

    /// Keep the points in original order but stably grouped by square.
    pub fn sort_by_square(&mut self) {
        self.points.sort_by_key(|p| p.square);
    }
}

/// Fresh points of the unit-rate cylinder process in square `l` with
/// heights in `[lo, hi)`.
pub fn sample_slab<R: Rng + ?Sized>(
    squares: &SquareGrid,
    l: usize,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Vec<AuxPoint> {
    let cell = squares.cell(l);
    let n = poisson_count(rng, (hi - lo) * cell.area());
    (0..n)
        .map(|_| AuxPoint {
            location: cell.sample(rng),
            height: lo + (hi - lo) * rng.random::<f64>(),
            square: l as u32,
            site: None,
        })
        .collect()
}

/// Draw the projection `N` of the cylinder process below `λ*`, square by
/// square (each square on its own index-keyed stream).
pub fn sample_aux<R: Rng + ?Sized>(
    window: &Window,
    lambda_star: f64,
    squares: usize,
    rng: &mut R,
) -> Result<AuxiliaryProcess> {
    if !(lambda_star > 0.0 && lambda_star.is_finite()) {
        return Err(Error::param("lambda_star", format!("must be positive, got {lambda_star}")));
    }
    let grid = SquareGrid::new(window, squares)?;
    let key = StreamKey::draw(rng);
    let points = (0..grid.count())
        .into_par_iter()
        .map(|l| sample_slab(&grid, l, 0.0, lambda_star, &mut key.stream(l as u64)))
        .collect::<Vec<_>>()
        .concat();
    Ok(AuxiliaryProcess {
        squares: grid,
        points,
        lambda_star,
        unveiled: vec![lambda_star; grid.count()],
    })
}

/// Unveil the slab between `old` and `new` heights everywhere. A no-op when
/// `new <= old`. Returns the number of points added.
pub fn extend_aux_heights<R: Rng + ?Sized>(
    aux: &mut AuxiliaryProcess,
    old: f64,
    new: f64,
    rng: &mut R,
) -> usize {
    if new <= old {
        return 0;
    }
    for u in &mut aux.unveiled {
        *u = u.max(old);
    }
    let before = aux.points.len();
    aux.extend_heights(new, rng);
    aux.points.len() - before
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn rates(v: &[f64]) -> RateVector {
        RateVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn m_hat_single_region_is_exact() {
        let r = rates(&[3.0]);
        for n in [0, 5, 500] {
            let v = m_hat(&r, 2.0, &[n], 2.0).unwrap();
            assert!((v - (-6.0f64).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn m_hat_direct_evaluation() {
        // e^{-1} (3/3)^3 (2/3)^0
        let v = m_hat(&rates(&[1.0, 2.0]), 2.0, &[3, 0], 1.0).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.36788).abs() < 1e-5);
        let w = m_hat(&rates(&[1.0, 2.0]), 2.0, &[0, 2], 1.0).unwrap();
        assert!((w - (-1.0f64).exp() * 4.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn m_hat_rejects_small_delta_and_stays_positive() {
        assert!(m_hat(&rates(&[1.0, 2.0]), 1.0, &[1, 1], 1.0).is_err());
        assert!(m_hat_variance(&rates(&[1.0, 2.0]), 0.5, &[0.5, 0.5], 1.0).is_err());
        let v = m_hat(&rates(&[1.0, 50.0]), 1.0001, &[0, 20], 1.0).unwrap();
        assert!(v > 0.0);
        let lv = log_m_hat(&rates(&[1.0, 50.0]), 1.0001, &[0, 4000], 1.0).unwrap();
        assert!(lv.is_finite());
    }

    #[test]
    fn variance_is_zero_for_one_region_and_decreasing_in_delta() {
        assert_eq!(m_hat_variance(&rates(&[4.0]), 2.0, &[1.0], 1.0).unwrap(), 0.0);
        let r = rates(&[1.0, 2.0]);
        let v: Vec<f64> = [1.2, 2.0, 4.0]
            .iter()
            .map(|&d| m_hat_variance(&r, d, &[0.5, 0.5], 1.0).unwrap())
            .collect();
        assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
        assert!(v.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn count_regions_contract() {
        let c = PartitionLevels::new(vec![0.0]).unwrap();
        assert_eq!(count_regions(std::iter::empty(), &c).unwrap(), vec![0, 0]);
        assert_eq!(
            count_regions([Some(-1.0), Some(2.0), Some(0.0)], &c).unwrap(),
            vec![2, 1]
        );
        assert!(matches!(
            count_regions([Some(1.0), None], &c),
            Err(Error::MissingLatentValue)
        ));
        let one = PartitionLevels::single();
        assert_eq!(count_regions([Some(1.0), Some(-4.0)], &one).unwrap(), vec![2]);
    }

    #[test]
    fn count_regions_binomial_split() {
        // β(s) = x − 0.5, c = (0): each region has probability 1/2.
        let mut rng = seeded(17);
        let n = 100_000;
        let pts = crate::geometry::uniform_points(&Window::unit(), n, &mut rng);
        let c = PartitionLevels::new(vec![0.0]).unwrap();
        let counts = count_regions(pts.points().iter().map(|p| Some(p.x - 0.5)), &c).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), n);
        let sd = (n as f64 / 4.0).sqrt();
        assert!((counts[0] as f64 - n as f64 / 2.0).abs() < 3.0 * sd);
    }

    #[test]
    fn square_grid_layout() {
        let w = Window::new(0.0, 10.0, 0.0, 4.0).unwrap();
        let g = SquareGrid::new(&w, 10).unwrap();
        assert_eq!(g.shape(), (5, 2));
        let total: f64 = (0..g.count()).map(|l| g.cell(l).area()).sum();
        assert!((total - 40.0).abs() < 1e-12);
        assert_eq!(g.index_of(&Point::new(10.0, 4.0)), 9);
        assert_eq!(g.index_of(&Point::new(0.0, 0.0)), 0);
        let sq = SquareGrid::new(&Window::unit(), 16).unwrap();
        assert_eq!(sq.shape(), (4, 4));
    }

    #[test]
    fn sample_aux_counts_and_heights() {
        let mut rng = seeded(9);
        let w = Window::square(10.0).unwrap();
        let aux = sample_aux(&w, 60.0, 16, &mut rng).unwrap();
        assert!(aux.points().iter().all(|p| p.height >= 0.0 && p.height < 60.0));
        assert!(aux.points().iter().all(|p| aux.squares().cell(p.square as usize).contains(&p.location)));
        // 6000 expected points; a 5-sd band is ±387
        assert!((aux.points().len() as f64 - 6000.0).abs() < 5.0 * 6000f64.sqrt());
        assert!(sample_aux(&w, 0.0, 4, &mut rng).is_err());
        let tiny = sample_aux(&Window::unit(), 1e-12, 4, &mut rng).unwrap();
        assert!(tiny.points().is_empty());
    }

    #[test]
    fn extension_noop_and_membership() {
        let mut rng = seeded(10);
        let w = Window::unit();
        let mut aux = sample_aux(&w, 5.0, 4, &mut rng).unwrap();
        let n = aux.points().len();
        assert_eq!(extend_aux_heights(&mut aux, 5.0, 5.0, &mut rng), 0);
        assert_eq!(extend_aux_heights(&mut aux, 5.0, 4.0, &mut rng), 0);
        assert_eq!(aux.points().len(), n);
        let added = extend_aux_heights(&mut aux, 5.0, 9.0, &mut rng);
        assert_eq!(aux.points().len(), n + added);
        assert!(aux.points()[n..].iter().all(|p| p.height >= 5.0 && p.height < 9.0));
        assert_eq!(aux.active_count(), n);
        aux.set_lambda_star(9.0);
        assert_eq!(aux.active_count(), n + added);
    }

    #[test]
    fn sweep_and_resquare() {
        let mut rng = seeded(12);
        let mut aux = sample_aux(&Window::unit(), 20.0, 4, &mut rng).unwrap();
        aux.set_lambda_star(10.0);
        assert!(aux.resquare(8).is_err());
        let in_square_0 = aux.points().iter().filter(|p| p.square == 0).count();
        let marker = AuxPoint {
            location: aux.squares().cell(0).sample(&mut rng),
            height: 1.0,
            square: 0,
            site: None,
        };
        let gone = aux.apply_sweep(vec![Some(vec![marker.clone()]), None, None, None]);
        assert!(gone.len() >= in_square_0);
        assert!(aux.points().iter().all(|p| p.height < 10.0));
        assert_eq!(aux.points().iter().filter(|p| p.square == 0).collect::<Vec<_>>(), vec![&marker]);
        assert!((0..4).all(|l| aux.unveiled(l) == 10.0));
        aux.resquare(8).unwrap();
        assert_eq!(aux.squares().count(), 8);
        assert!(aux.points().iter().all(|p| aux.squares().cell(p.square as usize).contains(&p.location)));
    }

    #[test]
    fn auto_delta_targets_expected_count() {
        let r = rates(&[4.0, 5.0]);
        let d = auto_delta(&r, 100.0, 1000.0);
        assert!((r.lambda_star(d) * 100.0 - 1000.0).abs() < 1e-9);
        assert_eq!(auto_delta(&r, 1.0, 0.1), MIN_AUTO_DELTA);
    }

    fn half_plane_m_hat<R: Rng + ?Sized>(r: &RateVector, delta: f64, rng: &mut R) -> f64 {
        let levels = PartitionLevels::new(vec![0.0]).unwrap();
        let aux = sample_aux(&Window::unit(), r.lambda_star(delta), 4, rng).unwrap();
        let beta = aux.active().map(|p| Some(if p.location.x < 0.5 { -1.0 } else { 1.0 }));
        m_hat(r, delta, &count_regions(beta, &levels).unwrap(), 1.0).unwrap()
    }

    #[test]
    fn m_hat_is_unbiased_and_matches_its_variance() {
        let mut rng = seeded(21);
        let r = rates(&[1.0, 2.0]);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| half_plane_m_hat(&r, 2.0, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let target = (-1.5f64).exp();
        assert!((mean - target).abs() < 4.0 * (var / n as f64).sqrt(), "{mean} vs {target}");
        let exact = m_hat_variance(&r, 2.0, &[0.5, 0.5], 1.0).unwrap();
        assert!((var / exact - 1.0).abs() < 0.1, "{var} vs {exact}");
    }

    #[test]
    fn square_counts_are_poisson() {
        let mut rng = seeded(22);
        let w = Window::square(2.0).unwrap();
        let reps = 400;
        let mut counts = vec![Vec::with_capacity(reps); 16];
        for _ in 0..reps {
            let aux = sample_aux(&w, 5.0, 16, &mut rng).unwrap();
            let mut c = [0usize; 16];
            for p in aux.points() {
                c[p.square as usize] += 1;
            }
            for l in 0..16 {
                counts[l].push(c[l] as f64);
            }
        }
        // Each square has area 0.25 and expected count 1.25.
        for c in &counts {
            let m = c.iter().sum::<f64>() / reps as f64;
            let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (reps - 1) as f64;
            assert!((m - 1.25).abs() < 5.0 * (1.25 / reps as f64).sqrt(), "mean {m}");
            assert!((v / m - 1.0).abs() < 0.4, "dispersion {}", v / m);
        }
    }

    #[test]
    fn extension_adds_poisson_many_points() {
        let mut rng = seeded(23);
        let w = Window::square(3.0).unwrap();
        let reps = 2000;
        let total: usize = (0..reps)
            .map(|_| {
                let mut aux = sample_aux(&w, 2.0, 9, &mut rng).unwrap();
                extend_aux_heights(&mut aux, 2.0, 3.5, &mut rng)
            })
            .sum();
        let mean = total as f64 / reps as f64;
        let expected = 1.5 * 9.0;
        assert!((mean - expected).abs() < 5.0 * (expected / reps as f64).sqrt(), "{mean}");
    }
}
