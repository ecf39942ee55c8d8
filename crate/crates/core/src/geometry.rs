//! Rectangular windows, point patterns, threshold partitions and forward
//! simulation of (level-set) Poisson processes.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn distance_sq(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Axis-aligned rectangle `[x_min, x_max] × [y_min, y_max]` with positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWindow", into = "RawWindow")]
pub struct Window {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWindow {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl TryFrom<RawWindow> for Window {
    type Error = Error;

    fn try_from(raw: RawWindow) -> Result<Self> {
        Window::new(raw.x_min, raw.x_max, raw.y_min, raw.y_max)
    }
}

impl From<Window> for RawWindow {
    fn from(w: Window) -> Self {
        RawWindow {
            x_min: w.x_min,
            x_max: w.x_max,
            y_min: w.y_min,
            y_max: w.y_max,
        }
    }
}

impl Window {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let finite = [x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidWindow("bounds must be finite".into()));
        }
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::InvalidWindow(format!(
                "need x_min < x_max and y_min < y_max, got [{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        let w = Window {
            x_min,
            x_max,
            y_min,
            y_max,
        };
        if !(w.area() > 0.0) {
            return Err(Error::InvalidWindow("area underflows to zero".into()));
        }
        Ok(w)
    }

    pub fn unit() -> Self {
        Window {
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
        }
    }

    pub fn square(side: f64) -> Result<Self> {
        Window::new(0.0, side, 0.0, side)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn contains_window(&self, other: &Window) -> bool {
        other.x_min >= self.x_min
            && other.x_max <= self.x_max
            && other.y_min >= self.y_min
            && other.y_max <= self.y_max
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let x = self.x_min + self.width() * rng.random::<f64>();
        let y = self.y_min + self.height() * rng.random::<f64>();
        Point::new(x, y)
    }

    /// Affine map sending this window onto `target`.
    pub fn map_to(&self, target: &Window, p: Point) -> Point {
        if self == target {
            return p;
        }
        let u = (p.x - self.x_min) / self.width();
        let v = (p.y - self.y_min) / self.height();
        Point::new(
            target.x_min + u * target.width(),
            target.y_min + v * target.height(),
        )
    }
}

/// Event locations in a window, optionally stamped with a discrete time.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPattern {
    window: Window,
    points: Vec<Point>,
    times: Option<Vec<u32>>,
}

impl PointPattern {
    pub fn new(window: Window, points: Vec<Point>) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| !window.contains(p)) {
            return Err(Error::PointOutsideWindow { x: p.x, y: p.y });
        }
        Ok(PointPattern {
            window,
            points,
            times: None,
        })
    }

    pub fn with_times(window: Window, points: Vec<Point>, times: Vec<u32>) -> Result<Self> {
        if times.len() != points.len() {
            return Err(Error::param(
                "times",
                format!("{} time stamps for {} points", times.len(), points.len()),
            ));
        }
        let mut pattern = PointPattern::new(window, points)?;
        pattern.times = Some(times);
        Ok(pattern)
    }

    pub fn empty(window: Window) -> Self {
        PointPattern {
            window,
            points: Vec::new(),
            times: None,
        }
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn times(&self) -> Option<&[u32]> {
        self.times.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Largest time index, or 0 for an untimed pattern.
    pub fn last_time(&self) -> u32 {
        self.times
            .as_ref()
            .and_then(|t| t.iter().copied().max())
            .unwrap_or(0)
    }

    /// Split a time-stamped pattern into `horizon + 1` spatial patterns.
    /// An untimed pattern is treated as observed at time 0.
    pub fn split_by_time(&self, horizon: u32) -> Result<Vec<PointPattern>> {
        let mut out: Vec<Vec<Point>> = vec![Vec::new(); horizon as usize + 1];
        match &self.times {
            None => out[0] = self.points.clone(),
            Some(times) => {
                for (p, &t) in self.points.iter().zip(times) {
                    if t > horizon {
                        return Err(Error::param(
                            "times",
                            format!("time index {t} exceeds the last time {horizon}"),
                        ));
                    }
                    out[t as usize].push(*p);
                }
            }
        }
        Ok(out
            .into_iter()
            .map(|points| PointPattern {
                window: self.window,
                points,
                times: None,
            })
            .collect())
    }

    /// Stack per-time spatial patterns into one time-stamped pattern.
    pub fn stack(window: Window, slices: &[PointPattern]) -> Result<Self> {
        let mut points = Vec::new();
        let mut times = Vec::new();
        for (t, slice) in slices.iter().enumerate() {
            points.extend_from_slice(slice.points());
            times.extend(std::iter::repeat_n(t as u32, slice.len()));
        }
        PointPattern::with_times(window, points, times)
    }
}

/// Strictly increasing thresholds `c_1 < … < c_{K-1}` cutting the real
/// line into `K` intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PartitionLevels(Vec<f64>);

impl TryFrom<Vec<f64>> for PartitionLevels {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        PartitionLevels::new(v)
    }
}

impl From<PartitionLevels> for Vec<f64> {
    fn from(levels: PartitionLevels) -> Self {
        levels.0
    }
}

impl PartitionLevels {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidLevels("thresholds must be finite".into()));
        }
        if !is_strictly_increasing(&thresholds) {
            return Err(Error::InvalidLevels(format!(
                "thresholds must be strictly increasing, got {thresholds:?}"
            )));
        }
        Ok(PartitionLevels(thresholds))
    }

    /// The single-region partition (K = 1).
    pub fn single() -> Self {
        PartitionLevels(Vec::new())
    }

    /// Default starting thresholds for `k` regions: 0 for K=2,
    /// (−0.5, 0.5) for K=3, (−0.7, 0, 0.7) for K=4, and evenly spaced
    /// standard-normal quantiles beyond that.
    pub fn initial(k: usize) -> Result<Self> {
        let c = match k {
            0 => return Err(Error::param("k", "need at least one region")),
            1 => Vec::new(),
            2 => vec![0.0],
            3 => vec![-0.5, 0.5],
            4 => vec![-0.7, 0.0, 0.7],
            _ => {
                use statrs::distribution::{ContinuousCDF, Normal};
                let n = Normal::standard();
                (1..k).map(|j| n.inverse_cdf(j as f64 / k as f64)).collect()
            }
        };
        PartitionLevels::new(c)
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.0
    }

    pub fn num_regions(&self) -> usize {
        self.0.len() + 1
    }

    /// Zero-based region index of a latent value: region `k` holds
    /// `c_{k-1} < beta <= c_k`.
    pub fn region_of(&self, beta: f64) -> usize {
        self.0.partition_point(|&c| c < beta)
    }
}

pub(crate) fn is_strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

/// Anything that can report latent-field values at arbitrary locations,
/// consistently with whatever it has already revealed.
pub trait FieldSampler {
    fn values_at<R: Rng + ?Sized>(&mut self, sites: &[Point], rng: &mut R) -> Result<Vec<f64>>;
}

/// A deterministic field given by a closure; used for oracle tests.
pub struct FnField<F>(pub F);

impl<F: Fn(Point) -> f64> FieldSampler for FnField<F> {
    fn values_at<R: Rng + ?Sized>(&mut self, sites: &[Point], _rng: &mut R) -> Result<Vec<f64>> {
        Ok(sites.iter().map(|&s| (self.0)(s)).collect())
    }
}

pub(crate) fn poisson_count<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let draw: f64 = Poisson::new(mean)
        .expect("positive finite Poisson mean")
        .sample(rng);
    draw as usize
}

pub fn uniform_points<R: Rng + ?Sized>(window: &Window, n: usize, rng: &mut R) -> PointPattern {
    let points = (0..n).map(|_| window.sample(rng)).collect();
    PointPattern {
        window: *window,
        points,
        times: None,
    }
}

/// Homogeneous Poisson process with the given rate on the window.
pub fn homogeneous_poisson<R: Rng + ?Sized>(window: &Window, rate: f64, rng: &mut R) -> PointPattern {
    let n = poisson_count(rng, rate * window.area());
    uniform_points(window, n, rng)
}

/// Simulate a level-set Cox process realisation by thinning a dominating
/// homogeneous process at rate `max_k λ_k`.
pub fn simulate_lscp<F: FieldSampler, R: Rng + ?Sized>(
    window: &Window,
    levels: &PartitionLevels,
    rates: &[f64],
    field: &mut F,
    rng: &mut R,
) -> Result<PointPattern> {
    if rates.len() != levels.num_regions() {
        return Err(Error::InvalidRates(format!(
            "{} rates for {} regions",
            rates.len(),
            levels.num_regions()
        )));
    }
    if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::InvalidRates("rates must be positive".into()));
    }
    let dominating = rates.iter().copied().fold(f64::MIN, f64::max);
    let candidates = homogeneous_poisson(window, dominating, rng);
    let marks: Vec<f64> = (0..candidates.len()).map(|_| rng.random::<f64>()).collect();
    if rates.iter().all(|&r| r == dominating) {
        return Ok(candidates);
    }
    let values = field.values_at(candidates.points(), rng)?;
    let kept = candidates
        .points()
        .iter()
        .zip(values.iter().zip(&marks))
        .filter(|(_, (&beta, &u))| u * dominating < rates[levels.region_of(beta)])
        .map(|(p, _)| *p)
        .collect();
    PointPattern::new(*window, kept)
}
