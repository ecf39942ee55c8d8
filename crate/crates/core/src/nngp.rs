//! Nearest-neighbour Gaussian process on a regular reference lattice.
//!
//! The lattice is enumerated row-major. Lattice site `i` conditions on the
//! `m` closest earlier sites; any off-lattice location conditions on its `m`
//! closest lattice sites only, so off-lattice values are conditionally
//! independent given the lattice. Every conditional is stored as kriging
//! weights plus a conditional standard deviation.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::covariance::CovarianceSpec;
use crate::error::{Error, Result};
use crate::geometry::{FieldSampler, Point, Window};
use crate::rng::StreamKey;

/// Diagonal jitter added to every local covariance before factorisation,
/// and to the marginal variance so that each conditional is that of the
/// kernel plus a `JITTER` nugget.
pub const JITTER: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct ReferenceGrid {
    window: Window,
    nx: usize,
    ny: usize,
    dx: f64,
    dy: f64,
    locations: Vec<Point>,
    neighbors: Vec<Vec<u32>>,
    m: usize,
}

impl ReferenceGrid {
    /// Cell-centred `nx × ny` lattice with `nx · ny ≈ r`, cells as close to
    /// square as the window allows.
    pub fn build(window: &Window, r: usize, m: usize) -> Result<Self> {
        if r < 4 {
            return Err(Error::param("grid_size", format!("need at least 4 sites, got {r}")));
        }
        if m == 0 {
            return Err(Error::param("neighbors", "need at least one neighbour"));
        }
        let aspect = window.width() / window.height();
        let nx = ((r as f64 * aspect).sqrt().round() as usize).max(2);
        let ny = ((r as f64 / nx as f64).round() as usize).max(2);
        let n = nx * ny;
        let m = if m >= n {
            log::warn!("neighbour count {m} clamped to {} for a {n}-site grid", n - 1);
            n - 1
        } else {
            m
        };
        let dx = window.width() / nx as f64;
        let dy = window.height() / ny as f64;
        let locations: Vec<Point> = (0..n)
            .map(|i| {
                let (ix, iy) = (i % nx, i / nx);
                Point::new(
                    window.x_min() + (ix as f64 + 0.5) * dx,
                    window.y_min() + (iy as f64 + 0.5) * dy,
                )
            })
            .collect();
        let neighbors = (0..n)
            .into_par_iter()
            .map(|i| earlier_neighbors(&locations, i, m))
            .collect();
        Ok(ReferenceGrid {
            window: *window,
            nx,
            ny,
            dx,
            dy,
            locations,
            neighbors,
            m,
        })
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    /// Effective neighbour count after clamping.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn locations(&self) -> &[Point] {
        &self.locations
    }

    /// Conditioning set of lattice site `i`; only indices `< i`.
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbors[i]
    }

    /// The `k` lattice sites closest to `p`, ordered by distance with ties
    /// going to the lower index.
    pub fn nearest(&self, p: &Point, k: usize) -> Vec<u32> {
        let k = k.min(self.len());
        let u = (p.x - self.window.x_min()) / self.dx - 0.5;
        let v = (p.y - self.window.y_min()) / self.dy - 0.5;
        let cu = (u.round().max(0.0) as usize).min(self.nx - 1);
        let cv = (v.round().max(0.0) as usize).min(self.ny - 1);
        let mut half = ((k as f64).sqrt() / 2.0).ceil() as usize + 1;
        let mut cand: Vec<(f64, u32)> = Vec::with_capacity((2 * half + 1) * (2 * half + 1));
        loop {
            let (i0, i1) = (cu.saturating_sub(half), (cu + half).min(self.nx - 1));
            let (j0, j1) = (cv.saturating_sub(half), (cv + half).min(self.ny - 1));
            cand.clear();
            for iy in j0..=j1 {
                for ix in i0..=i1 {
                    let idx = iy * self.nx + ix;
                    cand.push((p.distance_sq(&self.locations[idx]), idx as u32));
                }
            }
            let whole = i0 == 0 && j0 == 0 && i1 == self.nx - 1 && j1 == self.ny - 1;
            if cand.len() >= k {
                let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if k < cand.len() {
                    cand.select_nth_unstable_by(k - 1, cmp);
                    cand.truncate(k);
                }
                cand.sort_unstable_by(cmp);
                let kth = cand.last().map_or(0.0, |c| c.0);
                let mut cover = f64::INFINITY;
                if i0 > 0 {
                    cover = cover.min((u - (i0 - 1) as f64) * self.dx);
                }
                if i1 + 1 < self.nx {
                    cover = cover.min(((i1 + 1) as f64 - u) * self.dx);
                }
                if j0 > 0 {
                    cover = cover.min((v - (j0 - 1) as f64) * self.dy);
                }
                if j1 + 1 < self.ny {
                    cover = cover.min(((j1 + 1) as f64 - v) * self.dy);
                }
                if whole || kth < cover * cover {
                    return cand.iter().map(|c| c.1).collect();
                }
            }
            half += 1;
        }
    }

    fn lattice_offset(&self, a: u32, b: u32) -> usize {
        let (a, b) = (a as usize, b as usize);
        let dix = (a % self.nx).abs_diff(b % self.nx);
        let diy = (a / self.nx).abs_diff(b / self.nx);
        dix * self.ny + diy
    }
}

fn earlier_neighbors(locations: &[Point], i: usize, m: usize) -> Vec<u32> {
    let k = i.min(m);
    if k == 0 {
        return Vec::new();
    }
    let me = locations[i];
    let mut cand: Vec<(f64, u32)> = locations[..i]
        .iter()
        .enumerate()
        .map(|(j, q)| (me.distance_sq(q), j as u32))
        .collect();
    let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp);
    cand.into_iter().map(|c| c.1).collect()
}

/// Gaussian conditional of one location given lattice values:
/// mean `Σ w_j β(g_j)`, standard deviation `sd`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    neighbors: Vec<u32>,
    weights: Vec<f64>,
    sd: f64,
}

impl Conditional {
    pub fn neighbors(&self) -> &[u32] {
        &self.neighbors
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sd(&self) -> f64 {
        self.sd
    }

    #[inline]
    pub fn mean(&self, grid: &[f64]) -> f64 {
        self.neighbors
            .iter()
            .zip(&self.weights)
            .map(|(&j, w)| w * grid[j as usize])
            .sum()
    }

    #[inline]
    pub fn draw(&self, grid: &[f64], z: f64) -> f64 {
        self.mean(grid) + self.sd * z
    }
}

/// The NNGP law `NNGP(0, Σ̃)` induced by a covariance on a reference grid.
#[derive(Debug, Clone)]
pub struct NngpPrior {
    grid: Arc<ReferenceGrid>,
    spec: CovarianceSpec,
    lattice_cov: Vec<f64>,
    factors: Vec<Conditional>,
    /// Factorised neighbour covariances keyed by the shape of the
    /// neighbour set. The matrix depends on nothing else.
    pattern_cache: Arc<RwLock<HashMap<(u8, u128), Arc<Cholesky<f64, Dyn>>>>>,
}

const PATTERN_CACHE_LIMIT: usize = 1 << 16;

impl NngpPrior {
    pub fn new(grid: Arc<ReferenceGrid>, spec: CovarianceSpec) -> Result<Self> {
        let (nx, ny) = grid.shape();
        let lattice_cov = (0..nx * ny)
            .map(|o| {
                let (dix, diy) = (o / ny, o % ny);
                spec.at_distance((dix as f64 * grid.dx).hypot(diy as f64 * grid.dy))
            })
            .collect();
        let mut prior = NngpPrior {
            grid,
            spec,
            lattice_cov,
            factors: Vec::new(),
            pattern_cache: Arc::default(),
        };
        let factors = (0..prior.grid.len())
            .into_par_iter()
            .map(|i| {
                let loc = prior.grid.locations[i];
                prior.solve(i, &loc, prior.grid.neighbors(i).to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        prior.factors = factors;
        Ok(prior)
    }

    pub fn grid(&self) -> &Arc<ReferenceGrid> {
        &self.grid
    }

    pub fn spec(&self) -> &CovarianceSpec {
        &self.spec
    }

    /// Sequential conditional of lattice site `i` given its earlier neighbours.
    pub fn grid_conditional(&self, i: usize) -> &Conditional {
        &self.factors[i]
    }

    /// Conditional of an arbitrary location given its nearest lattice sites.
    pub fn conditional_at(&self, p: &Point) -> Result<Conditional> {
        let mut nbrs = self.grid.nearest(p, self.grid.m());
        nbrs.sort_unstable();
        let Some(key) = self.pattern_key(&nbrs) else {
            let chol = self.factor(usize::MAX, &nbrs)?;
            return Ok(self.finish(p, nbrs, &chol));
        };
        let cached = self.pattern_cache.read().expect("cache lock").get(&key).cloned();
        let chol = match cached {
            Some(c) => c,
            None => {
                let c = Arc::new(self.factor(usize::MAX, &nbrs)?);
                let mut cache = self.pattern_cache.write().expect("cache lock");
                if cache.len() < PATTERN_CACHE_LIMIT {
                    cache.insert(key, c.clone());
                }
                c
            }
        };
        Ok(self.finish(p, nbrs, &chol))
    }

    /// Occupancy bitmask of the neighbours inside their bounding box, or
    /// `None` when the box is too large to encode.
    fn pattern_key(&self, nbrs: &[u32]) -> Option<(u8, u128)> {
        let nx = self.grid.nx as u32;
        let (mut x0, mut x1) = (u32::MAX, 0);
        let mut y0 = u32::MAX;
        for &j in nbrs {
            x0 = x0.min(j % nx);
            x1 = x1.max(j % nx);
            y0 = y0.min(j / nx);
        }
        let w = x1.checked_sub(x0)? + 1;
        let mut mask = 0u128;
        for &j in nbrs {
            let bit = (j / nx - y0) * w + (j % nx - x0);
            if bit >= 128 {
                return None;
            }
            mask |= 1 << bit;
        }
        Some((w as u8, mask))
    }

    fn solve(&self, site: usize, p: &Point, neighbors: Vec<u32>) -> Result<Conditional> {
        if neighbors.is_empty() {
            return Ok(Conditional {
                neighbors,
                weights: Vec::new(),
                sd: (self.spec.sigma2() + JITTER).sqrt(),
            });
        }
        let chol = self.factor(site, &neighbors)?;
        Ok(self.finish(p, neighbors, &chol))
    }

    fn factor(&self, site: usize, neighbors: &[u32]) -> Result<Cholesky<f64, Dyn>> {
        let n = neighbors.len();
        let cmat = DMatrix::from_fn(n, n, |a, b| {
            let c = self.lattice_cov[self.grid.lattice_offset(neighbors[a], neighbors[b])];
            if a == b {
                c + JITTER
            } else {
                c
            }
        });
        cmat.cholesky().ok_or(Error::NotPositiveDefinite { site })
    }

    fn finish(&self, p: &Point, neighbors: Vec<u32>, chol: &Cholesky<f64, Dyn>) -> Conditional {
        let locs = &self.grid.locations;
        let rhs = DVector::from_iterator(
            neighbors.len(),
            neighbors.iter().map(|&j| self.spec.cov(p, &locs[j as usize])),
        );
        let mut w = rhs.clone();
        chol.solve_mut(&mut w);
        let var = self.spec.sigma2() + JITTER - rhs.dot(&w);
        Conditional {
            neighbors,
            weights: w.data.into(),
            sd: var.max(0.0).sqrt(),
        }
    }

    /// Sequential draw of the lattice values in enumeration order.
    pub fn sample_grid<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut values = Vec::with_capacity(self.factors.len());
        for f in &self.factors {
            let z: f64 = StandardNormal.sample(rng);
            let v = f.draw(&values, z);
            values.push(v);
        }
        values
    }

    /// Log-density of lattice values as the sum of sequential conditionals.
    pub fn log_density(&self, values: &[f64]) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        self.factors
            .iter()
            .zip(values)
            .map(|(f, &v)| {
                let var = f.sd * f.sd;
                let resid = v - f.mean(values);
                -0.5 * (ln2pi + var.ln() + resid * resid / var)
            })
            .sum()
    }

    /// Sparse factor `A = I − B` and diagonal `F` with `Σ̃⁻¹ = Aᵀ F⁻¹ A`.
    pub fn sparse_factor(&self) -> SparseFactor {
        let mut row_ptr = Vec::with_capacity(self.factors.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for (i, f) in self.factors.iter().enumerate() {
            cols.push(i as u32);
            vals.push(1.0);
            for (&j, &w) in f.neighbors.iter().zip(&f.weights) {
                cols.push(j);
                vals.push(-w);
            }
            row_ptr.push(cols.len());
        }
        SparseFactor {
            row_ptr,
            cols,
            vals,
            diag: self.factors.iter().map(|f| f.sd * f.sd).collect(),
        }
    }

    /// Log-density through the sparse quadratic form
    /// `−½ (r log 2π + log|F| + (Aβ)ᵀ F⁻¹ (Aβ))`.
    pub fn log_density_sparse(&self, values: &[f64]) -> f64 {
        self.sparse_factor().log_density(values)
    }
}

/// Compressed-row storage of the NNGP precision factor.
#[derive(Debug, Clone)]
pub struct SparseFactor {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    diag: Vec<f64>,
}

impl SparseFactor {
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.row_ptr
            .windows(2)
            .map(|w| {
                (w[0]..w[1])
                    .map(|e| self.vals[e] * x[self.cols[e] as usize])
                    .sum()
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let u = self.apply(x);
        let quad: f64 = u.iter().zip(&self.diag).map(|(a, d)| a * a / d).sum();
        let logdet: f64 = self.diag.iter().map(|d| d.ln()).sum();
        -0.5 * (x.len() as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    /// Location of an observed event.
    Data,
    /// Location of an unveiled auxiliary point.
    Auxiliary,
    /// Anything else; deletable at any time.
    Scratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SiteId(u32);

impl SiteId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
pub struct OffgridSite {
    pub location: Point,
    pub value: f64,
    pub provenance: Provenance,
    pub conditional: Conditional,
}

/// Latent values on the lattice plus an arena of revealed off-lattice sites.
#[derive(Debug, Clone, Default)]
pub struct LatentField {
    grid: Vec<f64>,
    slots: Vec<Option<OffgridSite>>,
    free: Vec<u32>,
    live: usize,
}

impl LatentField {
    pub fn new(grid: Vec<f64>) -> Self {
        LatentField {
            grid,
            ..Default::default()
        }
    }

    pub fn from_prior<R: Rng + ?Sized>(prior: &NngpPrior, rng: &mut R) -> Self {
        LatentField::new(prior.sample_grid(rng))
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn set_grid(&mut self, values: Vec<f64>) {
        assert_eq!(values.len(), self.grid.len(), "grid length mismatch");
        self.grid = values;
    }

    /// Number of revealed off-lattice sites.
    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn insert(&mut self, site: OffgridSite) -> SiteId {
        self.live += 1;
        match self.free.pop() {
            Some(slot) => {
                self.slots[slot as usize] = Some(site);
                SiteId(slot)
            }
            None => {
                self.slots.push(Some(site));
                SiteId(self.slots.len() as u32 - 1)
            }
        }
    }

    pub fn get(&self, id: SiteId) -> Option<&OffgridSite> {
        self.slots.get(id.index()).and_then(|s| s.as_ref())
    }

    pub fn value(&self, id: SiteId) -> Option<f64> {
        self.get(id).map(|s| s.value)
    }

    pub fn set_provenance(&mut self, id: SiteId, provenance: Provenance) {
        if let Some(Some(site)) = self.slots.get_mut(id.index()) {
            site.provenance = provenance;
        }
    }

    pub fn remove(&mut self, id: SiteId) -> Option<OffgridSite> {
        let taken = self.slots.get_mut(id.index()).and_then(|s| s.take());
        if taken.is_some() {
            self.live -= 1;
            self.free.push(id.0);
        }
        taken
    }

    pub fn iter(&self) -> impl Iterator<Item = (SiteId, &OffgridSite)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (SiteId(i as u32), s)))
    }

    /// Install an accepted pCN proposal.
    pub fn accept(&mut self, proposal: PcnProposal) {
        assert_eq!(proposal.offgrid.len(), self.slots.len(), "stale proposal");
        self.grid = proposal.grid;
        for (slot, v) in self.slots.iter_mut().zip(proposal.offgrid) {
            if let Some(site) = slot {
                site.value = v;
            }
        }
    }
}

/// Reveal the field at new locations, each drawn from its conditional given
/// the lattice values. Existing sites are untouched.
pub fn extend_offgrid<R: Rng + ?Sized>(
    field: &mut LatentField,
    prior: &NngpPrior,
    sites: &[Point],
    provenance: Provenance,
    rng: &mut R,
) -> Result<Vec<SiteId>> {
    if sites.is_empty() {
        return Ok(Vec::new());
    }
    let key = StreamKey::draw(rng);
    let grid = field.grid();
    let drawn = sites
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let cond = prior.conditional_at(p)?;
            let z: f64 = StandardNormal.sample(&mut key.stream(i as u64));
            let value = cond.draw(grid, z);
            Ok(OffgridSite {
                location: *p,
                value,
                provenance,
                conditional: cond,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(drawn.into_iter().map(|s| field.insert(s)).collect())
}

/// Proposed values for every retained location, aligned with the field's
/// slots (vacant slots hold NaN).
#[derive(Debug, Clone)]
pub struct PcnProposal {
    grid: Vec<f64>,
    offgrid: Vec<f64>,
}

impl PcnProposal {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn value(&self, id: SiteId) -> f64 {
        self.offgrid[id.index()]
    }
}

pub(crate) fn check_step(varsigma: f64) -> Result<()> {
    if varsigma > 0.0 && varsigma <= 1.0 {
        Ok(())
    } else {
        Err(Error::param("varsigma", format!("must lie in (0, 1], got {varsigma}")))
    }
}

/// Preconditioned Crank–Nicolson proposal `√(1−ς²) β + ς ε` with `ε` a
/// fresh prior draw: lattice first (sequential), then every retained
/// off-lattice site from its cached conditional (parallel).
pub fn pcn_propose<R: Rng + ?Sized>(
    field: &LatentField,
    prior: &NngpPrior,
    varsigma: f64,
    rng: &mut R,
) -> Result<PcnProposal> {
    check_step(varsigma)?;
    let eps = prior.sample_grid(rng);
    let key = StreamKey::draw(rng);
    Ok(pcn_combine(field, &eps, varsigma, &key))
}

/// Combine the current field with a lattice innovation `eps`; off-lattice
/// innovations are drawn from the cached conditionals given `eps`.
pub fn pcn_combine(field: &LatentField, eps: &[f64], varsigma: f64, key: &StreamKey) -> PcnProposal {
    let keep = (1.0 - varsigma * varsigma).sqrt();
    let grid = field
        .grid
        .iter()
        .zip(eps)
        .map(|(b, e)| keep * b + varsigma * e)
        .collect();
    let offgrid = field
        .slots
        .par_iter()
        .enumerate()
        .map(|(i, slot)| match slot {
            None => f64::NAN,
            Some(site) => {
                let z: f64 = StandardNormal.sample(&mut key.stream(i as u64));
                keep * site.value + varsigma * site.conditional.draw(eps, z)
            }
        })
        .collect();
    PcnProposal { grid, offgrid }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneOutcome {
    Unchanged,
    Removed(usize),
}

/// Virtual update: drop every off-lattice site for which `keep` is false.
/// Refuses (without modifying anything) if that would drop a data site.
pub fn prune_scratch<F>(field: &mut LatentField, keep: F) -> Result<PruneOutcome>
where
    F: Fn(SiteId, &OffgridSite) -> bool,
{
    let doomed: Vec<SiteId> = field
        .iter()
        .filter(|(id, s)| !keep(*id, s))
        .map(|(id, s)| (id, s.provenance))
        .map(|(id, p)| {
            if p == Provenance::Data {
                Err(Error::PruneDataSite)
            } else {
                Ok(id)
            }
        })
        .collect::<Result<_>>()?;
    if doomed.is_empty() {
        return Ok(PruneOutcome::Unchanged);
    }
    for id in &doomed {
        field.remove(*id);
    }
    Ok(PruneOutcome::Removed(doomed.len()))
}

/// Retrospective view of an NNGP realisation fixed on the lattice: values
/// at new locations are drawn on demand and remembered.
pub struct ConditionalField<'a> {
    prior: &'a NngpPrior,
    grid: &'a [f64],
    revealed: HashMap<(u64, u64), f64>,
}

impl<'a> ConditionalField<'a> {
    pub fn new(prior: &'a NngpPrior, grid: &'a [f64]) -> Self {
        ConditionalField {
            prior,
            grid,
            revealed: HashMap::new(),
        }
    }
}

impl FieldSampler for ConditionalField<'_> {
    fn values_at<R: Rng + ?Sized>(&mut self, sites: &[Point], rng: &mut R) -> Result<Vec<f64>> {
        let key_of = |p: &Point| (p.x.to_bits(), p.y.to_bits());
        let mut fresh: Vec<Point> = sites
            .iter()
            .filter(|p| !self.revealed.contains_key(&key_of(p)))
            .copied()
            .collect();
        fresh.dedup_by_key(|p| key_of(p));
        if !fresh.is_empty() {
            let key = StreamKey::draw(rng);
            let drawn = draw_conditional(self.prior, self.grid, &fresh, &key)?;
            for (p, v) in fresh.iter().zip(drawn) {
                self.revealed.insert(key_of(p), v);
            }
        }
        Ok(sites.iter().map(|p| self.revealed[&key_of(p)]).collect())
    }
}

/// Independent conditional draws at `sites` given lattice values, using
/// per-site streams of `key`.
pub fn draw_conditional(
    prior: &NngpPrior,
    grid: &[f64],
    sites: &[Point],
    key: &StreamKey,
) -> Result<Vec<f64>> {
    sites
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let cond = prior.conditional_at(p)?;
            let z: f64 = StandardNormal.sample(&mut key.stream(i as u64));
            Ok(cond.draw(grid, z))
        })
        .collect()
}
