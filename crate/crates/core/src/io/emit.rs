//! Output tables: samples, snapshots, patterns, intensity summaries and the
//! run manifest. Reals are written with 17 significant digits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PartitionLevels, Point, PointPattern, Window};
use crate::nngp::{Conditional, NngpPrior};
use crate::predict::modal;
use crate::rng::StreamKey;
use crate::sampler::{PosteriorDraw, RunSummary, SampleRecord};

/// Shortest fixed-width form carrying 17 significant digits.
pub fn real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Column names of the samples table for `times` slices and `k` levels.
pub fn sample_columns(times: usize, k: usize) -> Vec<String> {
    let mut cols = vec!["iteration".to_string()];
    for t in 0..times {
        for j in 1..=k {
            cols.push(if times == 1 { format!("lambda_{j}") } else { format!("lambda_t{t}_{j}") });
        }
    }
    cols.extend((1..k).map(|j| format!("c_{j}")));
    for c in [
        "log_pseudo_marginal",
        "aux_count",
        "accept_beta",
        "accept_aux",
        "accept_rates",
        "accept_levels",
        "snapshot",
    ] {
        cols.push(c.to_string());
    }
    cols
}

/// Streams [`SampleRecord`]s as CSV rows.
pub struct SampleWriter<W: Write> {
    out: csv::Writer<W>,
    last_iteration: usize,
}

impl<W: Write> SampleWriter<W> {
    pub fn new(writer: W, times: usize, k: usize) -> Result<Self> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(sample_columns(times, k))?;
        Ok(SampleWriter { out, last_iteration: 0 })
    }

    pub fn write(&mut self, r: &SampleRecord) -> Result<()> {
        if r.iteration <= self.last_iteration {
            return Err(Error::Config(format!("iteration {} written out of order", r.iteration)));
        }
        self.last_iteration = r.iteration;
        let mut row = vec![r.iteration.to_string()];
        row.extend(r.rates.iter().flatten().map(|&v| real(v)));
        row.extend(r.levels.iter().map(|&v| real(v)));
        row.push(real(r.log_pseudo_marginal));
        row.push(r.aux_count.to_string());
        for a in [r.accept.beta, r.accept.aux, r.accept.rates, r.accept.levels] {
            row.push(real(a));
        }
        row.push(r.snapshot.map(|s| s.to_string()).unwrap_or_default());
        self.out.write_record(row)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        self.out.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// The numeric columns of a samples table.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    pub columns: Vec<String>,
    /// Column-major values; blank cells read as NaN.
    pub values: Vec<Vec<f64>>,
}

impl SampleTable {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().position(|c| c == name).map(|i| &self.values[i][..])
    }
}

pub fn read_samples(path: &Path) -> Result<SampleTable> {
    let mut rdr = csv::Reader::from_path(path)?;
    let columns: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut values = vec![Vec::new(); columns.len()];
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        for (i, cell) in rec.iter().enumerate() {
            let v = if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse().map_err(|_| Error::Input {
                    line,
                    reason: format!("`{cell}` is not a number"),
                })?
            };
            values[i].push(v);
        }
    }
    Ok(SampleTable { columns, values })
}

/// One JSON object per line.
pub fn write_draw<W: Write>(out: &mut W, draw: &PosteriorDraw) -> Result<()> {
    serde_json::to_writer(&mut *out, draw)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_draws(path: &Path) -> Result<Vec<PosteriorDraw>> {
    let reader = BufReader::new(File::open(path)?);
    let mut draws = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        draws.push(serde_json::from_str(&line).map_err(|e| Error::Input {
            line: i as u64 + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(draws)
}

/// `x,y[,t]` rows.
pub fn write_pattern<W: Write>(out: W, pattern: &PointPattern) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    match pattern.times() {
        Some(times) => {
            w.write_record(["x", "y", "t"])?;
            for (p, t) in pattern.points().iter().zip(times) {
                w.write_record([real(p.x), real(p.y), t.to_string()])?;
            }
        }
        None => {
            w.write_record(["x", "y"])?;
            for p in pattern.points() {
                w.write_record([real(p.x), real(p.y)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Cell centres of an `n × n` lattice over `window`, row-major from the
/// lower-left corner.
pub fn evaluation_lattice(window: &Window, n: usize) -> Vec<Point> {
    let (dx, dy) = (window.width() / n as f64, window.height() / n as f64);
    (0..n * n)
        .map(|i| {
            let (ix, iy) = (i % n, i / n);
            Point::new(window.x_min() + (ix as f64 + 0.5) * dx, window.y_min() + (iy as f64 + 0.5) * dy)
        })
        .collect()
}

/// Pointwise intensity summary on an evaluation lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSummary {
    pub points: Vec<Point>,
    pub mean_intensity: Vec<f64>,
    /// 1-based modal region.
    pub modal_region: Vec<usize>,
    /// Posterior mean rate of the modal region.
    pub modal_intensity: Vec<f64>,
}

/// Summary from per-draw rates, thresholds and latent values at `points`.
pub fn lattice_summary_from_values(points: &[Point], draws: &[(Vec<f64>, PartitionLevels, Vec<f64>)]) -> Result<LatticeSummary> {
    if draws.is_empty() {
        return Err(Error::param("draws", "no posterior draws to summarise"));
    }
    let k = draws[0].0.len();
    let n = draws.len() as f64;
    let mut mean = vec![0.0; points.len()];
    let mut hits = vec![vec![0usize; k]; points.len()];
    let mut mean_rates = vec![0.0; k];
    for (rates, levels, values) in draws {
        if values.len() != points.len() || rates.len() != k {
            return Err(Error::param("draws", "inconsistent draw shapes"));
        }
        for (j, r) in rates.iter().enumerate() {
            mean_rates[j] += r / n;
        }
        for (i, &b) in values.iter().enumerate() {
            let reg = levels.region_of(b);
            mean[i] += rates[reg] / n;
            hits[i][reg] += 1;
        }
    }
    let modes: Vec<usize> = hits.iter().map(|h| modal(h)).collect();
    Ok(LatticeSummary {
        points: points.to_vec(),
        mean_intensity: mean,
        modal_intensity: modes.iter().map(|&m| mean_rates[m]).collect(),
        modal_region: modes.into_iter().map(|m| m + 1).collect(),
    })
}

/// Summary at time `t` on an `n × n` lattice, revealing each draw's field
/// at the lattice points from its grid values.
pub fn lattice_summary(
    draws: &[PosteriorDraw],
    t: usize,
    prior: &NngpPrior,
    resolution: usize,
    seed: u64,
) -> Result<LatticeSummary> {
    let points = evaluation_lattice(prior.grid().window(), resolution);
    let conds: Vec<Conditional> = points.par_iter().map(|p| prior.conditional_at(p)).collect::<Result<_>>()?;
    let key = StreamKey::from_seed(seed);
    let per_draw = draws
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let mut rng = key.stream(i as u64);
            let grid = d.grids.get(t).ok_or_else(|| Error::param("t", "time outside the draws"))?;
            let values = conds
                .iter()
                .map(|c| c.draw(grid, StandardNormal.sample(&mut rng)))
                .collect();
            Ok((d.rates[t].clone(), PartitionLevels::new(d.levels.clone())?, values))
        })
        .collect::<Result<Vec<_>>>()?;
    lattice_summary_from_values(&points, &per_draw)
}

pub fn write_lattice_summary<W: Write>(out: W, s: &LatticeSummary) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "mean_IF", "modal_region", "modal_IF"])?;
    for i in 0..s.points.len() {
        w.write_record([
            real(s.points[i].x),
            real(s.points[i].y),
            real(s.mean_intensity[i]),
            s.modal_region[i].to_string(),
            real(s.modal_intensity[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Machine-readable record of one CLI run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: String,
    pub seed: u64,
    pub version: String,
    pub threads: usize,
    pub wall_time_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSummary>,
    pub outputs: Vec<String>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
