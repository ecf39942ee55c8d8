//! Run orchestration for the five CLI modes.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use log::info;
use serde::Serialize;

use crate::diagnostics::{dic, summarise_trace, DicReport, DicSites, TraceSummary};
use crate::error::{Error, Result};
use crate::geometry::{simulate_lscp, PointPattern};
use crate::io::config::{Mode, RunConfig};
use crate::io::emit::{
    create, lattice_summary, read_draws, read_samples, real, write_draw, write_json, write_lattice_summary,
    write_pattern, Manifest, SampleWriter,
};
use crate::io::ingest::ingest_pattern;
use crate::nngp::{ConditionalField, NngpPrior};
use crate::predict::{
    future_draw, integrated_intensity_draws, replicate_pattern, summarise, PredictiveRequest, PredictiveSummary,
};
use crate::priors::{ngar1_simulate, NGAR1Spec};
use crate::rng::{seeded, StreamKey};
use crate::sampler::{Chain, Output, PosteriorDraw, RunSummary};
use crate::spatiotemporal::{initialize_st, DynamicPrior, TemporalRates};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const MANIFEST: &str = "manifest.json";
pub const SAMPLES: &str = "samples.csv";
pub const DRAWS: &str = "draws.jsonl";
pub const PATTERN: &str = "pattern.csv";

/// Capacity of the queue between the sampler and the output writer.
const QUEUE: usize = 64;

/// Run `cfg` and write every output into `cfg.output.dir`.
pub fn execute(cfg: &RunConfig, threads: usize) -> Result<Manifest> {
    cfg.validate()?;
    let start = Instant::now();
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))?;
    let mut outputs = vec![RESOLVED_CONFIG.to_string()];
    std::fs::write(dir.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    info!("{} run, seed {}, output in {}", cfg.mode.name(), cfg.seed, dir.display());
    let run = match cfg.mode {
        Mode::Simulate => {
            simulate(cfg, &dir, &mut outputs)?;
            None
        }
        Mode::Fit | Mode::FitSt => Some(fit(cfg, &dir, &mut outputs)?),
        Mode::Predict => {
            predict(cfg, &dir, &mut outputs)?;
            None
        }
        Mode::Diagnose => {
            diagnose(cfg, &dir, &mut outputs)?;
            None
        }
    };
    outputs.push(MANIFEST.to_string());
    let manifest = Manifest {
        mode: cfg.mode.name().to_string(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        threads,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        run,
        outputs,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Serialize)]
struct Truth {
    /// Rates at each time.
    rates: Vec<Vec<f64>>,
    levels: Vec<f64>,
    /// Lattice values at each time.
    grids: Vec<Vec<f64>>,
}

fn simulate(cfg: &RunConfig, dir: &Path, outputs: &mut Vec<String>) -> Result<()> {
    let mut rng = seeded(cfg.seed);
    let levels = cfg.true_levels()?;
    let base = cfg.model_spec()?.build_prior(&cfg.window)?;
    let times = cfg.simulate.times as usize;
    let (grids, rates) = if times == 0 {
        (vec![base.sample_grid(&mut rng)], vec![cfg.simulate.rates.clone()])
    } else {
        let st = cfg.st_model_spec()?;
        let dynamic = DynamicPrior::new(base.clone(), &st.innovation)?;
        let grids = dynamic.sample_grids(times, &mut rng);
        let rates = match &st.rates {
            TemporalRates::Independent => vec![cfg.simulate.rates.clone(); times + 1],
            TemporalRates::Ngar1 { w, a } => {
                let spec = NGAR1Spec::new(w.clone(), a.clone(), st.spatial.prior.clone())?;
                ngar1_simulate(&cfg.simulate.rates, &spec, times, &mut rng)?
            }
        };
        (grids, rates)
    };
    let mut slices = Vec::with_capacity(grids.len());
    for (g, r) in grids.iter().zip(&rates) {
        slices.push(simulate_lscp(&cfg.window, &levels, r, &mut ConditionalField::new(&base, g), &mut rng)?);
    }
    let pattern = if times == 0 {
        slices.pop().expect("one slice")
    } else {
        PointPattern::stack(cfg.window, &slices)?
    };
    info!("simulated {} points", pattern.len());
    write_pattern(create(&dir.join(PATTERN))?, &pattern)?;
    outputs.push(PATTERN.to_string());
    write_json(
        &dir.join("truth.json"),
        &Truth {
            rates,
            levels: levels.thresholds().to_vec(),
            grids,
        },
    )?;
    outputs.push("truth.json".to_string());
    Ok(())
}

fn input_pattern(cfg: &RunConfig, temporal: bool) -> Result<PointPattern> {
    let path = cfg
        .input
        .path
        .as_ref()
        .ok_or_else(|| Error::Config("input.path is required".into()))?;
    ingest_pattern(path, &cfg.window, cfg.input.source_window.as_ref(), temporal)
}

fn build_chain(cfg: &RunConfig) -> Result<Chain> {
    let config = cfg.sampler_config();
    match cfg.mode {
        Mode::FitSt => {
            let pattern = input_pattern(cfg, true)?;
            let horizon = cfg.temporal.horizon.unwrap_or(pattern.last_time());
            initialize_st(&pattern, horizon, &cfg.st_model_spec()?, &config)
        }
        _ => crate::sampler::initialize(&input_pattern(cfg, false)?, &cfg.model_spec()?, &config),
    }
}

fn grid_summary_name(t: usize, times: usize) -> String {
    if times == 1 {
        "grid_summary.csv".to_string()
    } else {
        format!("grid_summary_t{t}.csv")
    }
}

/// Fit with the sampler on this thread and a single writer thread fed
/// through a bounded queue.
fn fit(cfg: &RunConfig, dir: &Path, outputs: &mut Vec<String>) -> Result<RunSummary> {
    let chain = build_chain(cfg)?;
    let times = chain.times();
    let k = chain.model().levels;
    let prior = chain.model().prior.clone();
    let samples_path = dir.join(SAMPLES);
    let draws_path = dir.join(DRAWS);
    let (tx, rx) = sync_channel::<Output>(QUEUE);
    let (summary, draws) = std::thread::scope(|s| -> Result<(RunSummary, Vec<PosteriorDraw>)> {
        let writer = s.spawn(move || -> Result<Vec<PosteriorDraw>> {
            let mut samples = SampleWriter::new(create(&samples_path)?, times, k)?;
            let mut draws_out = create(&draws_path)?;
            let mut draws = Vec::new();
            for o in rx {
                match o {
                    Output::Sample(r) => samples.write(&r)?,
                    Output::Draw(d) => {
                        write_draw(&mut draws_out, &d)?;
                        draws.push(d);
                    }
                }
            }
            samples.finish()?.flush()?;
            draws_out.flush()?;
            Ok(draws)
        });
        let result = chain.run_with(|o| {
            tx.send(o)
                .map_err(|_| Error::Io(std::io::Error::other("output writer stopped")))
        });
        drop(tx);
        let written = writer
            .join()
            .map_err(|_| Error::Io(std::io::Error::other("output writer panicked")))?;
        let draws = written?;
        Ok((result?, draws))
    })?;
    outputs.push(SAMPLES.to_string());
    outputs.push(DRAWS.to_string());
    info!(
        "retained {} samples, {} draws; mean |N| {:.1}",
        summary.retained,
        draws.len(),
        summary.mean_aux_count
    );
    if !draws.is_empty() {
        for t in 0..times {
            let s = lattice_summary(&draws, t, &prior, cfg.output.grid_resolution, cfg.seed)?;
            let name = grid_summary_name(t, times);
            write_lattice_summary(create(&dir.join(&name))?, &s)?;
            outputs.push(name);
        }
    }
    Ok(summary)
}

/// A completed fit: its configuration, prior and snapshots.
struct FittedRun {
    cfg: RunConfig,
    prior: NngpPrior,
    draws: Vec<PosteriorDraw>,
}

fn load_run(run_dir: &Path) -> Result<FittedRun> {
    let cfg = RunConfig::load(&run_dir.join(RESOLVED_CONFIG))?;
    if !matches!(cfg.mode, Mode::Fit | Mode::FitSt) {
        return Err(Error::Config(format!("{} is not the output of a fit", run_dir.display())));
    }
    let prior = cfg.model_spec()?.build_prior(&cfg.window)?;
    let draws = read_draws(&run_dir.join(DRAWS))?;
    if draws.is_empty() {
        return Err(Error::Config(format!("{} holds no posterior draws", run_dir.display())));
    }
    Ok(FittedRun { cfg, prior, draws })
}

fn run_dir(dir: &Option<PathBuf>) -> Result<&Path> {
    dir.as_deref().ok_or_else(|| Error::Config("run_dir is required".into()))
}

#[derive(Debug, Serialize)]
struct PredictionReport {
    request: PredictiveRequest,
    time: usize,
    draws: usize,
    /// One summary per horizon for future requests, otherwise one.
    summaries: Vec<PredictiveSummary>,
}

fn predict(cfg: &RunConfig, dir: &Path, outputs: &mut Vec<String>) -> Result<()> {
    let run = load_run(run_dir(&cfg.predict.run_dir)?)?;
    let times = run.draws[0].rates.len();
    let t = cfg.predict.time.unwrap_or(times - 1);
    if t >= times {
        return Err(Error::param("time", format!("the fit has {times} time(s)")));
    }
    let key = StreamKey::from_seed(cfg.seed);
    let reference = cfg.predict.reference;
    let summaries = match &cfg.predict.request {
        PredictiveRequest::IntegratedIntensity { region } => {
            let region = region.unwrap_or(run.cfg.window);
            let values = integrated_intensity_draws(&run.draws, t, &run.prior, &region, &key)?;
            write_values(dir, "predictive.csv", &["draw", "integrated_intensity"], &values)?;
            outputs.push("predictive.csv".into());
            vec![summarise(&values, reference)?]
        }
        PredictiveRequest::ReplicatePattern => {
            let patterns = run
                .draws
                .iter()
                .enumerate()
                .map(|(i, d)| replicate_pattern(d, t, &run.prior, &mut key.stream(i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let counts: Vec<f64> = patterns.iter().map(|p| p.len() as f64).collect();
            write_values(dir, "predictive.csv", &["draw", "count"], &counts)?;
            outputs.push("predictive.csv".into());
            if cfg.predict.write_patterns {
                write_indexed_patterns(dir, "replicates.csv", patterns.iter().enumerate().map(|(i, p)| (i, 0, p)))?;
                outputs.push("replicates.csv".into());
            }
            vec![summarise(&counts, reference)?]
        }
        PredictiveRequest::Future { horizons } => {
            let st = run.cfg.st_model_spec()?;
            let innovation = st.innovation.build(&run.prior)?;
            let (w, a) = match &st.rates {
                TemporalRates::Ngar1 { w, a } => (w.clone(), a.clone()),
                TemporalRates::Independent => {
                    let k = run.cfg.model.levels;
                    (vec![crate::spatiotemporal::DEFAULT_W; k], crate::spatiotemporal::default_ngar1_a(k))
                }
            };
            let spec = NGAR1Spec::new(w, a, st.spatial.prior.clone())?;
            let futures = run
                .draws
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    future_draw(d, &run.prior, innovation.as_ref(), &spec, *horizons, true, &mut key.stream(i as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut out = csv::Writer::from_writer(create(&dir.join("future.csv"))?);
            let k = run.cfg.model.levels;
            let mut header = vec!["draw".to_string(), "horizon".to_string()];
            header.extend((1..=k).map(|j| format!("lambda_{j}")));
            header.push("count".into());
            out.write_record(&header)?;
            let mut counts = vec![Vec::with_capacity(futures.len()); *horizons];
            for (i, f) in futures.iter().enumerate() {
                let patterns = f.patterns.as_ref().expect("patterns requested");
                for h in 0..*horizons {
                    let mut row = vec![i.to_string(), (h + 1).to_string()];
                    row.extend(f.rates[h].iter().map(|&v| real(v)));
                    row.push(patterns[h].len().to_string());
                    out.write_record(&row)?;
                    counts[h].push(patterns[h].len() as f64);
                }
            }
            out.flush()?;
            outputs.push("future.csv".into());
            if cfg.predict.write_patterns {
                write_indexed_patterns(
                    dir,
                    "future_patterns.csv",
                    futures.iter().enumerate().flat_map(|(i, f)| {
                        f.patterns
                            .as_ref()
                            .expect("patterns requested")
                            .iter()
                            .enumerate()
                            .map(move |(h, p)| (i, h + 1, p))
                    }),
                )?;
                outputs.push("future_patterns.csv".into());
            }
            counts.iter().map(|c| summarise(c, reference)).collect::<Result<_>>()?
        }
    };
    write_json(
        &dir.join("prediction.json"),
        &PredictionReport {
            request: cfg.predict.request.clone(),
            time: t,
            draws: run.draws.len(),
            summaries,
        },
    )?;
    outputs.push("prediction.json".into());
    Ok(())
}

fn write_values(dir: &Path, name: &str, header: &[&str], values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(&dir.join(name))?);
    w.write_record(header)?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), real(*v)])?;
    }
    w.flush()?;
    Ok(())
}

fn write_indexed_patterns<'a>(
    dir: &Path,
    name: &str,
    patterns: impl Iterator<Item = (usize, usize, &'a PointPattern)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(&dir.join(name))?);
    w.write_record(["draw", "horizon", "x", "y"])?;
    for (i, h, p) in patterns {
        for q in p.points() {
            w.write_record([i.to_string(), h.to_string(), real(q.x), real(q.y)])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct DiagnosticsReport {
    traces: Vec<TraceSummary>,
    dic: DicReport,
}

fn diagnose(cfg: &RunConfig, dir: &Path, outputs: &mut Vec<String>) -> Result<()> {
    let run_dir = run_dir(&cfg.diagnose.run_dir)?;
    let run = load_run(run_dir)?;
    let table = read_samples(&run_dir.join(SAMPLES))?;
    let traces = table
        .columns
        .iter()
        .filter(|c| c.starts_with("lambda_") || c.starts_with("c_") || *c == "log_pseudo_marginal" || *c == "aux_count")
        .map(|c| summarise_trace(c, table.column(c).expect("listed column")))
        .collect::<Result<Vec<_>>>()?;
    let sites = DicSites::new(&run.cfg.window, cfg.diagnose.mc_area_points, &mut seeded(cfg.seed))?;
    let report = dic(&run.draws, &run.prior, &sites, cfg.seed)?;
    info!("DIC {:.3} (pD {:.3})", report.dic, report.effective_parameters);
    write_json(&dir.join("diagnostics.json"), &DiagnosticsReport { traces, dic: report })?;
    outputs.push("diagnostics.json".into());
    Ok(())
}
