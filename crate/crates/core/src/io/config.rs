//! File-backed run configuration.
//!
//! Every section has defaults, unknown keys are rejected, and the resolved
//! configuration serialises back to a file that reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceSpec, DEFAULT_GAMMA};
use crate::error::{Error, Result};
use crate::geometry::{PartitionLevels, Window};
use crate::predict::PredictiveRequest;
use crate::priors::{RGSpec, DEFAULT_ALPHA, DEFAULT_ETA, DEFAULT_NU, DEFAULT_RHO};
use crate::sampler::{DeltaChoice, ModelSpec, SamplerConfig};
use crate::spatiotemporal::{
    default_ngar1_a, InnovationSpec, StModelSpec, TemporalRates, DEFAULT_VARRHO2, DEFAULT_W, DEFAULT_XI2,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    Fit,
    FitSt,
    Predict,
    Diagnose,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Fit => "fit",
            Mode::FitSt => "fit-st",
            Mode::Predict => "predict",
            Mode::Diagnose => "diagnose",
        }
    }
}

fn default_window() -> Window {
    Window::square(10.0).expect("valid window")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_window")]
    pub window: Window,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub temporal: TemporalConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub input: InputConfig,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub levels: usize,
    pub tau2: f64,
    pub gamma: f64,
    pub grid_size: usize,
    pub neighbors: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 3,
            tau2: 1.0,
            gamma: DEFAULT_GAMMA,
            grid_size: 2500,
            neighbors: 16,
        }
    }
}

/// Repulsive gamma hyperparameters; `alpha` and `eta` take one value or
/// one per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub alpha: Vec<f64>,
    pub eta: Vec<f64>,
    pub rho: f64,
    pub nu: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            alpha: vec![DEFAULT_ALPHA],
            eta: vec![DEFAULT_ETA],
            rho: DEFAULT_RHO,
            nu: DEFAULT_NU,
            upper: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub squares: usize,
    pub tune_squares: bool,
    /// Fixed δ; when absent δ is chosen from `target_aux`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub target_aux: f64,
    pub varsigma: f64,
    pub rate_step: f64,
    pub level_width: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapt_until: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_order: Option<bool>,
    pub log_walk: bool,
    pub snapshot_every: usize,
    pub audit: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        let DeltaChoice::Auto { target } = d.delta else {
            unreachable!("default δ is automatic")
        };
        SamplerSection {
            iterations: d.iterations,
            burn_in: d.burn_in,
            thin: d.thin,
            squares: d.squares,
            tune_squares: d.tune_squares,
            delta: None,
            target_aux: target,
            varsigma: d.varsigma,
            rate_step: d.rate_step,
            level_width: d.level_width,
            adapt_until: d.adapt_until,
            fixed_order: d.fixed_order,
            log_walk: d.log_walk,
            snapshot_every: d.snapshot_every,
            audit: d.audit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateCoupling {
    Ngar1,
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalConfig {
    /// Last time index `T`; the largest time in the data when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u32>,
    pub xi2: f64,
    /// Innovation range; `max(0.5, τ²)` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub varrho2: Option<f64>,
    pub rates: RateCoupling,
    pub w: Vec<f64>,
    /// NGAR1 precisions; `(5, 15, 30)` for three levels when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<f64>>,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig {
            horizon: None,
            xi2: DEFAULT_XI2,
            varrho2: None,
            rates: RateCoupling::Ngar1,
            w: vec![DEFAULT_W],
            a: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// True rates, one per level.
    pub rates: Vec<f64>,
    /// True thresholds; the initial thresholds for the level count when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<f64>>,
    /// Number of times after time 0; rates evolve by NGAR1 when positive.
    pub times: u32,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            rates: vec![1.0, 4.0, 12.0],
            levels: None,
            times: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Window of the raw coordinates, mapped affinely onto `window`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_window: Option<Window>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    /// Output directory of the fit to predict from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
    pub request: PredictiveRequest,
    /// Time slice to predict at; the last one when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time: Option<usize>,
    /// Truth for the expected quadratic error.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
    /// Write the replicate or future patterns as well as their counts.
    pub write_patterns: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            run_dir: None,
            request: PredictiveRequest::IntegratedIntensity { region: None },
            time: None,
            reference: None,
            write_patterns: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
    pub mc_area_points: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            run_dir: None,
            mc_area_points: crate::diagnostics::DEFAULT_DIC_SITES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Points per side of the lattice used for intensity summaries.
    pub grid_resolution: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            grid_resolution: 50,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The resolved configuration, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Check everything that can be checked before any computation.
    pub fn validate(&self) -> Result<()> {
        let k = self.model.levels;
        self.model_spec()?;
        self.sampler_config().validate()?;
        match self.mode {
            Mode::Simulate => {
                if self.simulate.rates.len() != k {
                    return Err(Error::param("rates", format!("simulate.rates needs {k} values")));
                }
                self.true_levels()?;
                if self.simulate.times > 0 {
                    self.st_model_spec()?;
                }
            }
            Mode::Fit => self.require_input()?,
            Mode::FitSt => {
                self.require_input()?;
                self.st_model_spec()?;
            }
            Mode::Predict => {
                if self.predict.run_dir.is_none() {
                    return Err(Error::Config("predict.run_dir is required".into()));
                }
                if let PredictiveRequest::Future { horizons } = self.predict.request {
                    if horizons < 1 {
                        return Err(Error::param("horizons", "need at least one step ahead"));
                    }
                }
            }
            Mode::Diagnose => {
                if self.diagnose.run_dir.is_none() {
                    return Err(Error::Config("diagnose.run_dir is required".into()));
                }
                if self.diagnose.mc_area_points < crate::diagnostics::MIN_DIC_SITES {
                    return Err(Error::param("mc_area_points", "need at least 1000 sites"));
                }
            }
        }
        if self.output.grid_resolution < 2 {
            return Err(Error::param("grid_resolution", "need at least 2 points per side"));
        }
        Ok(())
    }

    fn require_input(&self) -> Result<()> {
        if self.input.path.is_none() {
            return Err(Error::Config(format!("input.path is required in {} mode", self.mode.name())));
        }
        Ok(())
    }

    pub fn rg_spec(&self) -> Result<RGSpec> {
        let p = &self.prior;
        RGSpec::broadcast(self.model.levels, &p.alpha, &p.eta, p.rho, p.nu, p.upper)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        if m.levels == 0 {
            return Err(Error::param("levels", "need at least one level"));
        }
        if m.grid_size < 4 || m.neighbors == 0 {
            return Err(Error::param("grid_size", "need at least 4 lattice sites and 1 neighbour"));
        }
        Ok(ModelSpec {
            levels: m.levels,
            covariance: CovarianceSpec::unit(m.tau2, m.gamma)?,
            grid_size: m.grid_size,
            neighbors: m.neighbors,
            prior: self.rg_spec()?,
        })
    }

    pub fn st_model_spec(&self) -> Result<StModelSpec> {
        let spatial = self.model_spec()?;
        let k = spatial.levels;
        let t = &self.temporal;
        let innovation = InnovationSpec {
            xi2: t.xi2,
            varrho2: t.varrho2.unwrap_or(DEFAULT_VARRHO2.max(spatial.covariance.tau2())),
        };
        innovation.validate(&spatial.covariance)?;
        let rates = match t.rates {
            RateCoupling::Independent => TemporalRates::Independent,
            RateCoupling::Ngar1 => {
                let w = broadcast(&t.w, k, "w")?;
                let a = match &t.a {
                    Some(a) => broadcast(a, k, "a")?,
                    None => default_ngar1_a(k),
                };
                crate::priors::NGAR1Spec::new(w.clone(), a.clone(), spatial.prior.clone())?;
                TemporalRates::Ngar1 { w, a }
            }
        };
        Ok(StModelSpec {
            spatial,
            innovation,
            rates,
        })
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            iterations: s.iterations,
            burn_in: s.burn_in,
            thin: s.thin,
            squares: s.squares,
            tune_squares: s.tune_squares,
            delta: match s.delta {
                Some(d) => DeltaChoice::Fixed(d),
                None => DeltaChoice::Auto { target: s.target_aux },
            },
            varsigma: s.varsigma,
            rate_step: s.rate_step,
            level_width: s.level_width,
            adapt_until: s.adapt_until,
            seed: self.seed,
            fixed_order: s.fixed_order,
            log_walk: s.log_walk,
            snapshot_every: s.snapshot_every,
            audit: s.audit,
        }
    }

    pub fn true_levels(&self) -> Result<PartitionLevels> {
        match &self.simulate.levels {
            Some(c) => {
                let lv = PartitionLevels::new(c.clone())?;
                if lv.num_regions() != self.model.levels {
                    return Err(Error::param("levels", "simulate.levels must have K − 1 thresholds"));
                }
                Ok(lv)
            }
            None => PartitionLevels::initial(self.model.levels),
        }
    }
}

fn broadcast(v: &[f64], k: usize, name: &'static str) -> Result<Vec<f64>> {
    match v.len() {
        1 => Ok(vec![v[0]; k]),
        n if n == k => Ok(v.to_vec()),
        n => Err(Error::param(name, format!("expected 1 or {k} values, got {n}"))),
    }
}
