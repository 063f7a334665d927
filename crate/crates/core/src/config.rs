//! Experiment configuration.
//!
//! A config file is TOML with one table per pipeline stage. It is layered over
//! a built-in profile, so a file only needs the keys it changes; unknown keys
//! anywhere are an error.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{IcProtocol, WelchConfig, DEFAULT_K0};
use crate::enkf::FilterConfig;
use crate::error::{Error, Result};
use crate::hybrid::HybridConfig;
use crate::interp::Scheme;
use crate::l96::{ModelParams, DEFAULT_SPINUP};
use crate::net::Architecture;
use crate::obs::density_to_count;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Reference,
    Ci,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Self::Reference),
            "ci" => Ok(Self::Ci),
            other => Err(Error::Config(format!("unknown profile {other:?} (reference, ci)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Reference => "reference",
            Self::Ci => "ci",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub m: usize,
    pub forcing: f64,
    pub h: f64,
    /// Number of observed steps K.
    pub steps: usize,
    pub spinup: usize,
}

impl ModelSection {
    pub fn params(&self) -> ModelParams {
        ModelParams {
            m: self.m,
            forcing: self.forcing,
            h: self.h,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSection {
    /// Observations per step. Exactly one of `count` and `density` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Fraction of the grid observed per step, rounded to a count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    pub sigma_obs: f64,
    pub seed: u64,
    pub scheme: Scheme,
}

impl ObservationSection {
    pub fn count(&self, m: usize) -> Result<usize> {
        match (self.count, self.density) {
            (Some(p), None) => Ok(p),
            (None, Some(d)) => density_to_count(d, m),
            _ => Err(Error::Config(
                "observations: set exactly one of `count` and `density`".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub k0: usize,
    pub forecast_ics: IcProtocol,
    pub max_lead: usize,
    pub lyapunov_steps: usize,
    pub lyapunov_transient: usize,
    /// Exponents computed for each spectrum.
    pub lyapunov_exponents: usize,
    /// Exponents compared by the Lyapunov RMSE.
    pub lyapunov_compare: usize,
    /// Length of the free runs used for the grand mean and the PSD.
    pub free_run_steps: usize,
    pub psd: WelchConfig,
    pub psd_component: usize,
    pub hovmoller_steps: usize,
    /// Model noise for the true-model EnKF-N baseline.
    pub true_model_sigma_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub observations: ObservationSection,
    pub filter: FilterConfig,
    pub network: Architecture,
    pub hybrid: HybridConfig,
    pub evaluation: EvaluationSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        let mut cfg = Self {
            model: ModelSection {
                m: 40,
                forcing: 8.0,
                h: 0.05,
                steps: 40_000,
                spinup: DEFAULT_SPINUP,
            },
            observations: ObservationSection {
                count: None,
                density: Some(0.5),
                sigma_obs: 1.0,
                seed: 1,
                scheme: Scheme::default(),
            },
            filter: FilterConfig {
                seed: 2,
                ..FilterConfig::default()
            },
            network: Architecture::reference(),
            hybrid: HybridConfig {
                seed: 3,
                ..HybridConfig::default()
            },
            evaluation: EvaluationSection {
                k0: DEFAULT_K0,
                forecast_ics: IcProtocol {
                    seed: 4,
                    ..IcProtocol::default()
                },
                max_lead: 200,
                lyapunov_steps: 100_000,
                lyapunov_transient: 1_000,
                lyapunov_exponents: 40,
                lyapunov_compare: 12,
                free_run_steps: 16_000,
                psd: WelchConfig::default(),
                psd_component: 0,
                hovmoller_steps: 200,
                true_model_sigma_m: 0.0,
            },
            output: OutputSection {
                dir: PathBuf::from("runs/reference"),
            },
        };
        if profile == Profile::Ci {
            cfg.model.steps = 4_000;
            cfg.hybrid.cycles = 10;
            cfg.hybrid.epochs_per_cycle = 5;
            cfg.evaluation.lyapunov_steps = 20_000;
            cfg.output.dir = PathBuf::from("runs/ci");
        }
        cfg.sync();
        cfg
    }

    /// Profile defaults overlaid with `text`.
    pub fn from_toml(profile: Profile, text: &str) -> Result<Self> {
        let overlay: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let base = toml::Table::try_from(Self::profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, overlay);
        let mut cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(profile: Profile, path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(profile, &text)
            }
            None => Ok(Self::profile(profile)),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    /// Copies the shared filter table into the hybrid settings.
    fn sync(&mut self) {
        self.hybrid.filter = self.filter;
    }

    /// Replaces every section seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.observations.seed = seed;
        self.filter.seed = seed;
        self.hybrid.seed = seed;
        self.evaluation.forecast_ics.seed = seed;
        self.sync();
    }

    pub fn set_axis(&mut self, axis: SweepAxis, value: f64) -> Result<()> {
        match axis {
            SweepAxis::SigmaObs => self.observations.sigma_obs = value,
            SweepAxis::Density => {
                self.observations.count = None;
                self.observations.density = Some(value);
            }
            SweepAxis::Steps => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::Config(format!("K={value} must be a positive integer")));
                }
                self.model.steps = value as usize;
            }
            SweepAxis::SigmaM => self.filter.sigma_m = value,
        }
        self.sync();
        self.validate()
    }

    pub fn obs_count(&self) -> Result<usize> {
        self.observations.count(self.model.m)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.model.params().validate()?;
        let p = self.obs_count()?;
        if p == 0 || p > self.model.m {
            return bad(format!("observations per step {p} must lie in 1..={}", self.model.m));
        }
        if self.hybrid.bypass_da && p != self.model.m {
            return bad(format!("bypass_da needs all {} points observed, got {p}", self.model.m));
        }
        if !(self.observations.sigma_obs >= 0.0 && self.observations.sigma_obs.is_finite()) {
            return bad(format!("sigma_obs={} must be >= 0", self.observations.sigma_obs));
        }
        self.filter.validate()?;
        self.network.validate()?;
        self.hybrid.validate()?;
        let e = &self.evaluation;
        if self.model.steps <= e.k0 {
            return bad(format!("K={} must exceed k0={}", self.model.steps, e.k0));
        }
        if e.forecast_ics.count == 0 || e.forecast_ics.spacing == 0 || e.max_lead == 0 {
            return bad("forecast IC count, spacing and max_lead must be positive".into());
        }
        if e.lyapunov_exponents == 0 || e.lyapunov_exponents > self.model.m {
            return bad(format!("lyapunov_exponents must lie in 1..={}", self.model.m));
        }
        if e.lyapunov_compare > e.lyapunov_exponents || e.lyapunov_steps == 0 {
            return bad("lyapunov_compare exceeds lyapunov_exponents or no Lyapunov steps".into());
        }
        if e.free_run_steps < e.psd.seg_len || e.psd_component >= self.model.m {
            return bad("free run shorter than a PSD segment or PSD component out of range".into());
        }
        if !(e.true_model_sigma_m >= 0.0 && e.true_model_sigma_m.is_finite()) {
            return bad("true_model_sigma_m must be >= 0".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical config with the output directory removed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(mut base: toml::Table, overlay: toml::Table) -> toml::Table {
    for (key, value) in overlay {
        // `count` and `density` are alternatives: setting one drops the other
        if key == "observations" {
            if let (Some(toml::Value::Table(b)), toml::Value::Table(o)) = (base.get_mut(&key), &value) {
                if o.contains_key("count") {
                    b.remove("density");
                }
                if o.contains_key("density") {
                    b.remove("count");
                }
            }
        }
        match (base.remove(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(key, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
    base
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SigmaObs,
    Density,
    #[serde(rename = "K")]
    Steps,
    SigmaM,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::SigmaObs => "sigma_obs",
            Self::Density => "density",
            Self::Steps => "K",
            Self::SigmaM => "sigma_m",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma_obs" => Ok(Self::SigmaObs),
            "density" => Ok(Self::Density),
            "K" | "k" | "steps" => Ok(Self::Steps),
            "sigma_m" => Ok(Self::SigmaM),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (sigma_obs, density, K, sigma_m)"
            ))),
        }
    }
}
