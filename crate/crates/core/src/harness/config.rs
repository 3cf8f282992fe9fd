use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hemo::HemoPriorConfig;
use crate::inference::{EstimationConfig, ModelKind, INITIAL_RATES, SCREEN_ITER};
use crate::metrics::reference_connectivity;

pub const SCHEMA_VERSION: u32 = 1;

/// Endogenous fluctuations used to generate synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GenerationNoise {
    White,
    /// First-order autoregressive fluctuations. Unless `rates` is given, the
    /// rates are drawn per run from `U(lambda_min, lambda_max)`, independently
    /// per region or shared by all regions.
    Var {
        #[serde(default = "default_lambda_min")]
        lambda_min: f64,
        #[serde(default)]
        lambda_max: f64,
        #[serde(default)]
        shared: bool,
        #[serde(default)]
        rates: Option<Vec<f64>>,
    },
}

fn default_lambda_min() -> f64 {
    -1.0
}

impl GenerationNoise {
    pub fn var_uniform() -> Self {
        GenerationNoise::Var {
            lambda_min: -1.0,
            lambda_max: 0.0,
            shared: false,
            rates: None,
        }
    }
}

/// Estimator settings shared by every cell of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// FIR length `s`.
    pub s: usize,
    /// Balloon draws used to build the FIR prior.
    pub fir_samples: usize,
    pub sbl_cycles: usize,
    /// Starting fluctuation rates screened for AR and VAR fits.
    pub initial_rates: Vec<f64>,
    /// Iterations each start runs before the best one is continued.
    pub screen_iter: usize,
}

impl Default for EmSettings {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_iter: 200,
            s: 16,
            fir_samples: 1000,
            sbl_cycles: 100,
            initial_rates: INITIAL_RATES.to_vec(),
            screen_iter: SCREEN_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema: u32,
    /// Ground-truth connectivity; the 7-region reference matrix when absent.
    #[serde(with = "crate::serde_util::opt_rows")]
    pub a_true: Option<DMatrix<f64>>,
    pub noise_gen: GenerationNoise,
    /// Stationary standard deviation of the simulated neuronal states; sets
    /// the generating noise intensity.
    pub neural_std: f64,
    pub sim_dt: f64,
    #[serde(rename = "T_R")]
    pub t_r: f64,
    #[serde(rename = "N")]
    pub n_samples: usize,
    /// Discarded simulation time before recording (s).
    pub burn_in: f64,
    /// Noise-free BOLD variance over measurement-noise variance, per region.
    pub snr: f64,
    pub runs: usize,
    pub assumptions: Vec<ModelKind>,
    pub seed: u64,
    pub em: EmSettings,
    pub hemo: HemoPriorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            a_true: None,
            noise_gen: GenerationNoise::White,
            neural_std: 0.05,
            sim_dt: 0.05,
            t_r: 2.0,
            n_samples: 300,
            burn_in: 100.0,
            snr: 10.0,
            runs: 50,
            assumptions: ModelKind::ALL.to_vec(),
            seed: 0,
            em: EmSettings::default(),
            hemo: HemoPriorConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn connectivity(&self) -> DMatrix<f64> {
        self.a_true.clone().unwrap_or_else(reference_connectivity)
    }

    pub fn estimation_config(&self, kind: ModelKind) -> EstimationConfig {
        EstimationConfig {
            kind,
            t_r: self.t_r,
            tol: self.em.tol,
            max_iter: self.em.max_iter,
            freeze_gamma: false,
            sbl_cycles: self.em.sbl_cycles,
            initial_rates: self.em.initial_rates.clone(),
            screen_iter: self.em.screen_iter,
        }
    }

    /// Fine simulation steps per scan.
    pub fn decimation(&self) -> Result<usize> {
        let ratio = self.t_r / self.sim_dt;
        let rounded = ratio.round();
        if !(self.sim_dt > 0.0) || rounded < 1.0 || (ratio - rounded).abs() > 1e-9 * ratio {
            return Err(Error::Config(format!(
                "sim_dt = {} does not divide T_R = {}",
                self.sim_dt, self.t_r
            )));
        }
        Ok(rounded as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema {}", self.schema)));
        }
        self.decimation()?;
        if !(self.snr > 0.0) {
            return Err(Error::Config(format!("snr must be positive, got {}", self.snr)));
        }
        if !(self.neural_std > 0.0) || !self.neural_std.is_finite() {
            return Err(Error::Config("neural_std must be positive".into()));
        }
        if !(self.burn_in >= 0.0) {
            return Err(Error::Config("burn_in must be non-negative".into()));
        }
        if self.runs == 0 || self.assumptions.is_empty() {
            return Err(Error::Config("need at least one run and one assumption".into()));
        }
        if self.n_samples < 2 {
            return Err(Error::Config("N must be at least 2".into()));
        }
        let a = self.connectivity();
        if a.nrows() != a.ncols() || a.nrows() < 2 {
            return Err(Error::Config("a_true must be square with at least two regions".into()));
        }
        if let GenerationNoise::Var { lambda_min, lambda_max, rates, .. } = &self.noise_gen {
            match rates {
                Some(r) => {
                    if r.len() != a.nrows() || r.iter().any(|l| !(*l < 0.0)) {
                        return Err(Error::Config("rates must be negative, one per region".into()));
                    }
                }
                None => {
                    if !(lambda_min < lambda_max) || *lambda_max > 0.0 {
                        return Err(Error::Config("rate range must satisfy lambda_min < lambda_max <= 0".into()));
                    }
                }
            }
        }
        if self.em.s == 0 || self.em.fir_samples < 2 || self.em.max_iter == 0 || self.em.sbl_cycles == 0 || !(self.em.tol > 0.0)
            || self.em.initial_rates.is_empty()
            || self.em.initial_rates.iter().any(|r| !(*r < 0.0))
        {
            return Err(Error::Config("invalid estimator settings".into()));
        }
        Ok(())
    }
}
