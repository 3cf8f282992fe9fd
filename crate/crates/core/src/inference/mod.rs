//! EM-based MAP estimation of connectivity, fluctuation, hemodynamic and
//! measurement parameters, with sparse Bayesian learning on `A`.

mod em;
mod init;
mod kalman;
mod mstep;
mod sbl;
mod smoother;
mod stats;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::NoiseModel;
use crate::error::{Error, Result};
use crate::hemo::{FirPrior, HemoFir};
use crate::ssm::{assemble_model, LinearSSM};

pub use em::{estimate, EstimationConfig, EstimationResult, IterationRecord, SCREEN_ITER};
pub use init::{ar_innovation_variance, deconvolve, initialize, initialize_with_rate, INITIAL_RATE, INITIAL_RATES};
pub use kalman::{kalman_filter, FilterOutput, InitialState};
pub use mstep::{
    dynamic_objective, linearized_regression, m_step, regression_noise, update_eps, update_fir, update_intensity,
    update_rates, LinearizedRegression, MStepOutput, RATE_BOUNDS,
};
pub use sbl::{sbl_fixed_point, sbl_update, sbl_update_gram, SblState, PRUNE_THRESHOLD};
pub use smoother::{rts_smoother, SmoothedMoments};
pub use stats::{em_statistics, log_prior, measurement_term, q_lower_bound, EMStats};

/// Assumption on the endogenous fluctuations used by the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "w")]
    White,
    #[serde(rename = "ar")]
    Ar,
    #[serde(rename = "var")]
    Var,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::White, ModelKind::Ar, ModelKind::Var];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::White => "w",
            ModelKind::Ar => "ar",
            ModelKind::Var => "var",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "w" | "white" => Ok(ModelKind::White),
            "ar" => Ok(ModelKind::Ar),
            "var" => Ok(ModelKind::Var),
            other => Err(Error::Argument(format!("unknown model kind '{other}' (expected w, ar or var)"))),
        }
    }
}

/// Full parameter set `θ = {A, noise, h, ε}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    #[serde(with = "crate::serde_util::rows")]
    pub a: DMatrix<f64>,
    pub noise: NoiseModel,
    pub h: Vec<HemoFir>,
    pub eps: f64,
}

impl Theta {
    pub fn regions(&self) -> usize {
        self.a.nrows()
    }

    pub fn kind(&self) -> ModelKind {
        match self.noise {
            NoiseModel::White { .. } => ModelKind::White,
            NoiseModel::Ar { .. } => ModelKind::Ar,
            NoiseModel::Var { .. } => ModelKind::Var,
        }
    }

    pub fn assemble(&self, t_r: f64) -> Result<LinearSSM> {
        assemble_model(&self.a, &self.noise, &self.h, t_r, self.eps)
    }
}

/// Priors entering the M-step: the hemodynamic FIR prior and the current
/// sparse-Bayesian-learning hyperparameters on `vec(Aᵀ)`.
#[derive(Debug, Clone, Copy)]
pub struct Priors<'a> {
    pub fir: &'a FirPrior,
    pub sbl: &'a SblState,
}
