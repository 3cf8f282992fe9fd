//! Continuous-to-discrete conversion of the neuronal dynamics `ẋ = Ax + w`
//! under white or first-order autoregressive fluctuations.
//!
//! Every covariance integral is evaluated exactly with Van Loan's augmented
//! exponential. For autoregressive noise the joint state is stacked as
//! `[w; x]`, and the white innovation `v` enters the `w` block:
//! `Σ = blkdiag(δ I, 0)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::linalg::expm;
use crate::linalg::{require_square, van_loan};

/// Statistical model of the endogenous fluctuations `w(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    /// White noise with intensity `sigma · I`.
    White { sigma: f64 },
    /// `ẇ = λ w + v`, shared rate for every region.
    Ar { lambda: f64, delta: f64 },
    /// `ẇ = diag(λ) w + v`, one rate per region.
    Var { lambdas: Vec<f64>, delta: f64 },
}

impl NoiseModel {
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            NoiseModel::White { sigma } => {
                if !(*sigma > 0.0) || !sigma.is_finite() {
                    return Err(Error::Argument(format!("white intensity must be positive, got {sigma}")));
                }
            }
            NoiseModel::Ar { lambda, delta } => {
                check_rate(*lambda)?;
                check_intensity(*delta)?;
            }
            NoiseModel::Var { lambdas, delta } => {
                if lambdas.len() != n {
                    return Err(Error::Shape(format!("{} rates for {n} regions", lambdas.len())));
                }
                lambdas.iter().try_for_each(|l| check_rate(*l))?;
                check_intensity(*delta)?;
            }
        }
        Ok(())
    }

    pub fn is_white(&self) -> bool {
        matches!(self, NoiseModel::White { .. })
    }

    /// Noise intensity: `sigma` for white noise, `delta` otherwise.
    pub fn intensity(&self) -> f64 {
        match self {
            NoiseModel::White { sigma } => *sigma,
            NoiseModel::Ar { delta, .. } | NoiseModel::Var { delta, .. } => *delta,
        }
    }

    pub fn with_intensity(&self, value: f64) -> NoiseModel {
        let mut out = self.clone();
        match &mut out {
            NoiseModel::White { sigma } => *sigma = value,
            NoiseModel::Ar { delta, .. } | NoiseModel::Var { delta, .. } => *delta = value,
        }
        out
    }

    /// Diagonal of `Λ` for `n` regions (empty for white noise).
    pub fn rates(&self, n: usize) -> Vec<f64> {
        match self {
            NoiseModel::White { .. } => Vec::new(),
            NoiseModel::Ar { lambda, .. } => vec![*lambda; n],
            NoiseModel::Var { lambdas, .. } => lambdas.clone(),
        }
    }
}

fn check_rate(l: f64) -> Result<()> {
    if !(l < 0.0) || !l.is_finite() {
        return Err(Error::Argument(format!("autoregressive rate must be negative, got {l}")));
    }
    Ok(())
}

fn check_intensity(d: f64) -> Result<()> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::Argument(format!("noise intensity must be positive, got {d}")));
    }
    Ok(())
}

fn check_interval(t_r: f64) -> Result<()> {
    if !(t_r > 0.0) || !t_r.is_finite() {
        return Err(Error::Argument(format!("sampling interval must be positive, got {t_r}")));
    }
    Ok(())
}

/// `x(k+1) = Ad x(k) + w_d(k)` with `Var{w_d} = qw`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedDynamics {
    pub ad: DMatrix<f64>,
    pub qw: DMatrix<f64>,
    pub t_r: f64,
}

/// Sampled joint `[w; x]` dynamics: transition `md`, innovation covariance `q_eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDiscretized {
    pub md: DMatrix<f64>,
    pub q_eta: DMatrix<f64>,
    pub t_r: f64,
}

/// Continuous-time generator and noise intensity of the dynamic block:
/// `(A, σI)` for white noise, `([[Λ, 0], [I, A]], blkdiag(δI, 0))` otherwise.
pub fn continuous_generator(a: &DMatrix<f64>, noise: &NoiseModel) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = require_square(a, "connectivity")?;
    noise.validate(n)?;
    match noise {
        NoiseModel::White { sigma } => Ok((a.clone(), DMatrix::identity(n, n) * *sigma)),
        _ => {
            let rates = noise.rates(n);
            let mut m = DMatrix::zeros(2 * n, 2 * n);
            m.view_mut((0, 0), (n, n))
                .copy_from(&DMatrix::from_diagonal(&DVector::from_vec(rates)));
            m.view_mut((n, 0), (n, n)).fill_with_identity();
            m.view_mut((n, n), (n, n)).copy_from(a);
            let mut sigma = DMatrix::zeros(2 * n, 2 * n);
            sigma
                .view_mut((0, 0), (n, n))
                .fill_diagonal(noise.intensity());
            Ok((m, sigma))
        }
    }
}

/// Exact sampling of `ẋ = Ax + w` with white `w` of intensity `sigma`.
pub fn discretize_white(a: &DMatrix<f64>, sigma: f64, t_r: f64) -> Result<DiscretizedDynamics> {
    check_interval(t_r)?;
    let (m, s) = continuous_generator(a, &NoiseModel::White { sigma })?;
    let (ad, qw) = van_loan(&m, &s, t_r)?;
    Ok(DiscretizedDynamics { ad, qw, t_r })
}

/// Exact sampling of the joint `[w; x]` model for AR or VAR fluctuations.
pub fn build_joint(a: &DMatrix<f64>, noise: &NoiseModel, t_r: f64) -> Result<JointDiscretized> {
    check_interval(t_r)?;
    if noise.is_white() {
        return Err(Error::Argument("joint model needs autoregressive noise".into()));
    }
    let (m, s) = continuous_generator(a, noise)?;
    let (md, q_eta) = van_loan(&m, &s, t_r)?;
    Ok(JointDiscretized { md, q_eta, t_r })
}

/// Discrete AR(1) description of `w_d(k)` for `Λ = λI`: returns
/// `(Δ, Q_v) = (e^{λ T_R} I, σ (e^{2λT_R} − 1)/(2λ) · ∫₀^{T_R} e^{Aτ} e^{Aᵀτ} dτ)`.
pub fn dt_ar_equivalent(
    a: &DMatrix<f64>,
    lambda: f64,
    sigma: f64,
    t_r: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_rate(lambda)?;
    let n = require_square(a, "connectivity")?;
    let unit = discretize_white(a, 1.0, t_r)?;
    let factor = sigma * (2.0 * lambda * t_r).exp_m1() / (2.0 * lambda);
    let delta = DMatrix::identity(n, n) * (lambda * t_r).exp();
    Ok((delta, unit.qw * factor))
}
