use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::init::{initialize_with_rate, INITIAL_RATES};
use super::kalman::{kalman_filter, InitialState};
use super::mstep::{layout_for, linearized_regression, m_step, regression_noise};
use super::sbl::{sbl_fixed_point, SblState};
use super::smoother::{rts_smoother, SmoothedMoments};
use super::stats::{em_statistics, log_prior, q_lower_bound};
use super::{ModelKind, Priors, Theta};
use crate::dynamics::NoiseModel;
use crate::error::{Error, Result};
use crate::hemo::{FirPrior, HemoFir};
use crate::ssm::{stationary_covariance, LinearSSM};

/// Prior covariance of the initial state when the starting model is unstable.
const FALLBACK_INITIAL_VARIANCE: f64 = 10.0;
/// Default screening length when several initial rates are tried.
pub const SCREEN_ITER: usize = 20;
/// Shortest series accepted by [`estimate`].
pub const MIN_SAMPLES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationConfig {
    pub kind: ModelKind,
    pub t_r: f64,
    /// Stop once `‖A⁽ˡ⁾ − A⁽ˡ⁻¹⁾‖_F / ‖A⁽ˡ⁾‖_F` drops below this value.
    pub tol: f64,
    pub max_iter: usize,
    /// Keep `Γ` at its initial value (no hyperparameter reweighting).
    pub freeze_gamma: bool,
    /// Reweighting rounds per iteration; see [`sbl_fixed_point`].
    pub sbl_cycles: usize,
    /// Starting fluctuation rates tried for AR and VAR models.
    pub initial_rates: Vec<f64>,
    /// Iterations each start runs before the best one is kept.
    pub screen_iter: usize,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::White,
            t_r: 2.0,
            tol: 1e-3,
            max_iter: 200,
            freeze_gamma: false,
            sbl_cycles: 100,
            initial_rates: INITIAL_RATES.to_vec(),
            screen_iter: SCREEN_ITER,
        }
    }
}

/// Diagnostics of one EM iteration `θ⁽ˡ⁾ → θ⁽ˡ⁺¹⁾`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// `ln p(Y | θ⁽ˡ⁾)`.
    pub log_likelihood: f64,
    /// `ln p(θ⁽ˡ⁾)` under `Γ⁽ˡ⁾`.
    pub log_prior: f64,
    /// `𝒬(θ⁽ˡ⁾, θ⁽ˡ⁾) + ln p(θ⁽ˡ⁾)`.
    pub bound_before: f64,
    /// `𝒬(θ⁽ˡ⁺¹⁾, θ⁽ˡ⁾) + ln p(θ⁽ˡ⁺¹⁾)`, both under `Γ⁽ˡ⁾`.
    pub bound_after: f64,
    pub relative_change: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationResult {
    pub kind: ModelKind,
    pub t_r: f64,
    #[serde(with = "crate::serde_util::rows")]
    pub a_hat: DMatrix<f64>,
    pub noise_hat: NoiseModel,
    pub h_hat: Vec<HemoFir>,
    pub eps_hat: f64,
    pub gamma: SblState,
    pub iterations: usize,
    /// Log posterior `ln p(Y | θ⁽ˡ⁾) + ln p(θ⁽ˡ⁾)` for `l = 0..=iterations`.
    pub objective_trace: Vec<f64>,
    pub history: Vec<IterationRecord>,
    pub warnings: Vec<String>,
    /// Smoothed moments under the final estimate (not serialized).
    #[serde(skip)]
    pub smoothed: SmoothedMoments,
}

impl EstimationResult {
    pub fn theta(&self) -> Theta {
        Theta {
            a: self.a_hat.clone(),
            noise: self.noise_hat.clone(),
            h: self.h_hat.clone(),
            eps: self.eps_hat,
        }
    }

    pub fn ssm(&self) -> Result<LinearSSM> {
        self.theta().assemble(self.t_r)
    }

    /// Entries of `Â` treated as zero: pruned, or below `zero_tol` in magnitude.
    pub fn zero_mask(&self, zero_tol: f64) -> DMatrix<bool> {
        let n = self.a_hat.nrows();
        DMatrix::from_fn(n, n, |i, j| self.gamma.pruned[i * n + j] || self.a_hat[(i, j)].abs() < zero_tol)
    }
}

fn row_major(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.transpose().as_slice())
}

fn relative_change(new: &DMatrix<f64>, old: &DMatrix<f64>) -> f64 {
    let diff = (new - old).norm();
    let scale = new.norm();
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        diff / scale
    }
}

/// Fixed prior of the state at time 0: the stationary covariance of the
/// starting model, or a broad isotropic prior if that model is unstable.
fn initial_state(ssm: &LinearSSM) -> InitialState {
    let cov = stationary_covariance(ssm)
        .unwrap_or_else(|_| DMatrix::identity(ssm.dim(), ssm.dim()) * FALLBACK_INITIAL_VARIANCE);
    InitialState::zero_mean(cov)
}

struct Estep {
    log_likelihood: f64,
    smoothed: SmoothedMoments,
    warnings: Vec<String>,
}

fn e_step(ssm: &LinearSSM, y: &DMatrix<f64>, init: &InitialState) -> Result<Estep> {
    let filt = kalman_filter(ssm, y, init)?;
    let mut smoothed = rts_smoother(ssm, &filt)?;
    let warnings = std::mem::take(&mut smoothed.warnings);
    Ok(Estep {
        log_likelihood: filt.log_likelihood,
        smoothed,
        warnings,
    })
}

/// One EM trajectory that can be advanced in steps.
struct Trajectory {
    theta: Theta,
    sbl: SblState,
    init: InitialState,
    trace: Vec<f64>,
    history: Vec<IterationRecord>,
    warnings: Vec<String>,
    converged: bool,
}

impl Trajectory {
    fn start(y: &DMatrix<f64>, fir_prior: &FirPrior, cfg: &EstimationConfig, rate: f64) -> Result<Self> {
        let (theta, sbl) = initialize_with_rate(y, fir_prior, cfg.kind, rate)?;
        let init = initial_state(&theta.assemble(cfg.t_r)?);
        Ok(Self {
            theta,
            sbl,
            init,
            trace: Vec::new(),
            history: Vec::new(),
            warnings: Vec::new(),
            converged: false,
        })
    }

    fn fail(&self, e: Error) -> Error {
        Error::Estimation {
            iterations: self.history.len(),
            reason: e.to_string(),
            trace: self.trace.clone(),
        }
    }

    /// Runs EM until convergence or until `limit` iterations in total.
    fn advance(&mut self, y: &DMatrix<f64>, fir_prior: &FirPrior, cfg: &EstimationConfig, limit: usize) -> Result<()> {
        let t_r = cfg.t_r;
        let layout = layout_for(&self.theta).map_err(|e| self.fail(e))?;
        while !self.converged && self.history.len() < limit {
            let mut step = || -> Result<(Theta, SblState, IterationRecord)> {
                let priors = Priors { fir: fir_prior, sbl: &self.sbl };
                let ssm = self.theta.assemble(t_r)?;
                let e = e_step(&ssm, y, &self.init)?;
                self.warnings.extend(e.warnings);
                let lp = log_prior(&self.theta, priors)?;
                let objective = e.log_likelihood + lp;
                self.trace.push(objective);
                if !objective.is_finite() {
                    return Err(Error::Numerical("objective is not finite".into()));
                }
                let stats = em_statistics(&e.smoothed, y)?;
                let bound_before = q_lower_bound(&ssm, &stats)? + lp;
                let out = m_step(&stats, priors, &self.theta, t_r)?;
                self.warnings.extend(out.warnings);
                let mut next = out.theta;
                let bound_after = q_lower_bound(&next.assemble(t_r)?, &stats)? + log_prior(&next, priors)?;

                let mut next_sbl = self.sbl.clone();
                if !cfg.freeze_gamma {
                    let q = regression_noise(&next.a, &next.noise, t_r)?;
                    let reg = linearized_regression(&stats, &layout, &q, t_r)?;
                    next_sbl = sbl_fixed_point(&self.sbl, &reg.precision, &row_major(&next.a), cfg.sbl_cycles)?;
                    next_sbl.apply_mask(&mut next.a);
                }
                let record = IterationRecord {
                    log_likelihood: e.log_likelihood,
                    log_prior: lp,
                    bound_before,
                    bound_after,
                    relative_change: relative_change(&next.a, &self.theta.a),
                };
                Ok((next, next_sbl, record))
            };
            let (next, next_sbl, record) = step().map_err(|e| self.fail(e))?;
            self.converged = record.relative_change < cfg.tol;
            self.theta = next;
            self.sbl = next_sbl;
            self.history.push(record);
        }
        Ok(())
    }

    /// Log posterior at the latest evaluated iterate.
    fn score(&self) -> f64 {
        self.trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// EM / sparse Bayesian learning estimation of all parameters from `Y`
/// (`N × n`, rows are scans).
///
/// AR and VAR fits start once per entry of `initial_rates`. Every start runs
/// `screen_iter` iterations and only the one with the highest log posterior
/// is continued.
pub fn estimate(y: &DMatrix<f64>, fir_prior: &FirPrior, cfg: &EstimationConfig) -> Result<EstimationResult> {
    if y.nrows() < MIN_SAMPLES {
        return Err(Error::Data(format!("{} samples, at least {MIN_SAMPLES} required", y.nrows())));
    }
    if !(cfg.t_r > 0.0) || (fir_prior.t_r - cfg.t_r).abs() > 1e-9 * cfg.t_r {
        return Err(Error::Config(format!(
            "sampling interval {} does not match the FIR prior ({})",
            cfg.t_r, fir_prior.t_r
        )));
    }
    if !(cfg.tol > 0.0) || cfg.max_iter == 0 || cfg.sbl_cycles == 0 {
        return Err(Error::Config("tolerance must be positive, max_iter and sbl_cycles at least 1".into()));
    }
    if cfg.initial_rates.is_empty() {
        return Err(Error::Config("at least one initial rate is required".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("observations must be finite".into()));
    }
    let t_r = cfg.t_r;
    let rates: &[f64] = match cfg.kind {
        ModelKind::White => &cfg.initial_rates[..1],
        _ => &cfg.initial_rates,
    };

    let mut best: Option<Trajectory> = None;
    let mut first_error = None;
    for &rate in rates {
        let mut run = Trajectory::start(y, fir_prior, cfg, rate)?;
        let limit = if rates.len() > 1 { cfg.screen_iter.min(cfg.max_iter) } else { cfg.max_iter };
        match run.advance(y, fir_prior, cfg, limit) {
            Ok(()) => {
                if best.as_ref().is_none_or(|b| run.score() > b.score()) {
                    best = Some(run);
                }
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    let Some(mut run) = best else {
        return Err(first_error.expect("every start failed"));
    };
    run.advance(y, fir_prior, cfg, cfg.max_iter)?;
    let Trajectory {
        theta,
        sbl,
        init,
        mut trace,
        history,
        mut warnings,
        ..
    } = run;
    let fail = |iterations: usize, trace: &[f64], e: Error| Error::Estimation {
        iterations,
        reason: e.to_string(),
        trace: trace.to_vec(),
    };

    let iterations = history.len();
    let final_pass = || -> Result<(f64, Estep)> {
        let e = e_step(&theta.assemble(t_r)?, y, &init)?;
        let lp = log_prior(&theta, Priors { fir: fir_prior, sbl: &sbl })?;
        Ok((e.log_likelihood + lp, e))
    };
    let (objective, last) = final_pass().map_err(|e| fail(iterations, &trace, e))?;
    trace.push(objective);
    if !objective.is_finite() {
        return Err(fail(iterations, &trace, Error::Numerical("objective is not finite".into())));
    }
    warnings.extend(last.warnings);
    warnings.dedup();

    Ok(EstimationResult {
        kind: cfg.kind,
        t_r,
        a_hat: theta.a,
        noise_hat: theta.noise,
        h_hat: theta.h,
        eps_hat: theta.eps,
        gamma: sbl,
        iterations,
        objective_trace: trace,
        history,
        warnings,
        smoothed: last.smoothed,
    })
}
