use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::smoother::SmoothedMoments;
use super::{Priors, Theta};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_det_chol};
use crate::ssm::LinearSSM;

/// Averaged second moments of the smoothed state (all scaled by `1/N`).
///
/// * `theta = ⟨z(k) z(k)ᵀ⟩` over `k = 1..N`
/// * `upsilon = ⟨z(k) z(k)ᵀ⟩` over `k = 0..N−1`
/// * `psi = ⟨z(k) z(k−1)ᵀ⟩` over `k = 1..N`
/// * `xi = ⟨y(k) z(k)ᵀ⟩`, `pi = ⟨y(k) y(k)ᵀ⟩` over `k = 1..N`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EMStats {
    pub theta: DMatrix<f64>,
    pub upsilon: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    pub pi: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub samples: usize,
}

pub fn em_statistics(sm: &SmoothedMoments, y: &DMatrix<f64>) -> Result<EMStats> {
    let steps = sm.steps();
    if steps == 0 || y.nrows() != steps || sm.covs.len() != steps + 1 || sm.lag1.len() != steps {
        return Err(Error::Shape(format!(
            "{} smoothed steps for {} observations",
            steps,
            y.nrows()
        )));
    }
    let d = sm.means[0].len();
    let n = y.ncols();
    let mut theta = DMatrix::zeros(d, d);
    let mut upsilon = DMatrix::zeros(d, d);
    let mut psi = DMatrix::zeros(d, d);
    let mut xi = DMatrix::zeros(n, d);
    let mut pi = DMatrix::zeros(n, n);

    // Θ and Υ share the terms for k = 1..N−1.
    let mut shared = DMatrix::zeros(d, d);
    for k in 1..steps {
        shared += &sm.covs[k];
        shared.ger(1.0, &sm.means[k], &sm.means[k], 1.0);
    }
    theta += &shared + &sm.covs[steps];
    theta.ger(1.0, &sm.means[steps], &sm.means[steps], 1.0);
    upsilon += shared + &sm.covs[0];
    upsilon.ger(1.0, &sm.means[0], &sm.means[0], 1.0);

    for k in 1..=steps {
        psi += &sm.lag1[k - 1];
        psi.ger(1.0, &sm.means[k], &sm.means[k - 1], 1.0);
        let yk: DVector<f64> = y.row(k - 1).transpose();
        xi.ger(1.0, &yk, &sm.means[k], 1.0);
        pi.ger(1.0, &yk, &yk, 1.0);
    }

    let scale = 1.0 / steps as f64;
    Ok(EMStats {
        theta: theta * scale,
        upsilon: upsilon * scale,
        xi: xi * scale,
        pi: pi * scale,
        psi: psi * scale,
        samples: steps,
    })
}

/// Measurement part of the lower bound, `−N/2 [n ln(2π ε) + tr(R_y)/ε]` with
/// `R_y = Π − ΞCᵀ − CΞᵀ + CΘCᵀ`.
pub fn measurement_term(c: &DMatrix<f64>, eps: f64, stats: &EMStats) -> f64 {
    let n = c.nrows() as f64;
    let big_n = stats.samples as f64;
    let resid = measurement_residual_trace(c, stats);
    -0.5 * big_n * (n * (2.0 * std::f64::consts::PI * eps).ln() + resid / eps)
}

/// `tr(Π − ΞCᵀ − CΞᵀ + CΘCᵀ)`.
pub(crate) fn measurement_residual_trace(c: &DMatrix<f64>, stats: &EMStats) -> f64 {
    let ct = c * &stats.theta;
    let mut tr = 0.0;
    for i in 0..c.nrows() {
        tr += stats.pi[(i, i)] - 2.0 * stats.xi.row(i).dot(&c.row(i)) + ct.row(i).dot(&c.row(i));
    }
    tr
}

/// Dynamic part of the lower bound on the stochastic block of size `m`:
/// `−N/2 [m ln 2π + ln|Q_u| + tr(Q_u⁻¹ R_u)]`.
pub(crate) fn dynamic_term(md: &DMatrix<f64>, q: &DMatrix<f64>, stats: &EMStats) -> Result<f64> {
    let m = md.nrows();
    let ch = cholesky(q, "stochastic block of the process covariance")?;
    let r = dynamic_residual(md, stats);
    let tr = ch.solve(&r).trace();
    let big_n = stats.samples as f64;
    Ok(-0.5 * big_n * (m as f64 * (2.0 * std::f64::consts::PI).ln() + log_det_chol(&ch) + tr))
}

/// `R_u = Θ − Ψ Mdᵀ − Md Ψᵀ + Md Υ Mdᵀ` on the leading `m × m` block.
pub(crate) fn dynamic_residual(md: &DMatrix<f64>, stats: &EMStats) -> DMatrix<f64> {
    let m = md.nrows();
    let th = stats.theta.view((0, 0), (m, m));
    let ps = stats.psi.view((0, 0), (m, m));
    let up = stats.upsilon.view((0, 0), (m, m));
    let pm = ps * md.transpose();
    let r = th - &pm - pm.transpose() + md * up * md.transpose();
    crate::linalg::symmetrize(&r)
}

/// Expected complete-data log-likelihood `𝒬` of `ssm` under `stats`, with the
/// Gaussian transition term restricted to the stochastic block.
pub fn q_lower_bound(ssm: &LinearSSM, stats: &EMStats) -> Result<f64> {
    let d = ssm.dim();
    if stats.theta.nrows() != d || stats.xi.shape() != (ssm.outputs(), d) {
        return Err(Error::Shape("statistics do not match the model".into()));
    }
    let m = ssm.layout.dynamic;
    let md = ssm.f.view((0, 0), (m, m)).into_owned();
    let qu = ssm.stochastic_q();
    Ok(dynamic_term(&md, &qu, stats)? + measurement_term(&ssm.c, ssm.eps, stats))
}

/// Log prior of `A` (Gaussian on unpruned entries of `vec(Aᵀ)`) plus the FIR
/// prior of every region.
pub fn log_prior(theta: &Theta, priors: Priors<'_>) -> Result<f64> {
    let n = theta.regions();
    let gamma = &priors.sbl.gamma;
    if gamma.len() != n * n {
        return Err(Error::Shape(format!("{} hyperparameters for {n} regions", gamma.len())));
    }
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let mut lp = 0.0;
    for i in 0..n {
        for j in 0..n {
            let idx = i * n + j;
            if priors.sbl.pruned[idx] {
                continue;
            }
            let g = gamma[idx];
            let a = theta.a[(i, j)];
            lp += -0.5 * (ln2pi + g.ln() + a * a / g);
        }
    }
    let sigma = priors.fir.regularized_sigma();
    let ch = cholesky(&sigma, "FIR prior covariance")?;
    let s = sigma.nrows() as f64;
    let norm = -0.5 * (s * ln2pi + log_det_chol(&ch));
    for h in &theta.h {
        if h.taps.len() != priors.fir.h_bar.len() {
            return Err(Error::Shape("FIR length does not match its prior".into()));
        }
        let diff = &h.taps - &priors.fir.h_bar;
        lp += norm - 0.5 * diff.dot(&ch.solve(&diff));
    }
    Ok(lp)
}
