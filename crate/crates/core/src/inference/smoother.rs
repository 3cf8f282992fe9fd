use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::kalman::{FilterOutput, STEADY_TOL};
use crate::error::{Error, Result};
use crate::linalg::{max_abs, max_abs_diff, symmetrize_in_place};
use crate::ssm::LinearSSM;

/// Smoothed moments over indices `0..=N`.
///
/// `gains[k]` is `G(k)` for `k` in `0..N`; `lag1[k−1]` holds
/// `Cov(z(k), z(k−1) | Y) = P_s(k) G(k−1)ᵀ` for `k` in `1..=N`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SmoothedMoments {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub lag1: Vec<DMatrix<f64>>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl SmoothedMoments {
    /// Number of observation steps `N`.
    pub fn steps(&self) -> usize {
        self.means.len().saturating_sub(1)
    }

    /// Smoothed means as an `(N+1) × d` matrix.
    pub fn mean_matrix(&self) -> DMatrix<f64> {
        let d = self.means.first().map_or(0, |m| m.len());
        DMatrix::from_fn(self.means.len(), d, |k, j| self.means[k][j])
    }
}

/// Computes `Gᵀ = P_pred⁻¹ (F P_f)`; falls back to a pseudo-inverse when
/// `P_pred` is singular only along directions that carry no filtered
/// uncertainty either.
fn smoother_gain(
    ssm: &LinearSSM,
    p_f: &DMatrix<f64>,
    p_pred: &DMatrix<f64>,
    step: usize,
    warnings: &mut Vec<String>,
) -> Result<DMatrix<f64>> {
    let fp = ssm.left_mul(p_f);
    if let Some(ch) = p_pred.clone().cholesky() {
        let gt = ch.solve(&fp);
        if gt.iter().all(|v| v.is_finite()) {
            return Ok(gt.transpose());
        }
    }
    let eig = SymmetricEigen::new(p_pred.clone());
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale;
    let d = p_pred.nrows();
    let mut pinv = DMatrix::zeros(d, d);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        if l > tol {
            pinv += (v * v.transpose()) / l;
        } else {
            // A deterministic direction: F P_f must not project onto it.
            let leak = (v.transpose() * &fp).amax();
            if leak > 1e-8 * max_abs(&fp).max(f64::MIN_POSITIVE) {
                return Err(Error::Numerical(format!(
                    "singular predicted covariance in smoother gain at step {step}"
                )));
            }
        }
    }
    warnings.push(format!("pseudo-inverse smoother gain at step {step}"));
    Ok((pinv * fp).transpose())
}

/// Rauch–Tung–Striebel fixed-interval smoother.
pub fn rts_smoother(ssm: &LinearSSM, filtered: &FilterOutput) -> Result<SmoothedMoments> {
    let steps = filtered.len();
    let d = ssm.dim();
    if filtered.filtered_means.len() != steps + 1 || filtered.filtered_means[0].len() != d {
        return Err(Error::Shape("filter output does not match the model".into()));
    }
    let steady = filtered.steady_from.unwrap_or(usize::MAX);
    let mut warnings = Vec::new();

    let mut means = vec![DVector::zeros(0); steps + 1];
    let mut covs = vec![DMatrix::zeros(0, 0); steps + 1];
    let mut gains = vec![DMatrix::zeros(0, 0); steps];
    let mut lag1 = vec![DMatrix::zeros(0, 0); steps];
    means[steps] = filtered.filtered_means[steps].clone();
    covs[steps] = filtered.filtered_covs[steps].clone();

    // Whether P_s(k+1) equals P_s(k+2), for reuse once gains are constant.
    let mut cov_settled = false;

    for k in (0..steps).rev() {
        let gain_settled = k >= steady && k + 1 < steps;
        let g = if gain_settled {
            gains[k + 1].clone()
        } else {
            smoother_gain(ssm, &filtered.filtered_covs[k], &filtered.predicted_covs[k + 1], k, &mut warnings)?
        };

        let diff = &means[k + 1] - &filtered.predicted_means[k + 1];
        means[k] = &filtered.filtered_means[k] + &g * diff;

        let reuse_cov = gain_settled && cov_settled && k + 2 <= steps;
        covs[k] = if reuse_cov {
            covs[k + 1].clone()
        } else {
            let delta = &covs[k + 1] - &filtered.predicted_covs[k + 1];
            let mut p = &filtered.filtered_covs[k] + &g * delta * g.transpose();
            symmetrize_in_place(&mut p);
            p
        };

        lag1[k] = if reuse_cov && k + 1 < steps {
            lag1[k + 1].clone()
        } else {
            &covs[k + 1] * g.transpose()
        };

        if gain_settled && !cov_settled {
            let scale = max_abs(&covs[k + 1]).max(f64::MIN_POSITIVE);
            cov_settled = max_abs_diff(&covs[k], &covs[k + 1]) <= STEADY_TOL * scale;
        }
        gains[k] = g;
    }

    Ok(SmoothedMoments {
        means,
        covs,
        gains,
        lag1,
        warnings,
    })
}
