use nalgebra::{DMatrix, DVector};

use super::sbl::SblState;
use super::{ModelKind, Theta};
use crate::dynamics::NoiseModel;
use crate::error::{Error, Result};
use crate::hemo::FirPrior;

const AR_ORDER: usize = 3;
const DECONV_WEIGHT: f64 = 1e-2;
/// Starting fluctuation rate of [`initialize`].
pub const INITIAL_RATE: f64 = -0.5;
/// Starting rates screened by the estimator. The fast start sits close to the
/// white model; neither start wins consistently.
pub const INITIAL_RATES: [f64; 2] = [INITIAL_RATE, -2.0];

/// Tikhonov-regularized deconvolution: `argmin ‖y − H x‖² + μ‖x‖²` with `H`
/// the causal convolution by `h`.
pub fn deconvolve(y: &[f64], h: &[f64], mu: f64) -> Result<Vec<f64>> {
    let n = y.len();
    let conv = DMatrix::from_fn(n, n, |r, c| if r >= c && r - c < h.len() { h[r - c] } else { 0.0 });
    let lhs = conv.transpose() * &conv + DMatrix::identity(n, n) * mu;
    let rhs = conv.transpose() * DVector::from_column_slice(y);
    let x = lhs
        .cholesky()
        .ok_or_else(|| Error::Numerical("deconvolution system is not positive definite".into()))?
        .solve(&rhs);
    Ok(x.iter().copied().collect())
}

/// Innovation variance of a least-squares AR(3) fit to the demeaned series.
pub fn ar_innovation_variance(x: &[f64]) -> Result<f64> {
    let p = AR_ORDER;
    if x.len() <= 2 * p {
        return Err(Error::Data(format!("AR({p}) fit needs more than {} samples", 2 * p)));
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let rows = c.len() - p;
    let design = DMatrix::from_fn(rows, p, |t, j| c[t + p - 1 - j]);
    let target = DVector::from_fn(rows, |t, _| c[t + p]);
    let coef = design
        .clone()
        .svd(true, true)
        .solve(&target, 1e-12)
        .map_err(|e| Error::Numerical(format!("AR fit failed: {e}")))?;
    let resid = target - design * coef;
    Ok(resid.norm_squared() / rows as f64)
}

/// Starting point of the EM iteration and all-ones hyperparameters.
pub fn initialize(y: &DMatrix<f64>, fir_prior: &FirPrior, kind: ModelKind) -> Result<(Theta, SblState)> {
    initialize_with_rate(y, fir_prior, kind, INITIAL_RATE)
}

/// [`initialize`] with an explicit starting rate for AR and VAR models.
pub fn initialize_with_rate(
    y: &DMatrix<f64>,
    fir_prior: &FirPrior,
    kind: ModelKind,
    rate: f64,
) -> Result<(Theta, SblState)> {
    if !(rate < 0.0) || !rate.is_finite() {
        return Err(Error::Config(format!("initial rate must be negative, got {rate}")));
    }
    let (steps, n) = y.shape();
    if n == 0 {
        return Err(Error::Shape("at least one region is required".into()));
    }
    if steps <= 3 * fir_prior.s {
        return Err(Error::Data(format!(
            "{steps} samples is too short for {} FIR taps (need more than {})",
            fir_prior.s,
            3 * fir_prior.s
        )));
    }
    let mut variances = Vec::with_capacity(n);
    for i in 0..n {
        let col = y.column(i);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (steps - 1) as f64;
        if !(var > 0.0) {
            return Err(Error::Data(format!("region {i} has zero variance")));
        }
        variances.push(var);
    }
    let eps = 0.1 * variances.iter().sum::<f64>() / n as f64;

    let h_bar: Vec<f64> = fir_prior.h_bar.iter().copied().collect();
    let mu = DECONV_WEIGHT * fir_prior.h_bar.norm_squared();
    let mut intensity = 0.0;
    for i in 0..n {
        let col: Vec<f64> = y.column(i).iter().copied().collect();
        let x = deconvolve(&col, &h_bar, mu)?;
        intensity += ar_innovation_variance(&x)?;
    }
    intensity /= n as f64;

    let noise = match kind {
        ModelKind::White => NoiseModel::White { sigma: intensity },
        ModelKind::Ar => NoiseModel::Ar { lambda: rate, delta: intensity },
        ModelKind::Var => NoiseModel::Var { lambdas: vec![rate; n], delta: intensity },
    };
    let theta = Theta {
        a: -DMatrix::identity(n, n),
        noise,
        h: vec![fir_prior.mean_fir(); n],
        eps,
    };
    Ok((theta, SblState::ones(n)))
}
