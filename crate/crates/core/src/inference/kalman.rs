use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, max_abs_diff, symmetrize_in_place};
use crate::ssm::LinearSSM;

/// Relative change below which consecutive predicted covariances are treated
/// as identical, after which gains and covariances are reused.
pub(crate) const STEADY_TOL: f64 = 1e-13;

/// Gaussian prior on the state at time 0.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl InitialState {
    pub fn zero_mean(cov: DMatrix<f64>) -> Self {
        Self {
            mean: DVector::zeros(cov.nrows()),
            cov,
        }
    }
}

/// Forward pass. Index `k` runs over `0..=N`; entry `0` is the prior and
/// observation `k` (row `k−1` of `Y`) is assimilated at index `k`.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub predicted_means: Vec<DVector<f64>>,
    pub predicted_covs: Vec<DMatrix<f64>>,
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
    /// Innovation at each observation (length `N`).
    pub innovations: Vec<DVector<f64>>,
    pub log_likelihood: f64,
    /// From this index on, predicted and filtered covariances no longer change.
    pub steady_from: Option<usize>,
}

impl FilterOutput {
    pub fn len(&self) -> usize {
        self.innovations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.innovations.is_empty()
    }
}

/// Factorization of an innovation covariance, with a pseudo-inverse fallback
/// for exactly degenerate (zero-variance) directions.
struct InnovationSolver {
    inverse: DMatrix<f64>,
    log_det: f64,
    rank: usize,
    null_basis: Option<DMatrix<f64>>,
}

impl InnovationSolver {
    fn new(s: &DMatrix<f64>, step: usize) -> Result<Self> {
        if let Some(ch) = s.clone().cholesky() {
            let log_det = crate::linalg::log_det_chol(&ch);
            return Ok(Self {
                inverse: ch.inverse(),
                log_det,
                rank: s.nrows(),
                null_basis: None,
            });
        }
        let eig = SymmetricEigen::new(s.clone());
        let scale = eig.eigenvalues.amax();
        let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
        if eig.eigenvalues.iter().any(|&l| l < -tol) {
            return Err(Error::Numerical(format!(
                "innovation covariance not positive definite at step {step}"
            )));
        }
        let n = s.nrows();
        let mut inverse = DMatrix::zeros(n, n);
        let mut log_det = 0.0;
        let mut rank = 0;
        let mut null_cols = Vec::new();
        for (i, &l) in eig.eigenvalues.iter().enumerate() {
            let v = eig.eigenvectors.column(i);
            if l > tol {
                inverse += (v * v.transpose()) / l;
                log_det += l.ln();
                rank += 1;
            } else {
                null_cols.push(v.into_owned());
            }
        }
        Ok(Self {
            inverse,
            log_det,
            rank,
            null_basis: Some(DMatrix::from_columns(&null_cols)),
        })
    }

    fn check_innovation(&self, nu: &DVector<f64>, step: usize) -> Result<()> {
        if let Some(basis) = &self.null_basis {
            let stray = (basis.transpose() * nu).amax();
            if stray > 1e-9 * (1.0 + nu.amax()) {
                return Err(Error::Numerical(format!(
                    "innovation covariance not positive definite at step {step}"
                )));
            }
        }
        Ok(())
    }
}

/// Kalman filter with the Joseph-form covariance update.
pub fn kalman_filter(ssm: &LinearSSM, y: &DMatrix<f64>, init: &InitialState) -> Result<FilterOutput> {
    let d = ssm.dim();
    let n = ssm.outputs();
    let steps = y.nrows();
    if y.ncols() != n {
        return Err(Error::Shape(format!("Y has {} columns, model has {n} outputs", y.ncols())));
    }
    if init.mean.len() != d || init.cov.shape() != (d, d) {
        return Err(Error::Shape("initial state does not match state dimension".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("observations must be finite".into()));
    }
    let r = DMatrix::<f64>::identity(n, n) * ssm.eps;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();

    let mut out = FilterOutput {
        predicted_means: Vec::with_capacity(steps + 1),
        predicted_covs: Vec::with_capacity(steps + 1),
        filtered_means: Vec::with_capacity(steps + 1),
        filtered_covs: Vec::with_capacity(steps + 1),
        innovations: Vec::with_capacity(steps),
        log_likelihood: 0.0,
        steady_from: None,
    };
    out.predicted_means.push(init.mean.clone());
    out.predicted_covs.push(init.cov.clone());
    out.filtered_means.push(init.mean.clone());
    out.filtered_covs.push(init.cov.clone());

    // Gain and solver of the previous step, reused once covariances settle.
    let mut cached: Option<(DMatrix<f64>, InnovationSolver)> = None;
    let mut steady = false;

    for k in 1..=steps {
        let x_prev = &out.filtered_means[k - 1];
        let x_pred = ssm.apply(x_prev);
        let p_pred = if steady {
            out.predicted_covs[k - 1].clone()
        } else {
            ssm.propagate(&out.filtered_covs[k - 1])
        };
        if !steady && k >= 2 {
            let prev = &out.predicted_covs[k - 1];
            if max_abs_diff(&p_pred, prev) <= STEADY_TOL * max_abs(prev).max(f64::MIN_POSITIVE) {
                steady = true;
                out.steady_from = Some(k - 1);
            }
        }

        let yk = y.row(k - 1).transpose();
        let nu = &yk - &ssm.c * &x_pred;

        let (x_f, p_f) = if steady && cached.is_some() {
            let (gain, solver) = cached.as_ref().unwrap();
            solver.check_innovation(&nu, k)?;
            out.log_likelihood += -0.5
                * (solver.rank as f64 * ln2pi + solver.log_det + (nu.transpose() * &solver.inverse * &nu)[(0, 0)]);
            (&x_pred + gain * &nu, out.filtered_covs[k - 1].clone())
        } else {
            let u = &p_pred * ssm.c.transpose();
            let mut s = &ssm.c * &u + &r;
            symmetrize_in_place(&mut s);
            let solver = InnovationSolver::new(&s, k)?;
            solver.check_innovation(&nu, k)?;
            out.log_likelihood += -0.5
                * (solver.rank as f64 * ln2pi + solver.log_det + (nu.transpose() * &solver.inverse * &nu)[(0, 0)]);
            let gain = &u * &solver.inverse;
            let ku = &gain * u.transpose();
            let mut p_f = &p_pred - &ku - ku.transpose() + &gain * &s * gain.transpose();
            symmetrize_in_place(&mut p_f);
            let x_f = &x_pred + &gain * &nu;
            cached = Some((gain, solver));
            (x_f, p_f)
        };

        out.predicted_means.push(x_pred);
        out.predicted_covs.push(p_pred);
        out.filtered_means.push(x_f);
        out.filtered_covs.push(p_f);
        out.innovations.push(nu);
    }
    Ok(out)
}
