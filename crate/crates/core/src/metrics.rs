//! Connectivity comparison metrics and functional-connectivity matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{stationary_covariance, LinearSSM};

/// Magnitude at or below which an estimated coupling counts as absent.
pub const ZERO_TOL: f64 = 1e-3;

/// Symmetric correlation matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FcMatrix(DMatrix<f64>);

impl FcMatrix {
    /// Normalizes a covariance matrix to correlations.
    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<Self> {
        let n = cov.nrows();
        if cov.ncols() != n {
            return Err(Error::Shape("covariance must be square".into()));
        }
        if let Some(i) = (0..n).find(|&i| !(cov[(i, i)] > 0.0)) {
            return Err(Error::Domain(format!("region {i} has zero variance; correlation undefined")));
        }
        let mut fc = DMatrix::identity(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let r = (cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt()).clamp(-1.0, 1.0);
                fc[(i, j)] = r;
                fc[(j, i)] = r;
            }
        }
        Ok(Self(fc))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn regions(&self) -> usize {
        self.0.nrows()
    }
}

/// Centered Pearson correlation.
pub fn pearson(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    if u.len() < 2 {
        return Err(Error::Argument("correlation needs at least two samples".into()));
    }
    let m = u.len() as f64;
    let mu = u.iter().sum::<f64>() / m;
    let mv = v.iter().sum::<f64>() / m;
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        suv += da * db;
        suu += da * da;
        svv += db * db;
    }
    if suu == 0.0 || svv == 0.0 {
        return Err(Error::Domain("correlation undefined for a constant vector".into()));
    }
    Ok((suv / (suu.sqrt() * svv.sqrt())).clamp(-1.0, 1.0))
}

fn same_square(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<usize> {
    let n = a.nrows();
    if a.ncols() != n || b.shape() != (n, n) {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(n)
}

fn off_diagonal(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out.push(a[(i, j)]);
            }
        }
    }
    out
}

fn upper_triangle(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(a[(i, j)]);
        }
    }
    out
}

/// Off-diagonal root-mean-square difference, `‖A̲ − Â̲‖_F / √(n(n−1))`.
pub fn rmse_ec(a_true: &DMatrix<f64>, a_hat: &DMatrix<f64>) -> Result<f64> {
    let n = same_square(a_true, a_hat)?;
    if n < 2 {
        return Err(Error::Shape("at least two regions are required".into()));
    }
    let ss: f64 = off_diagonal(a_true)
        .iter()
        .zip(off_diagonal(a_hat))
        .map(|(t, h)| (t - h).powi(2))
        .sum();
    Ok((ss / (n * (n - 1)) as f64).sqrt())
}

/// Off-diagonal positions whose zero/non-zero status differs between the two
/// patterns.
pub fn sparsity_err_masks(zero_true: &DMatrix<bool>, zero_hat: &DMatrix<bool>) -> Result<usize> {
    let n = zero_true.nrows();
    if zero_true.ncols() != n || zero_hat.shape() != (n, n) {
        return Err(Error::Shape("sparsity patterns differ in shape".into()));
    }
    Ok((0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && zero_true[(i, j)] != zero_hat[(i, j)])
        .count())
}

/// Sparsity-pattern errors with `|a| ≤ zero_tol` treated as zero.
pub fn sparsity_err(a_true: &DMatrix<f64>, a_hat: &DMatrix<f64>, zero_tol: f64) -> Result<usize> {
    same_square(a_true, a_hat)?;
    sparsity_err_masks(&a_true.map(|v| v.abs() <= zero_tol), &a_hat.map(|v| v.abs() <= zero_tol))
}

/// Pairwise Pearson correlations of the columns of `Y`.
pub fn empirical_fc(y: &DMatrix<f64>) -> Result<FcMatrix> {
    let (rows, n) = y.shape();
    if rows < 2 {
        return Err(Error::Argument("at least two samples are required".into()));
    }
    let mut centered = y.clone();
    for i in 0..n {
        let mean = y.column(i).mean();
        centered.column_mut(i).add_scalar_mut(-mean);
        if centered.column(i).iter().all(|&v| v == 0.0) {
            return Err(Error::Domain(format!("region {i} is constant; correlation undefined")));
        }
    }
    FcMatrix::from_covariance(&(centered.transpose() * centered))
}

/// Model-implied FC: `C Σ_z Cᵀ + ε I` normalized to correlations, with `Σ_z`
/// the stationary state covariance.
pub fn model_fc(ssm: &LinearSSM) -> Result<FcMatrix> {
    let sigma = stationary_covariance(ssm)?;
    let n = ssm.outputs();
    let cov = &ssm.c * sigma * ssm.c.transpose() + DMatrix::identity(n, n) * ssm.eps;
    FcMatrix::from_covariance(&cov)
}

/// Pearson correlation of the off-diagonal entries.
pub fn rho_ec(a1: &DMatrix<f64>, a2: &DMatrix<f64>) -> Result<f64> {
    same_square(a1, a2)?;
    pearson(&off_diagonal(a1), &off_diagonal(a2))
}

/// Pearson correlation of the strict upper triangles.
pub fn rho_fc(f1: &FcMatrix, f2: &FcMatrix) -> Result<f64> {
    same_square(f1.matrix(), f2.matrix())?;
    pearson(&upper_triangle(f1.matrix()), &upper_triangle(f2.matrix()))
}

/// The 7-region reference connectivity with 14 directed off-diagonal edges.
pub fn reference_connectivity() -> DMatrix<f64> {
    #[rustfmt::skip]
    let rows = [
        -0.5,  0.0,   0.0,   0.0,  -0.2,  0.0,  0.0,
         0.0, -0.5,   0.0,  -0.45, -0.3,  0.0,  0.0,
         0.0,  0.0,  -0.5,   0.8,   0.0,  0.0,  0.0,
         0.0,  0.6,   0.0,  -0.5,  -0.1,  0.6,  0.0,
         0.3,  0.0,  -0.55,  0.0,  -0.5,  0.2,  0.0,
         0.0,  0.0,   0.0,   0.0,   0.3, -0.5,  0.45,
         0.15, 0.0,   0.2,   0.0,   0.0,  0.0, -0.5,
    ];
    DMatrix::from_row_slice(7, 7, &rows)
}
