use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::kron;

/// Hyperparameters below this value are pruned to exactly zero.
pub const PRUNE_THRESHOLD: f64 = 1e-6;

/// Prior variances `γ` on `vec(Aᵀ)` (row-major `A`) and the pruning mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SblState {
    #[serde(with = "crate::serde_util::vector")]
    pub gamma: DVector<f64>,
    pub pruned: Vec<bool>,
}

impl SblState {
    /// All hyperparameters equal to one, nothing pruned.
    pub fn ones(n: usize) -> Self {
        Self {
            gamma: DVector::from_element(n * n, 1.0),
            pruned: vec![false; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.pruned[i]).collect()
    }

    pub fn pruned_count(&self) -> usize {
        self.pruned.iter().filter(|&&p| p).count()
    }

    /// Zeroes the pruned entries of a row-major `n × n` matrix.
    pub fn apply_mask(&self, a: &mut DMatrix<f64>) {
        let n = a.nrows();
        for (idx, &p) in self.pruned.iter().enumerate() {
            if p {
                a[(idx / n, idx % n)] = 0.0;
            }
        }
    }
}

/// Diagonal of `(I + B)⁻¹` for symmetric positive semidefinite `B`.
fn inverse_diagonal(b: &DMatrix<f64>) -> Result<DVector<f64>> {
    let k = b.nrows();
    let inner = DMatrix::<f64>::identity(k, k) + b;
    if let Some(ch) = inner.clone().cholesky() {
        let inv = ch.inverse();
        return Ok(inv.diagonal());
    }
    // Symmetric but numerically indefinite: equilibrate and fall back to LU.
    let scale: DVector<f64> = inner.diagonal().map(|v| 1.0 / v.abs().max(f64::MIN_POSITIVE).sqrt());
    let eq = DMatrix::from_fn(k, k, |i, j| scale[i] * inner[(i, j)] * scale[j]);
    let inv = eq
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular matrix in hyperparameter update".into()))?;
    Ok(DVector::from_fn(k, |i, _| inv[(i, i)] * scale[i] * scale[i]))
}

/// Hyperparameter reweighting from the data precision `K = Φᵀ (q⁻¹ ⊗ I) Φ` of
/// the linearized regression:
/// `γ_i ← a_i² + γ_i − γ_i² [K (I + ΓK)⁻¹]_ii = a_i² + γ_i [(I + Γ^{1/2} K Γ^{1/2})⁻¹]_ii`.
pub fn sbl_update_gram(state: &SblState, k: &DMatrix<f64>, a_hat: &DVector<f64>) -> Result<SblState> {
    let p = state.len();
    if k.shape() != (p, p) || a_hat.len() != p {
        return Err(Error::Shape(format!(
            "hyperparameter update: {p} coefficients, precision {:?}, estimate {}",
            k.shape(),
            a_hat.len()
        )));
    }
    let active = state.active();
    let root: Vec<f64> = active.iter().map(|&i| state.gamma[i].sqrt()).collect();
    let b = DMatrix::from_fn(active.len(), active.len(), |r, c| {
        root[r] * k[(active[r], active[c])] * root[c]
    });
    let diag = inverse_diagonal(&b)?;

    let mut next = state.clone();
    for (r, &i) in active.iter().enumerate() {
        let g = a_hat[i] * a_hat[i] + state.gamma[i] * diag[r];
        if !g.is_finite() {
            return Err(Error::Numerical(format!("non-finite hyperparameter at index {i}")));
        }
        if g < PRUNE_THRESHOLD {
            next.gamma[i] = 0.0;
            next.pruned[i] = true;
        } else {
            next.gamma[i] = g;
        }
    }
    Ok(next)
}

/// Repeats the reweighting on the quadratic surrogate `½aᵀKa − bᵀa` whose
/// `Γ`-regularized maximizer is `a_map`; between rounds `a` is re-solved under
/// the new `Γ`. `cycles = 1` is a single application of [`sbl_update_gram`].
/// Stops early once no hyperparameter moves by more than `1e-9` relative.
pub fn sbl_fixed_point(state: &SblState, k: &DMatrix<f64>, a_map: &DVector<f64>, cycles: usize) -> Result<SblState> {
    let active = state.active();
    // b = (K + Γ⁻¹) a_map on the active set.
    let mut b = DVector::zeros(state.len());
    for &i in &active {
        let ka: f64 = active.iter().map(|&j| k[(i, j)] * a_map[j]).sum();
        b[i] = ka + a_map[i] / state.gamma[i];
    }
    let mut current = sbl_update_gram(state, k, a_map)?;
    for _ in 1..cycles {
        let act = current.active();
        if act.is_empty() {
            break;
        }
        let root: Vec<f64> = act.iter().map(|&i| current.gamma[i].sqrt()).collect();
        let inner = DMatrix::from_fn(act.len(), act.len(), |r, c| {
            root[r] * k[(act[r], act[c])] * root[c] + if r == c { 1.0 } else { 0.0 }
        });
        let rhs = DVector::from_fn(act.len(), |r, _| root[r] * b[act[r]]);
        let sol = match inner.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => inner
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Numerical("singular matrix in hyperparameter update".into()))?,
        };
        let mut a = DVector::zeros(state.len());
        for (r, &i) in act.iter().enumerate() {
            a[i] = root[r] * sol[r];
        }
        let next = sbl_update_gram(&current, k, &a)?;
        let moved = act.iter().any(|&i| {
            next.pruned[i] || (next.gamma[i] - current.gamma[i]).abs() > 1e-9 * current.gamma[i]
        });
        current = next;
        if !moved {
            break;
        }
    }
    Ok(current)
}

/// Reweighting with an explicit design matrix `Φ` (`(n·M) × n²`, rows ordered
/// region-major) and per-sample noise covariance `q` (`n × n`).
pub fn sbl_update(state: &SblState, phi: &DMatrix<f64>, a_hat: &DVector<f64>, q_noise: &DMatrix<f64>) -> Result<SblState> {
    let n = q_noise.nrows();
    if n == 0 || phi.nrows() % n != 0 || q_noise.ncols() != n {
        return Err(Error::Shape("design rows must be a multiple of the noise dimension".into()));
    }
    let samples = phi.nrows() / n;
    let q_inv = q_noise
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("noise covariance not positive definite".into()))?
        .inverse();
    let w = kron(&q_inv, &DMatrix::identity(samples, samples));
    let k = phi.transpose() * w * phi;
    sbl_update_gram(state, &k, a_hat)
}
