//! Linear-Gaussian state-space models built from the sampled neuronal
//! dynamics and the per-region FIR hemodynamics.
//!
//! State ordering is `[w; x(k); x(k−1); …; x(k−s+1)]` (no `w` block for white
//! noise). The transition has a dense dynamic block in the top-left corner
//! and shift-register rows below it; only the dynamic block is stochastic.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{build_joint, discretize_white, NoiseModel};
use crate::error::{Error, Result};
use crate::hemo::HemoFir;
use crate::linalg::{kron, max_abs, spectral_radius, symmetrize};

/// Index map of the state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    /// Total state dimension `d`.
    pub dim: usize,
    /// Size of the stochastic, densely coupled top-left block `m`.
    pub dynamic: usize,
    /// Rows `i ≥ dynamic` copy entry `i − shift` of the previous state.
    pub shift: usize,
    /// Number of regions `n` (zero for unstructured models).
    pub regions: usize,
    /// FIR length `s`.
    pub taps: usize,
    /// Length of the leading `w` block (`0` or `n`).
    pub w_len: usize,
}

impl StateLayout {
    /// Unstructured layout: the whole state is one dense stochastic block.
    pub fn dense(dim: usize) -> Self {
        Self {
            dim,
            dynamic: dim,
            shift: 0,
            regions: 0,
            taps: 0,
            w_len: 0,
        }
    }

    pub fn white(n: usize, s: usize) -> Self {
        Self {
            dim: n * s,
            dynamic: n,
            shift: n,
            regions: n,
            taps: s,
            w_len: 0,
        }
    }

    pub fn extended(n: usize, s: usize) -> Self {
        Self {
            dim: n * (s + 1),
            dynamic: 2 * n,
            shift: n,
            regions: n,
            taps: s,
            w_len: n,
        }
    }

    /// State index of region `i` at lag `l`.
    pub fn x_index(&self, lag: usize, region: usize) -> usize {
        self.w_len + lag * self.regions + region
    }

    /// First index of the current neuronal state `x(k)`.
    pub fn x_start(&self) -> usize {
        self.w_len
    }

    pub fn w_range(&self) -> std::ops::Range<usize> {
        0..self.w_len
    }
}

/// `z(k+1) = F z(k) + η(k)`, `y(k) = C z(k) + e(k)`, `Var e = eps · I`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSSM {
    pub f: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub eps: f64,
    pub layout: StateLayout,
}

impl LinearSSM {
    /// Generic model with an unstructured layout.
    pub fn new(f: DMatrix<f64>, c: DMatrix<f64>, q: DMatrix<f64>, eps: f64) -> Result<Self> {
        let d = f.nrows();
        if f.ncols() != d || q.shape() != (d, d) || c.ncols() != d {
            return Err(Error::Shape(format!(
                "F {:?}, Q {:?}, C {:?} are inconsistent",
                f.shape(),
                q.shape(),
                c.shape()
            )));
        }
        if !(eps >= 0.0) {
            return Err(Error::Argument(format!("measurement variance must be non-negative, got {eps}")));
        }
        Ok(Self {
            f,
            c,
            q,
            eps,
            layout: StateLayout::dense(d),
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    fn dynamic_block(&self) -> nalgebra::DMatrixView<'_, f64> {
        let m = self.layout.dynamic;
        self.f.view((0, 0), (m, m))
    }

    /// `F v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let StateLayout { dim, dynamic: m, shift, .. } = self.layout;
        let mut out = DVector::zeros(dim);
        out.rows_mut(0, m).copy_from(&(self.dynamic_block() * v.rows(0, m)));
        for i in m..dim {
            out[i] = v[i - shift];
        }
        out
    }

    /// `F P`.
    pub fn left_mul(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let StateLayout { dim, dynamic: m, shift, .. } = self.layout;
        let cols = p.ncols();
        let mut out = DMatrix::zeros(dim, cols);
        out.rows_mut(0, m).copy_from(&(self.dynamic_block() * p.rows(0, m)));
        for i in m..dim {
            out.row_mut(i).copy_from(&p.row(i - shift));
        }
        out
    }

    /// `P Fᵀ`.
    pub fn right_mul_t(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let StateLayout { dim, dynamic: m, shift, .. } = self.layout;
        let rows = p.nrows();
        let mut out = DMatrix::zeros(rows, dim);
        out.columns_mut(0, m)
            .copy_from(&(p.columns(0, m) * self.dynamic_block().transpose()));
        for j in m..dim {
            out.column_mut(j).copy_from(&p.column(j - shift));
        }
        out
    }

    /// `F P Fᵀ + Q`, symmetrized.
    pub fn propagate(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = self.right_mul_t(&self.left_mul(p));
        let m = self.layout.dynamic;
        let mut block = out.view_mut((0, 0), (m, m));
        block += self.q.view((0, 0), (m, m));
        crate::linalg::symmetrize_in_place(&mut out);
        out
    }

    /// Process-noise covariance of the stochastic block.
    pub fn stochastic_q(&self) -> DMatrix<f64> {
        let m = self.layout.dynamic;
        self.q.view((0, 0), (m, m)).into_owned()
    }

    /// Spectral radius of the transition, using the block-triangular
    /// structure (the shift rows contribute only zero eigenvalues).
    pub fn spectral_radius(&self) -> f64 {
        if self.layout.shift == 0 {
            spectral_radius(&self.f)
        } else {
            spectral_radius(&self.dynamic_block().into_owned())
        }
    }
}

fn fir_output_matrix(h: &[HemoFir], layout: &StateLayout) -> Result<DMatrix<f64>> {
    let n = layout.regions;
    let s = layout.taps;
    if h.len() != n {
        return Err(Error::Shape(format!("{} FIR filters for {n} regions", h.len())));
    }
    if let Some(bad) = h.iter().position(|f| f.len() != s) {
        return Err(Error::Shape(format!(
            "region {bad} has {} taps, expected {s}",
            h[bad].len()
        )));
    }
    let mut c = DMatrix::zeros(n, layout.dim);
    for (i, fir) in h.iter().enumerate() {
        for l in 0..s {
            c[(i, layout.x_index(l, i))] = fir.taps[l];
        }
    }
    Ok(c)
}

fn taps_of(h: &[HemoFir]) -> Result<usize> {
    let first = h
        .first()
        .ok_or_else(|| Error::Shape("at least one region is required".into()))?;
    Ok(first.len())
}

fn assemble(
    layout: StateLayout,
    top: &DMatrix<f64>,
    q_top: &DMatrix<f64>,
    h: &[HemoFir],
    eps: f64,
) -> Result<LinearSSM> {
    if !(eps >= 0.0) {
        return Err(Error::Argument(format!("measurement variance must be non-negative, got {eps}")));
    }
    let StateLayout { dim, dynamic: m, shift, .. } = layout;
    let mut f = DMatrix::zeros(dim, dim);
    f.view_mut((0, 0), (m, m)).copy_from(top);
    for i in m..dim {
        f[(i, i - shift)] = 1.0;
    }
    let mut q = DMatrix::zeros(dim, dim);
    q.view_mut((0, 0), (m, m)).copy_from(q_top);
    let c = fir_output_matrix(h, &layout)?;
    Ok(LinearSSM { f, c, q, eps, layout })
}

/// White-noise model: state `[x(k); …; x(k−s+1)]`, `d = n·s`.
pub fn assemble_white(a: &DMatrix<f64>, sigma: f64, h: &[HemoFir], t_r: f64, eps: f64) -> Result<LinearSSM> {
    let s = taps_of(h)?;
    let n = a.nrows();
    let disc = discretize_white(a, sigma, t_r)?;
    assemble(StateLayout::white(n, s), &disc.ad, &disc.qw, h, eps)
}

/// Autoregressive-noise model: state `[w; x(k); …; x(k−s+1)]`, `d = n·(s+1)`.
pub fn assemble_var(a: &DMatrix<f64>, noise: &NoiseModel, h: &[HemoFir], t_r: f64, eps: f64) -> Result<LinearSSM> {
    let s = taps_of(h)?;
    let n = a.nrows();
    let joint = build_joint(a, noise, t_r)?;
    assemble(StateLayout::extended(n, s), &joint.md, &joint.q_eta, h, eps)
}

/// Either assembly, chosen by the noise model.
pub fn assemble_model(a: &DMatrix<f64>, noise: &NoiseModel, h: &[HemoFir], t_r: f64, eps: f64) -> Result<LinearSSM> {
    match noise {
        NoiseModel::White { sigma } => assemble_white(a, *sigma, h, t_r, eps),
        _ => assemble_var(a, noise, h, t_r, eps),
    }
}

/// Largest state dimension solved by the vectorized (Kronecker) method.
const DIRECT_LYAPUNOV_MAX_DIM: usize = 20;

/// Solves `Σ = F Σ Fᵀ + Q`.
pub fn stationary_covariance(ssm: &LinearSSM) -> Result<DMatrix<f64>> {
    let radius = ssm.spectral_radius();
    if !(radius < 1.0 - 1e-9) {
        return Err(Error::Unstable(radius));
    }
    let d = ssm.dim();
    let sigma = if d <= DIRECT_LYAPUNOV_MAX_DIM {
        let lhs = DMatrix::identity(d * d, d * d) - kron(&ssm.f, &ssm.f);
        let rhs = DVector::from_column_slice(ssm.q.as_slice());
        let sol = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("singular Lyapunov system".into()))?;
        DMatrix::from_column_slice(d, d, sol.as_slice())
    } else {
        lyapunov_doubling(&ssm.f, &ssm.q)?
    };
    Ok(symmetrize(&sigma))
}

/// Smith's doubling iteration: `Σ ← Σ + Fₖ Σ Fₖᵀ`, `Fₖ₊₁ = Fₖ²`.
pub fn lyapunov_doubling(f: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut sigma = q.clone();
    let mut fk = f.clone();
    for _ in 0..80 {
        let add = &fk * &sigma * fk.transpose();
        sigma += &add;
        if max_abs(&add) <= 1e-17 * max_abs(&sigma).max(f64::MIN_POSITIVE) {
            return Ok(sigma);
        }
        fk = &fk * &fk;
    }
    Err(Error::Numerical("Lyapunov doubling did not converge".into()))
}
