//! Dense matrix utilities: exponential, Fréchet derivative, Van Loan
//! discretization, principal logarithm and a few symmetric helpers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Schur, SymmetricEigen};

use crate::error::{Error, Result};

const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA_13: f64 = 5.371920351148152e0;

const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE_9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn require_square(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::Shape(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

/// Matrix exponential by scaling and squaring with a diagonal Padé
/// approximant of degree 3, 5, 7, 9 or 13 (Higham's 2005 selection).
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = require_square(a, "expm input")?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("expm input has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let ident = DMatrix::<f64>::identity(n, n);
    let norm = one_norm(a);

    for &(deg, theta) in THETA.iter() {
        if norm <= theta {
            let coeffs: &[f64] = match deg {
                3 => &PADE_3,
                5 => &PADE_5,
                7 => &PADE_7,
                _ => &PADE_9,
            };
            return pade_low(a, coeffs, &ident);
        }
    }

    let s = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = a * 2f64.powi(-s);
    let b = &PADE_13;
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &scaled * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];
    let mut r = pade_solve(&u, &v)?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

fn pade_low(a: &DMatrix<f64>, b: &[f64], ident: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let a2 = a * a;
    let mut pow = ident.clone();
    let mut u_even = ident * b[1];
    let mut v = ident * b[0];
    let mut k = 2;
    while k < b.len() {
        pow = &pow * &a2;
        v += &pow * b[k];
        if k + 1 < b.len() {
            u_even += &pow * b[k + 1];
        }
        k += 2;
    }
    let u = a * u_even;
    pade_solve(&u, &v)
}

fn pade_solve(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = v + u;
    let q = v - u;
    q.lu()
        .solve(&p)
        .ok_or_else(|| Error::Numerical("singular Padé denominator in expm".into()))
}

/// Fréchet derivative of the exponential at `x` in direction `e`, read off the
/// upper-right block of `expm([[x, e], [0, x]])`.
pub fn expm_frechet(x: &DMatrix<f64>, e: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = require_square(x, "Fréchet base point")?;
    if e.shape() != (n, n) {
        return Err(Error::Shape("Fréchet direction must match base point".into()));
    }
    let mut big = DMatrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(x);
    big.view_mut((n, n), (n, n)).copy_from(x);
    big.view_mut((0, n), (n, n)).copy_from(e);
    let ex = expm(&big)?;
    Ok(ex.view((0, n), (n, n)).into_owned())
}

/// Van Loan's construction: returns `(e^{M t}, ∫₀ᵗ e^{Mτ} Σ e^{Mᵀτ} dτ)`.
///
/// The covariance is read from `expm(τ·[[-M, Σ], [0, Mᵀ]])` as `F22ᵀ F12` on
/// a subinterval `τ = t / 2ᵏ` with `‖M‖₁ τ ≤ 1`, then doubled back to `t` with
/// `Q ← Φ Q Φᵀ + Q`, `Φ ← Φ²`. Evaluating the block exponential over the full
/// interval loses accuracy through the growing `e^{-Mt}` block.
pub fn van_loan(m: &DMatrix<f64>, sigma: &DMatrix<f64>, t: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = require_square(m, "generator")?;
    if sigma.shape() != (n, n) {
        return Err(Error::Shape("noise intensity must match generator".into()));
    }
    let size = m.abs().column_sum().max() * t.abs();
    let halvings = if size > 1.0 { (size.log2().ceil() as i32).min(MAX_VAN_LOAN_HALVINGS) } else { 0 };
    let tau = t / 2f64.powi(halvings);
    let ex = expm(&van_loan_block(m, sigma, tau))?;
    let f22 = ex.view((n, n), (n, n));
    let f12 = ex.view((0, n), (n, n));
    let mut phi = f22.transpose();
    let mut q = symmetrize(&(&phi * f12));
    for _ in 0..halvings {
        q = symmetrize(&(&phi * &q * phi.transpose() + &q));
        phi = &phi * &phi;
    }
    Ok((phi, q))
}

/// Upper bound on the subinterval halvings in [`van_loan`].
const MAX_VAN_LOAN_HALVINGS: i32 = 60;

pub(crate) fn van_loan_block(m: &DMatrix<f64>, sigma: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&(-m * t));
    h.view_mut((0, n), (n, n)).copy_from(&(sigma * t));
    h.view_mut((n, n), (n, n)).copy_from(&(m.transpose() * t));
    h
}

/// Principal matrix square root by the Denman–Beavers iteration.
pub fn sqrtm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = require_square(a, "sqrtm input")?;
    let mut y = a.clone();
    let mut z = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let y_inv = y
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular iterate in sqrtm".into()))?;
        let z_inv = z
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular iterate in sqrtm".into()))?;
        let y_next = (&y + z_inv) * 0.5;
        let z_next = (&z + y_inv) * 0.5;
        let delta = (&y_next - &y).norm() / y_next.norm().max(f64::MIN_POSITIVE);
        y = y_next;
        z = z_next;
        if delta < 1e-15 {
            return Ok(y);
        }
    }
    Ok(y)
}

/// Principal logarithm by inverse scaling and squaring: take square roots
/// until the argument is close to the identity, then sum the series of
/// `log(I + E)`.
pub fn logm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = require_square(a, "logm input")?;
    let ident = DMatrix::<f64>::identity(n, n);
    let mut x = a.clone();
    let mut k = 0;
    while (&x - &ident).norm() > 0.1 {
        x = sqrtm(&x)?;
        k += 1;
        if k > 60 {
            return Err(Error::Numerical("logm did not approach the identity".into()));
        }
    }
    let e = &x - &ident;
    let mut term = e.clone();
    let mut sum = e.clone();
    for j in 2..80 {
        term = &term * &e;
        let sign = if j % 2 == 0 { -1.0 } else { 1.0 };
        let add = &term * (sign / j as f64);
        sum += &add;
        if add.norm() < 1e-18 {
            break;
        }
    }
    Ok(sum * 2f64.powi(k))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    // The unbounded Schur iteration can stall on shift-like matrices, so cap it
    // and fall back to Gelfand's formula by repeated squaring.
    let n = m.nrows();
    if let Some(schur) = Schur::try_new(m.clone(), f64::EPSILON, 200 * n.max(10)) {
        return schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    }
    gelfand_radius(m)
}

fn gelfand_radius(m: &DMatrix<f64>) -> f64 {
    let mut b = m.clone();
    let mut log_scale = 0.0;
    let mut power = 1.0;
    for _ in 0..48 {
        let c = b.norm();
        if c == 0.0 {
            return 0.0;
        }
        b /= c;
        log_scale += c.ln() / power;
        b = &b * &b;
        power *= 2.0;
    }
    let c = b.norm();
    if c == 0.0 {
        0.0
    } else {
        (log_scale + c.ln() / power).exp()
    }
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Cholesky factor of a symmetric positive definite matrix, or a numerical
/// error naming `what`.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))
}

pub fn log_det_chol(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Inverse and log-determinant of a symmetric positive definite matrix.
pub fn spd_inverse_logdet(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    let ch = cholesky(m, what)?;
    let ld = log_det_chol(&ch);
    Ok((ch.inverse(), ld))
}

pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s != 0.0 {
                out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * s));
            }
        }
    }
    out
}

pub fn outer(u: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    u * v.transpose()
}
