//! Block-coordinate maximization of `𝒬 + log p(θ)` in the order
//! connectivity, FIR taps, measurement variance, rates, intensity.

use nalgebra::{DMatrix, DVector};

use super::sbl::SblState;
use super::stats::{dynamic_residual, measurement_residual_trace, EMStats};
use super::{Priors, Theta};
use crate::dynamics::{continuous_generator, NoiseModel};
use crate::error::{Error, Result};
use crate::hemo::{FirPrior, HemoFir};
use crate::linalg::{cholesky, expm, expm_frechet, kron, log_det_chol, symmetrize, van_loan, van_loan_block};
use crate::ssm::StateLayout;

/// Feasible interval for autoregressive rates.
pub const RATE_BOUNDS: (f64, f64) = (-5.0, -0.01);
const EPS_FLOOR: f64 = 1e-8;
const INTENSITY_FLOOR: f64 = 1e-10;
const GOLDEN_TOL: f64 = 1e-4;
const RIDGE: f64 = 1e-8;
/// Quasi-Newton steps on the connectivity per M-step.
const CONNECTIVITY_STEPS: usize = 8;

/// Linearized (`e^{MT_R} ≈ I + M T_R`) Gaussian regression for `a = vec(Aᵀ)`:
/// log-likelihood `−½ aᵀ K a + bᵀ a + const`.
#[derive(Debug, Clone)]
pub struct LinearizedRegression {
    pub precision: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// Per-sample residual covariance `q` of the regression.
    pub noise: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct MStepOutput {
    pub theta: Theta,
    pub warnings: Vec<String>,
}

pub(crate) fn layout_for(theta: &Theta) -> Result<StateLayout> {
    let n = theta.regions();
    let s = theta
        .h
        .first()
        .ok_or_else(|| Error::Shape("at least one region is required".into()))?
        .len();
    Ok(if theta.noise.is_white() {
        StateLayout::white(n, s)
    } else {
        StateLayout::extended(n, s)
    })
}

/// Residual covariance of the regression: `Q_w` for white noise, the
/// `x`-block of `Q_η` otherwise.
pub fn regression_noise(a: &DMatrix<f64>, noise: &NoiseModel, t_r: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let (m, sigma) = continuous_generator(a, noise)?;
    let (_, q) = van_loan(&m, &sigma, t_r)?;
    Ok(if noise.is_white() {
        q
    } else {
        q.view((n, n), (n, n)).into_owned()
    })
}

/// Builds the regression `x(k+1) − x(k) − T_R w(k) ≈ T_R A x(k) + e(k)` from
/// smoothed moments (the `w` term is absent for white noise).
pub fn linearized_regression(
    stats: &EMStats,
    layout: &StateLayout,
    noise_cov: &DMatrix<f64>,
    t_r: f64,
) -> Result<LinearizedRegression> {
    let n = layout.regions;
    if noise_cov.shape() != (n, n) || stats.theta.nrows() != layout.dim {
        return Err(Error::Shape("regression inputs do not match the layout".into()));
    }
    let big_n = stats.samples as f64;
    let xs = layout.x_start();
    let gram = stats.upsilon.view((xs, xs), (n, n)) * big_n;
    let mut cross = (stats.psi.view((xs, xs), (n, n)) - stats.upsilon.view((xs, xs), (n, n))) * big_n;
    if layout.w_len > 0 {
        cross -= stats.upsilon.view((0, xs), (n, n)) * (big_n * t_r);
    }
    let q_inv = cholesky(noise_cov, "regression noise covariance")?.inverse();
    let precision = kron(&q_inv, &gram) * (t_r * t_r);
    let b = (&q_inv * cross) * t_r;
    let rhs = DVector::from_column_slice(b.transpose().as_slice());
    Ok(LinearizedRegression {
        precision,
        rhs,
        noise: noise_cov.clone(),
    })
}

/// Value of the dynamic part of `𝒬` at `(A, noise)` and, optionally, its
/// gradient with respect to `A`.
pub fn dynamic_objective(
    a: &DMatrix<f64>,
    noise: &NoiseModel,
    t_r: f64,
    stats: &EMStats,
    with_gradient: bool,
) -> Result<(f64, Option<DMatrix<f64>>)> {
    let n = a.nrows();
    let (m_gen, sigma) = continuous_generator(a, noise)?;
    let m = m_gen.nrows();
    let x = van_loan_block(&m_gen, &sigma, t_r);
    let e = expm(&x)?;
    let e12 = e.view((0, m), (m, m)).into_owned();
    let e22 = e.view((m, m), (m, m)).into_owned();
    let md = e22.transpose();
    let q = symmetrize(&(&md * &e12));
    let ch = cholesky(&q, "stochastic block of the process covariance")?;
    let r = dynamic_residual(&md, stats);
    let q_inv = ch.inverse();
    let big_n = stats.samples as f64;
    let value = -0.5 * big_n * (m as f64 * (2.0 * std::f64::consts::PI).ln() + log_det_chol(&ch) + (&q_inv * &r).trace());
    if !with_gradient {
        return Ok((value, None));
    }

    let up = stats.upsilon.view((0, 0), (m, m));
    let ps = stats.psi.view((0, 0), (m, m));
    let g_md = -(&q_inv * (&md * up - ps)) * big_n;
    let g_q = (&q_inv - &q_inv * &r * &q_inv) * (-0.5 * big_n);
    let mut g_e = DMatrix::zeros(2 * m, 2 * m);
    g_e.view_mut((0, m), (m, m)).copy_from(&(&e22 * &g_q));
    g_e.view_mut((m, m), (m, m)).copy_from(&(g_md.transpose() + &e12 * &g_q));
    let g_x = expm_frechet(&x.transpose(), &g_e)?;
    let g_m = (g_x.view((m, m), (m, m)).transpose() - g_x.view((0, 0), (m, m))) * t_r;
    let off = m - n;
    Ok((value, Some(g_m.view((off, off), (n, n)).into_owned())))
}

fn dynamic_value(a: &DMatrix<f64>, noise: &NoiseModel, t_r: f64, stats: &EMStats) -> f64 {
    match dynamic_objective(a, noise, t_r, stats, false) {
        Ok((v, _)) if v.is_finite() => v,
        _ => f64::NEG_INFINITY,
    }
}

fn matrix_from_active(n: usize, active: &[usize], x: &DVector<f64>) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    for (r, &idx) in active.iter().enumerate() {
        a[(idx / n, idx % n)] = x[r];
    }
    a
}

/// Connectivity step: maximizes the exact dynamic term plus the Gaussian
/// prior over unpruned entries, starting from the better of the previous
/// value and the linearized MAP solution.
fn update_connectivity(
    stats: &EMStats,
    layout: &StateLayout,
    theta: &Theta,
    sbl: &SblState,
    t_r: f64,
    warnings: &mut Vec<String>,
) -> Result<DMatrix<f64>> {
    let n = theta.regions();
    let active = sbl.active();
    if active.is_empty() {
        return Ok(DMatrix::zeros(n, n));
    }
    let q = regression_noise(&theta.a, &theta.noise, t_r)?;
    let reg = linearized_regression(stats, layout, &q, t_r)?;
    let k = active.len();
    let inv_gamma: Vec<f64> = active.iter().map(|&i| 1.0 / sbl.gamma[i]).collect();
    let mut post = DMatrix::from_fn(k, k, |r, c| reg.precision[(active[r], active[c])]);
    for r in 0..k {
        post[(r, r)] += inv_gamma[r];
    }
    let rhs = DVector::from_fn(k, |r, _| reg.rhs[active[r]]);
    let post_ch = match post.clone().cholesky() {
        Some(ch) => ch,
        None => {
            warnings.push("singular regression normal matrix, ridge added".into());
            cholesky(&(post + DMatrix::identity(k, k) * RIDGE), "regularized regression normal matrix")?
        }
    };
    let h0 = post_ch.inverse();
    let x_lin = post_ch.solve(&rhs);

    let eval = |x: &DVector<f64>, grad: bool| -> Option<(f64, DVector<f64>)> {
        let a = matrix_from_active(n, &active, x);
        let (v, g) = dynamic_objective(&a, &theta.noise, t_r, stats, grad).ok()?;
        let prior: f64 = (0..k).map(|r| x[r] * x[r] * inv_gamma[r]).sum::<f64>() * -0.5;
        let total = v + prior;
        if !total.is_finite() {
            return None;
        }
        let gv = match g {
            Some(g) => DVector::from_fn(k, |r, _| g[(active[r] / n, active[r] % n)] - x[r] * inv_gamma[r]),
            None => DVector::zeros(0),
        };
        Some((total, gv))
    };

    let x_prev = DVector::from_fn(k, |r, _| theta.a[(active[r] / n, active[r] % n)]);
    let (mut x, (mut fx, mut gx)) = match (eval(&x_prev, true), eval(&x_lin, true)) {
        (Some(p), Some(l)) if l.0 > p.0 => (x_lin, l),
        (Some(p), _) => (x_prev, p),
        (None, Some(l)) => (x_lin, l),
        (None, None) => {
            return Err(Error::Numerical("connectivity objective undefined at the current estimate".into()));
        }
    };

    let mut h = h0.clone();
    for _ in 0..CONNECTIVITY_STEPS {
        let mut dir = &h * &gx;
        let mut slope = gx.dot(&dir);
        if !(slope > 0.0) {
            h = h0.clone();
            dir = &h * &gx;
            slope = gx.dot(&dir);
            if !(slope > 0.0) {
                break;
            }
        }
        if slope < 1e-12 * (1.0 + fx.abs()) {
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = &x + &dir * t;
            if let Some((fc, gc)) = eval(&cand, true) {
                if fc >= fx + 1e-4 * t * slope {
                    accepted = Some((cand, fc, gc));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else { break };
        let s = &x_new - &x;
        let yv = &gx - &g_new;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let gain = f_new - fx;
        x = x_new;
        fx = f_new;
        gx = g_new;
        if gain < 1e-12 * (1.0 + fx.abs()) {
            break;
        }
    }
    Ok(matrix_from_active(n, &active, &x))
}

/// Per-region closed-form MAP of the FIR taps:
/// `(N Σ̄ Θ_χχ + ε I) h = N Σ̄ Ξ_χ + ε h̄`.
pub fn update_fir(stats: &EMStats, layout: &StateLayout, eps: f64, prior: &FirPrior) -> Result<Vec<HemoFir>> {
    let s = layout.taps;
    if prior.s != s {
        return Err(Error::Shape(format!("FIR prior has {} taps, model has {s}", prior.s)));
    }
    let big_n = stats.samples as f64;
    let sigma = prior.regularized_sigma();
    (0..layout.regions)
        .map(|i| {
            let idx: Vec<usize> = (0..s).map(|l| layout.x_index(l, i)).collect();
            let th = DMatrix::from_fn(s, s, |r, c| stats.theta[(idx[r], idx[c])]);
            let xi = DVector::from_fn(s, |r, _| stats.xi[(i, idx[r])]);
            let lhs = &sigma * th * big_n + DMatrix::identity(s, s) * eps;
            let rhs = &sigma * xi * big_n + &prior.h_bar * eps;
            let taps = lhs
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Numerical(format!("singular FIR normal equations in region {i}")))?;
            HemoFir::new(taps, prior.t_r)
        })
        .collect()
}

/// `ε = tr(Π − ΞCᵀ − CΞᵀ + CΘCᵀ)/n`, projected onto `ε ≥ 1e−8`.
pub fn update_eps(c: &DMatrix<f64>, stats: &EMStats) -> f64 {
    (measurement_residual_trace(c, stats) / c.nrows() as f64).max(EPS_FLOOR)
}

fn golden_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Golden-section maximization of the dynamic term over each rate in
/// [`RATE_BOUNDS`]; the previous value is kept if it scores higher.
pub fn update_rates(a: &DMatrix<f64>, noise: &NoiseModel, t_r: f64, stats: &EMStats) -> Result<NoiseModel> {
    let (lo, hi) = RATE_BOUNDS;
    let clamp = |l: f64| l.clamp(lo, hi);
    match noise {
        NoiseModel::White { .. } => Ok(noise.clone()),
        NoiseModel::Ar { lambda, delta } => {
            let current = NoiseModel::Ar { lambda: clamp(*lambda), delta: *delta };
            let f = |l: f64| dynamic_value(a, &NoiseModel::Ar { lambda: l, delta: *delta }, t_r, stats);
            let (best, fbest) = golden_max(f, lo, hi, GOLDEN_TOL);
            Ok(if fbest > dynamic_value(a, &current, t_r, stats) {
                NoiseModel::Ar { lambda: best, delta: *delta }
            } else {
                current
            })
        }
        NoiseModel::Var { lambdas, delta } => {
            let mut rates: Vec<f64> = lambdas.iter().map(|&l| clamp(l)).collect();
            for i in 0..rates.len() {
                let with = |l: f64| {
                    let mut r = rates.clone();
                    r[i] = l;
                    NoiseModel::Var { lambdas: r, delta: *delta }
                };
                let (best, fbest) = golden_max(|l| dynamic_value(a, &with(l), t_r, stats), lo, hi, GOLDEN_TOL);
                if fbest > dynamic_value(a, &with(rates[i]), t_r, stats) {
                    rates[i] = best;
                }
            }
            Ok(NoiseModel::Var { lambdas: rates, delta: *delta })
        }
    }
}

/// Closed-form intensity: the stochastic-block covariance is `δ Q₁`, so the
/// maximizer is `tr(Q₁⁻¹ R)/m`, projected onto `δ ≥ 1e−10`.
pub fn update_intensity(a: &DMatrix<f64>, noise: &NoiseModel, t_r: f64, stats: &EMStats) -> Result<NoiseModel> {
    let unit = noise.with_intensity(1.0);
    let (m_gen, sigma) = continuous_generator(a, &unit)?;
    let (md, q1) = van_loan(&m_gen, &sigma, t_r)?;
    let r = dynamic_residual(&md, stats);
    let ch = cholesky(&q1, "unit-intensity process covariance")?;
    let value = ch.solve(&r).trace() / md.nrows() as f64;
    Ok(noise.with_intensity(value.max(INTENSITY_FLOOR)))
}

/// One pass of the block-coordinate M-step.
pub fn m_step(stats: &EMStats, priors: Priors<'_>, theta_prev: &Theta, t_r: f64) -> Result<MStepOutput> {
    let layout = layout_for(theta_prev)?;
    if stats.theta.nrows() != layout.dim {
        return Err(Error::Shape(format!(
            "statistics of dimension {} for a state of dimension {}",
            stats.theta.nrows(),
            layout.dim
        )));
    }
    let mut warnings = Vec::new();
    let mut theta = theta_prev.clone();
    priors.sbl.apply_mask(&mut theta.a);

    theta.a = update_connectivity(stats, &layout, &theta, priors.sbl, t_r, &mut warnings)?;
    theta.h = update_fir(stats, &layout, theta.eps, priors.fir)?;
    let c = theta.assemble(t_r)?.c;
    theta.eps = update_eps(&c, stats);
    theta.noise = update_rates(&theta.a, &theta.noise, t_r, stats)?;
    theta.noise = update_intensity(&theta.a, &theta.noise, t_r, stats)?;
    Ok(MStepOutput { theta, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_stats(m: usize, seed: u64) -> EMStats {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(m, 60, |_, _| rng.random_range(-1.0..1.0));
        let theta = &z.columns(1, 59) * z.columns(1, 59).transpose() / 59.0;
        let upsilon = &z.columns(0, 59) * z.columns(0, 59).transpose() / 59.0;
        let psi = &z.columns(1, 59) * z.columns(0, 59).transpose() / 59.0;
        EMStats {
            theta,
            upsilon,
            psi,
            xi: DMatrix::zeros(1, m),
            pi: DMatrix::zeros(1, 1),
            samples: 59,
        }
    }

    fn check_gradient(noise: NoiseModel, n: usize) {
        let m = if noise.is_white() { n } else { 2 * n };
        let stats = random_stats(m, 3);
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { -0.8 } else { 0.1 * (i as f64 - j as f64) });
        let (_, g) = dynamic_objective(&a, &noise, 2.0, &stats, true).unwrap();
        let g = g.unwrap();
        let h = 1e-6;
        for i in 0..n {
            for j in 0..n {
                let mut ap = a.clone();
                ap[(i, j)] += h;
                let mut am = a.clone();
                am[(i, j)] -= h;
                let fd = (dynamic_objective(&ap, &noise, 2.0, &stats, false).unwrap().0
                    - dynamic_objective(&am, &noise, 2.0, &stats, false).unwrap().0)
                    / (2.0 * h);
                assert!((fd - g[(i, j)]).abs() < 1e-5 * (1.0 + fd.abs()), "({i},{j}) {fd} vs {}", g[(i, j)]);
            }
        }
    }

    #[test]
    fn connectivity_gradient_matches_finite_differences_white() {
        check_gradient(NoiseModel::White { sigma: 0.7 }, 3);
    }

    #[test]
    fn connectivity_gradient_matches_finite_differences_var() {
        check_gradient(NoiseModel::Var { lambdas: vec![-0.4, -0.9], delta: 0.5 }, 2);
    }

    #[test]
    fn golden_section_finds_parabola_peak() {
        let (x, _) = golden_max(|x| -(x + 1.3) * (x + 1.3), -5.0, -0.01, 1e-6);
        assert!((x + 1.3).abs() < 1e-5);
    }

    #[test]
    fn eps_update_on_residual_free_stats_hits_floor() {
        let stats = EMStats {
            theta: DMatrix::zeros(2, 2),
            upsilon: DMatrix::zeros(2, 2),
            psi: DMatrix::zeros(2, 2),
            xi: DMatrix::zeros(1, 2),
            pi: DMatrix::zeros(1, 1),
            samples: 10,
        };
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        assert_eq!(update_eps(&c, &stats), EPS_FLOOR);
    }

    #[test]
    fn intensity_update_is_exact_maximizer() {
        let stats = random_stats(2, 9);
        let a = DMatrix::from_row_slice(2, 2, &[-0.5, 0.2, 0.0, -0.9]);
        let best = update_intensity(&a, &NoiseModel::White { sigma: 1.0 }, 2.0, &stats).unwrap();
        let f = |s: f64| dynamic_value(&a, &NoiseModel::White { sigma: s }, 2.0, &stats);
        let s = best.intensity();
        assert!(f(s) >= f(s * 1.01) && f(s) >= f(s * 0.99));
    }
}
