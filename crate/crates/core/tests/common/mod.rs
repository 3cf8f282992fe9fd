//! Shared oracles and random instances for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use restec::hemo::{FirPrior, HemoFir};
use restec::inference::InitialState;
use restec::linalg::spectral_radius;
use restec::ssm::LinearSSM;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

/// Random Hurwitz matrix: Gaussian entries shifted left of the imaginary axis.
pub fn hurwitz(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> DMatrix<f64> {
    let m = gaussian_matrix(rng, n, n) * (0.5 / (n as f64).sqrt());
    let shift = m
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    m - DMatrix::identity(n, n) * (shift + margin)
}

/// Random matrix with spectral radius `radius`.
pub fn contraction(rng: &mut ChaCha8Rng, d: usize, radius: f64) -> DMatrix<f64> {
    let m = gaussian_matrix(rng, d, d);
    let r = spectral_radius(&m).max(1e-12);
    m * (radius / r)
}

/// Random PSD matrix of the given rank.
pub fn psd(rng: &mut ChaCha8Rng, d: usize, rank: usize, scale: f64) -> DMatrix<f64> {
    let b = gaussian_matrix(rng, d, rank);
    &b * b.transpose() * (scale / rank.max(1) as f64)
}

pub fn sqrt_psd(p: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(p.clone());
    let d = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&d)
}

/// Samples `N` observations (rows) from a linear-Gaussian model.
pub fn simulate(ssm: &LinearSSM, init: &InitialState, steps: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let d = ssm.dim();
    let n = ssm.outputs();
    let q = sqrt_psd(&ssm.q);
    let mut z = &init.mean + sqrt_psd(&init.cov) * DVector::from_fn(d, |_, _| normal(rng));
    let mut y = DMatrix::zeros(steps, n);
    for k in 0..steps {
        z = &ssm.f * &z + &q * DVector::from_fn(d, |_, _| normal(rng));
        let yk = &ssm.c * &z;
        for i in 0..n {
            y[(k, i)] = yk[i] + ssm.eps.sqrt() * normal(rng);
        }
    }
    y
}

/// Posterior of the stacked states `z(0), …, z(N)` given the first `upto`
/// observations, by brute-force joint Gaussian conditioning.
pub struct DensePosterior {
    pub d: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl DensePosterior {
    pub fn mean_at(&self, k: usize) -> DVector<f64> {
        self.mean.rows(k * self.d, self.d).into_owned()
    }

    pub fn cov_at(&self, j: usize, k: usize) -> DMatrix<f64> {
        self.cov.view((j * self.d, k * self.d), (self.d, self.d)).into_owned()
    }
}

pub fn dense_posterior(ssm: &LinearSSM, init: &InitialState, y: &DMatrix<f64>, upto: usize) -> DensePosterior {
    let d = ssm.dim();
    let n = ssm.outputs();
    let steps = y.nrows();
    let total = (steps + 1) * d;
    // Prior moments of the stacked state.
    let mut mean = DVector::zeros(total);
    let mut marg = vec![init.cov.clone()];
    let mut m = init.mean.clone();
    mean.rows_mut(0, d).copy_from(&m);
    for k in 1..=steps {
        m = &ssm.f * &m;
        mean.rows_mut(k * d, d).copy_from(&m);
        let p = &ssm.f * &marg[k - 1] * ssm.f.transpose() + &ssm.q;
        marg.push(p);
    }
    let mut cov = DMatrix::zeros(total, total);
    for j in 0..=steps {
        let mut block = marg[j].clone();
        for k in j..=steps {
            if k > j {
                block = &ssm.f * block;
            }
            // Cov(z_k, z_j) = F^{k−j} Σ_j.
            cov.view_mut((k * d, j * d), (d, d)).copy_from(&block);
            cov.view_mut((j * d, k * d), (d, d)).copy_from(&block.transpose());
        }
    }
    if upto == 0 {
        return DensePosterior { d, mean, cov };
    }
    // Observation operator for y_1..y_upto.
    let mut h = DMatrix::zeros(upto * n, total);
    for k in 1..=upto {
        h.view_mut(((k - 1) * n, k * d), (n, d)).copy_from(&ssm.c);
    }
    let obs: DVector<f64> = DVector::from_iterator(upto * n, (0..upto).flat_map(|k| y.row(k).iter().copied().collect::<Vec<_>>()));
    let s = &h * &cov * h.transpose() + DMatrix::identity(upto * n, upto * n) * ssm.eps;
    let ch = s.cholesky().expect("observation covariance is positive definite");
    let innov = obs - &h * &mean;
    let hc = &h * &cov;
    let post_mean = &mean + hc.transpose() * ch.solve(&innov);
    let post_cov = &cov - hc.transpose() * ch.solve(&hc);
    DensePosterior {
        d,
        mean: post_mean,
        cov: post_cov,
    }
}

/// A small generic model with a singular process covariance.
pub fn random_model(rng: &mut ChaCha8Rng, d: usize, n: usize) -> (LinearSSM, InitialState) {
    let f = contraction(rng, d, 0.9);
    let c = gaussian_matrix(rng, n, d);
    let q = psd(rng, d, (d - 1).max(1), 0.5);
    let eps = 0.05 + rng.random::<f64>() * 0.5;
    let ssm = LinearSSM::new(f, c, q, eps).unwrap();
    let init = InitialState {
        mean: DVector::from_fn(d, |_, _| normal(rng)),
        cov: psd(rng, d, d, 1.0),
    };
    (ssm, init)
}

/// FIR prior with a short, decaying response (no Balloon integration).
pub fn toy_fir_prior(s: usize, t_r: f64) -> FirPrior {
    let h_bar = DVector::from_fn(s, |l, _| if l == 0 { 0.0 } else { (l as f64) * (-(l as f64) * 0.8).exp() });
    let sigma_h = DMatrix::from_fn(s, s, |i, j| 0.01 * (-((i as f64 - j as f64).abs())).exp());
    FirPrior { s, t_r, h_bar, sigma_h }
}

pub fn fir_set(prior: &FirPrior, n: usize) -> Vec<HemoFir> {
    vec![HemoFir::new(prior.h_bar.clone(), prior.t_r).unwrap(); n]
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

/// Composite trapezoid rule for `∫₀ᵗ e^{Mτ} Σ e^{Mᵀτ} dτ`, stepping the
/// exponential by repeated multiplication with `e^{M t/panels}`.
pub fn trapezoid_noise_integral(m: &DMatrix<f64>, sigma: &DMatrix<f64>, t: f64, panels: usize) -> DMatrix<f64> {
    let d = m.nrows();
    let h = t / panels as f64;
    let step_t = restec::linalg::expm(&(m * h)).unwrap().transpose();
    // Tracks (e^{Mτ})ᵀ so every product is a plain gemm.
    let mut et = DMatrix::identity(d, d);
    let mut next = DMatrix::zeros(d, d);
    let mut es = DMatrix::zeros(d, d);
    let mut acc = sigma * 0.5;
    for k in 1..=panels {
        next.gemm(1.0, &et, &step_t, 0.0);
        std::mem::swap(&mut et, &mut next);
        // e σ = (σᵀ eᵀ)ᵀ and e σ eᵀ = (e σ) eᵀ.
        es.gemm_tr(1.0, &et, sigma, 0.0);
        let w = if k == panels { 0.5 } else { 1.0 };
        acc.gemm(w, &es, &et, 1.0);
    }
    acc * h
}

pub fn rel_frobenius(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
    (got - want).norm() / want.norm()
}
