use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, GenerationNoise};
use crate::balloon::{simulate_bold, BalloonParams};
use crate::dynamics::{continuous_generator, NoiseModel};
use crate::error::{Error, Result};
use crate::linalg::van_loan;
use crate::ssm::{stationary_covariance, LinearSSM};

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum Provenance {
    Synthetic { seed: u64, run: usize, split: String },
    File { path: String },
}

/// BOLD series, one row per scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    #[serde(with = "crate::serde_util::rows")]
    pub y: DMatrix<f64>,
    #[serde(rename = "T_R")]
    pub t_r: f64,
    pub region_names: Vec<String>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, t_r: f64, region_names: Vec<String>, provenance: Provenance) -> Result<Self> {
        if y.nrows() < 2 {
            return Err(Error::Data("a dataset needs at least two scans".into()));
        }
        if region_names.len() != y.ncols() {
            return Err(Error::Shape(format!("{} names for {} regions", region_names.len(), y.ncols())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset values must be finite".into()));
        }
        Ok(Self {
            y,
            t_r,
            region_names,
            provenance,
        })
    }

    pub fn samples(&self) -> usize {
        self.y.nrows()
    }

    pub fn regions(&self) -> usize {
        self.y.ncols()
    }
}

/// Generating parameters of one synthetic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    #[serde(with = "crate::serde_util::rows")]
    pub a: DMatrix<f64>,
    /// Fluctuation model, with the intensity after normalization.
    pub noise: NoiseModel,
    pub balloon: Vec<BalloonParams>,
    /// Measurement-noise variance per region, per split (estimation, test).
    pub noise_var: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRun {
    pub estimation: Dataset,
    pub test: Dataset,
    pub truth: Truth,
}

/// Counter-based substream for run `run`: independent of scheduling.
pub fn run_rng(seed: u64, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    rng
}

pub fn region_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("R{i}")).collect()
}

/// Symmetric square root usable as a sampling factor of a PSD matrix.
fn sampling_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = cov.clone().cholesky() {
        return ch.l();
    }
    let eig = SymmetricEigen::new(cov.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Exact sampled neuronal dynamics at the fine step, with the intensity
/// scaled so that the mean stationary variance of `x` is `neural_std²`.
struct FineDynamics {
    phi: DMatrix<f64>,
    q_factor: DMatrix<f64>,
    init_factor: DMatrix<f64>,
    noise: NoiseModel,
    x_offset: usize,
}

fn fine_dynamics(a: &DMatrix<f64>, unit_noise: &NoiseModel, cfg: &ExperimentConfig) -> Result<FineDynamics> {
    let n = a.nrows();
    let (m, sigma) = continuous_generator(a, unit_noise)?;
    let (phi, q) = van_loan(&m, &sigma, cfg.sim_dt)?;
    let d = phi.nrows();
    let probe = LinearSSM::new(phi.clone(), DMatrix::identity(d, d), q.clone(), 0.0)?;
    let stat = stationary_covariance(&probe)?;
    let x_offset = d - n;
    let mean_var = (0..n).map(|i| stat[(x_offset + i, x_offset + i)]).sum::<f64>() / n as f64;
    let scale = cfg.neural_std * cfg.neural_std / mean_var;
    Ok(FineDynamics {
        q_factor: sampling_factor(&(q * scale)),
        init_factor: sampling_factor(&(stat * scale)),
        noise: unit_noise.with_intensity(scale),
        phi,
        x_offset,
    })
}

fn draw_rates(noise: &GenerationNoise, n: usize, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    match noise {
        GenerationNoise::White => None,
        GenerationNoise::Var {
            rates: Some(r), ..
        } => Some(r.clone()),
        GenerationNoise::Var {
            lambda_min,
            lambda_max,
            shared,
            ..
        } => {
            let mut draw = || {
                // Strictly negative rates on the half-open interval.
                let u: f64 = rng.random();
                lambda_max - (lambda_max - lambda_min) * (1.0 - u)
            };
            if *shared {
                let l = draw();
                Some(vec![l.min(-f64::MIN_POSITIVE); n])
            } else {
                Some((0..n).map(|_| draw().min(-f64::MIN_POSITIVE)).collect())
            }
        }
    }
}

/// Simulates one neuronal trajectory (`steps × n`), started from the
/// stationary distribution.
fn simulate_neural(dynamics: &FineDynamics, n: usize, steps: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let d = dynamics.phi.nrows();
    let mut z = &dynamics.init_factor * gaussian(rng, d);
    let mut x = DMatrix::zeros(steps, n);
    for k in 0..steps {
        x.row_mut(k).copy_from(&z.rows(dynamics.x_offset, n).transpose());
        z = &dynamics.phi * z + &dynamics.q_factor * gaussian(rng, d);
    }
    x
}

fn column_variance(y: &DMatrix<f64>, i: usize) -> f64 {
    let c = y.column(i);
    let mean = c.mean();
    c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (c.len() as f64 - 1.0)
}

/// Noisy and clean BOLD at the fine step (burn-in removed), plus the noise
/// variance used in every region.
pub struct FineBold {
    pub clean: DMatrix<f64>,
    pub noisy: DMatrix<f64>,
    pub noise_var: Vec<f64>,
}

fn simulate_split(
    dynamics: &FineDynamics,
    balloon: &[BalloonParams],
    cfg: &ExperimentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FineBold> {
    let n = balloon.len();
    let ratio = cfg.decimation()?;
    let burn = (cfg.burn_in / cfg.sim_dt).round() as usize;
    let keep = cfg.n_samples * ratio;
    let x = simulate_neural(dynamics, n, burn + keep, rng);
    let bold = simulate_bold::<ChaCha8Rng>(&x, cfg.sim_dt, balloon, None)?;
    let clean = bold.rows(burn, keep).into_owned();
    let mut noisy = clean.clone();
    let mut noise_var = Vec::with_capacity(n);
    for i in 0..n {
        let var = if cfg.snr.is_infinite() { 0.0 } else { column_variance(&clean, i) / cfg.snr };
        let sd = var.sqrt();
        for v in noisy.column_mut(i).iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += sd * e;
        }
        noise_var.push(var);
    }
    Ok(FineBold { clean, noisy, noise_var })
}

fn decimate(y: &DMatrix<f64>, ratio: usize) -> DMatrix<f64> {
    let rows = y.nrows().div_ceil(ratio);
    DMatrix::from_fn(rows, y.ncols(), |k, i| y[(k * ratio, i)])
}

/// Draws the run-specific parameters and simulates the fine-resolution BOLD
/// of the estimation and test splits.
pub fn simulate_run_fine(cfg: &ExperimentConfig, run: usize) -> Result<(Truth, [FineBold; 2])> {
    cfg.validate()?;
    let a = cfg.connectivity();
    let n = a.nrows();
    let mut rng = run_rng(cfg.seed, run);
    let balloon = (0..n)
        .map(|_| cfg.hemo.sample(&mut rng).map(|(p, _)| p))
        .collect::<Result<Vec<_>>>()?;
    let unit_noise = match draw_rates(&cfg.noise_gen, n, &mut rng) {
        None => NoiseModel::White { sigma: 1.0 },
        Some(lambdas) => NoiseModel::Var { lambdas, delta: 1.0 },
    };
    let dynamics = fine_dynamics(&a, &unit_noise, cfg)?;
    let est = simulate_split(&dynamics, &balloon, cfg, &mut rng)?;
    let test = simulate_split(&dynamics, &balloon, cfg, &mut rng)?;
    let truth = Truth {
        a,
        noise: dynamics.noise.clone(),
        balloon,
        noise_var: [est.noise_var.clone(), test.noise_var.clone()],
    };
    Ok((truth, [est, test]))
}

/// Synthetic estimation and test datasets of run `run`; both share the
/// connectivity, fluctuation rates and Balloon parameters but use
/// independent noise.
pub fn generate_synthetic(cfg: &ExperimentConfig, run: usize) -> Result<SyntheticRun> {
    let (truth, [est, test]) = simulate_run_fine(cfg, run)?;
    let ratio = cfg.decimation()?;
    let names = region_names(truth.a.nrows());
    let make = |fine: &FineBold, split: &str| {
        Dataset::new(
            decimate(&fine.noisy, ratio),
            cfg.t_r,
            names.clone(),
            Provenance::Synthetic {
                seed: cfg.seed,
                run,
                split: split.into(),
            },
        )
    };
    Ok(SyntheticRun {
        estimation: make(&est, "estimation")?,
        test: make(&test, "test")?,
        truth,
    })
}
