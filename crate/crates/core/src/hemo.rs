//! Statistical linearization of the Balloon model: small-signal FIR impulse
//! responses and a Gaussian prior over their taps.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balloon::{simulate_region, BalloonParams};
use crate::error::{Error, Result};

/// Impulse area used to probe the small-signal response.
pub const PROBE_AREA: f64 = 1e-4;

/// Ridge added to the tap covariance before it is factorized.
pub const SIGMA_H_JITTER: f64 = 1e-10;

/// FIR taps of one region, spaced by the sampling interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HemoFir {
    #[serde(with = "crate::serde_util::vector")]
    pub taps: DVector<f64>,
    pub t_r: f64,
}

impl HemoFir {
    pub fn new(taps: DVector<f64>, t_r: f64) -> Result<Self> {
        if taps.is_empty() || taps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("FIR taps must be non-empty and finite".into()));
        }
        Ok(Self { taps, t_r })
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// `Σ_l h_l x(k−l)` with zero initial conditions.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        fir_filter(self.taps.as_slice(), x)
    }
}

pub fn fir_filter(h: &[f64], x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            h.iter()
                .enumerate()
                .take(k + 1)
                .map(|(l, hl)| hl * x[k - l])
                .sum()
        })
        .collect()
}

/// Gaussian prior `N(h_bar, sigma_h)` shared by every region's taps.
#[derive(Debug, Clone, PartialEq)]
pub struct FirPrior {
    pub s: usize,
    pub t_r: f64,
    pub h_bar: DVector<f64>,
    pub sigma_h: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct FirPriorFile {
    s: usize,
    #[serde(rename = "T_R")]
    t_r: f64,
    h_bar: Vec<f64>,
    #[serde(rename = "Sigma_h")]
    sigma_h: Vec<Vec<f64>>,
}

impl FirPrior {
    pub fn to_json(&self) -> Result<String> {
        let file = FirPriorFile {
            s: self.s,
            t_r: self.t_r,
            h_bar: self.h_bar.iter().copied().collect(),
            sigma_h: self
                .sigma_h
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: FirPriorFile = serde_json::from_str(text)?;
        let s = file.s;
        if s == 0 || file.h_bar.len() != s || file.sigma_h.len() != s || file.sigma_h.iter().any(|r| r.len() != s) {
            return Err(Error::Shape(format!("FIR prior file is inconsistent with s = {s}")));
        }
        let flat: Vec<f64> = file.sigma_h.into_iter().flatten().collect();
        Ok(Self {
            s,
            t_r: file.t_r,
            h_bar: DVector::from_vec(file.h_bar),
            sigma_h: DMatrix::from_row_slice(s, s, &flat),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Tap covariance with the factorization ridge applied.
    pub fn regularized_sigma(&self) -> DMatrix<f64> {
        &self.sigma_h + DMatrix::identity(self.s, self.s) * SIGMA_H_JITTER
    }

    /// Prior mean taps as a per-region FIR.
    pub fn mean_fir(&self) -> HemoFir {
        HemoFir {
            taps: self.h_bar.clone(),
            t_r: self.t_r,
        }
    }
}

/// Log-scale spread of the perturbed Balloon parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSpread {
    pub kappa: f64,
    pub gamma_f: f64,
    pub tau: f64,
    pub rho: f64,
}

impl LogSpread {
    pub const ZERO: LogSpread = LogSpread {
        kappa: 0.0,
        gamma_f: 0.0,
        tau: 0.0,
        rho: 0.0,
    };
}

impl Default for LogSpread {
    fn default() -> Self {
        Self {
            kappa: 0.015,
            gamma_f: 0.015,
            tau: 0.015,
            rho: 0.015,
        }
    }
}

/// Prior over Balloon parameters: log-normal perturbations of `kappa`,
/// `gamma_f`, `tau` and `rho` around `mean`; `xi` and `V0` are held fixed and
/// `k1`, `k3` follow `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HemoPriorConfig {
    pub mean: BalloonParams,
    pub log_sd: LogSpread,
    /// Integration step used for impulse responses (s).
    pub dt: f64,
}

impl Default for HemoPriorConfig {
    fn default() -> Self {
        Self {
            mean: BalloonParams::default(),
            log_sd: LogSpread::default(),
            dt: 0.05,
        }
    }
}

impl HemoPriorConfig {
    pub fn degenerate(mean: BalloonParams) -> Self {
        Self {
            mean,
            log_sd: LogSpread::ZERO,
            ..Self::default()
        }
    }

    /// One candidate draw; `None` when it leaves the admissible set.
    pub fn propose<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<BalloonParams> {
        let mut pert = |mean: f64, sd: f64| {
            let z: f64 = rng.sample(StandardNormal);
            mean * (sd * z).exp()
        };
        let m = &self.mean;
        let kappa = pert(m.kappa, self.log_sd.kappa);
        let gamma_f = pert(m.gamma_f, self.log_sd.gamma_f);
        let tau = pert(m.tau, self.log_sd.tau);
        let rho = pert(m.rho, self.log_sd.rho);
        let mut p = BalloonParams::with_rates(kappa, gamma_f, tau, rho, m.xi);
        p.v0 = m.v0;
        p.validate().ok().map(|_| p)
    }

    /// Draws until a valid parameter set is found; returns it with the number
    /// of rejected proposals.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(BalloonParams, usize)> {
        for rejected in 0..1000 {
            if let Some(p) = self.propose(rng) {
                return Ok((p, rejected));
            }
        }
        Err(Error::Config("balloon prior rejects almost every draw".into()))
    }
}

fn step_ratio(t_r: f64, dt: f64) -> Result<usize> {
    if !(t_r > 0.0) || !(dt > 0.0) {
        return Err(Error::Argument("sampling interval and step must be positive".into()));
    }
    let ratio = t_r / dt;
    let rounded = ratio.round();
    if rounded < 1.0 || (ratio - rounded).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::Argument(format!("dt = {dt} does not divide T_R = {t_r}")));
    }
    Ok(rounded as usize)
}

/// Raw BOLD response to an impulse of the given area at `t = 0`, sampled at
/// multiples of `t_r`.
pub fn pulse_response(p: &BalloonParams, s: usize, t_r: f64, dt: f64, area: f64) -> Result<DVector<f64>> {
    let ratio = step_ratio(t_r, dt)?;
    if s == 0 {
        return Err(Error::Argument("tap count must be positive".into()));
    }
    let steps = (s - 1) * ratio + 1;
    let mut x = vec![0.0; steps];
    x[0] = area / dt;
    let y = simulate_region(&x, dt, p, 0)?;
    Ok(DVector::from_iterator(s, (0..s).map(|l| y[l * ratio])))
}

/// Small-signal response to a unit-area impulse, sampled at multiples of
/// `t_r`: the FIR taps `h_0 … h_{s−1}`.
pub fn impulse_response(p: &BalloonParams, s: usize, t_r: f64, dt: f64) -> Result<DVector<f64>> {
    if (s as f64) * t_r < 30.0 - 1e-9 {
        return Err(Error::Argument(format!(
            "{s} taps at T_R = {t_r} cover less than 30 s"
        )));
    }
    Ok(pulse_response(p, s, t_r, dt, PROBE_AREA)? / PROBE_AREA)
}

/// Monte-Carlo FIR prior: sample mean and covariance of impulse responses for
/// `num_samples` parameter draws. Draw `i` uses its own counter-based stream,
/// so the result does not depend on the number of worker threads.
pub fn build_fir_prior(
    cfg: &HemoPriorConfig,
    s: usize,
    t_r: f64,
    num_samples: usize,
    seed: u64,
) -> Result<FirPrior> {
    if num_samples < 2 {
        return Err(Error::Argument("need at least two prior samples".into()));
    }
    let draws: Vec<Result<(DVector<f64>, usize)>> = (0..num_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut rejected = 0;
            loop {
                match cfg.propose(&mut rng) {
                    Some(p) => {
                        let h = impulse_response(&p, s, t_r, cfg.dt)?;
                        return Ok((h, rejected));
                    }
                    None => {
                        rejected += 1;
                        if rejected > 1000 {
                            return Err(Error::Config("balloon prior rejects almost every draw".into()));
                        }
                    }
                }
            }
        })
        .collect();

    let mut responses = Vec::with_capacity(num_samples);
    let mut rejected = 0usize;
    for d in draws {
        let (h, r) = d?;
        responses.push(h);
        rejected += r;
    }
    if rejected as f64 > 0.5 * (rejected + num_samples) as f64 {
        return Err(Error::Config(format!(
            "balloon prior rejected {rejected} of {} proposals",
            rejected + num_samples
        )));
    }

    let n = num_samples as f64;
    let mut h_bar = DVector::zeros(s);
    for h in &responses {
        h_bar += h;
    }
    h_bar /= n;
    let mut sigma_h = DMatrix::zeros(s, s);
    for h in &responses {
        let d = h - &h_bar;
        sigma_h += &d * d.transpose();
    }
    sigma_h /= n - 1.0;
    crate::linalg::symmetrize_in_place(&mut sigma_h);
    Ok(FirPrior { s, t_r, h_bar, sigma_h })
}
