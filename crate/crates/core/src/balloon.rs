//! Balloon–Windkessel hemodynamics: a 4-state nonlinear ODE per region that
//! maps neuronal activity to a BOLD signal.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible value of inflow, volume and deoxyhemoglobin.
pub const DOMAIN_FLOOR: f64 = 1e-9;

/// Biophysical constants of one region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalloonParams {
    /// Signal decay rate (1/s).
    pub kappa: f64,
    /// Autoregulatory feedback rate (1/s).
    pub gamma_f: f64,
    /// Hemodynamic transit time (s).
    pub tau: f64,
    /// Resting oxygen extraction fraction.
    pub rho: f64,
    /// Grubb stiffness exponent.
    pub xi: f64,
    /// Resting blood volume fraction.
    pub v0: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

impl Default for BalloonParams {
    fn default() -> Self {
        Self::with_rates(0.65, 0.41, 0.98, 0.34, 0.32)
    }
}

impl BalloonParams {
    /// Builds a parameter set with the output constants tied to `rho`
    /// (`k1 = 7ρ`, `k2 = 2`, `k3 = 2ρ − 0.2`) and `V0 = 0.4`.
    pub fn with_rates(kappa: f64, gamma_f: f64, tau: f64, rho: f64, xi: f64) -> Self {
        Self {
            kappa,
            gamma_f,
            tau,
            rho,
            xi,
            v0: 0.4,
            k1: 7.0 * rho,
            k2: 2.0,
            k3: 2.0 * rho - 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.tau > 0.0
            && self.rho > 0.0
            && self.rho < 1.0
            && self.xi > 0.0
            && self.v0 > 0.0
            && [self.kappa, self.gamma_f, self.k1, self.k2, self.k3]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid balloon parameters {self:?}")))
        }
    }
}

/// Hemodynamic state of one region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalloonState {
    /// Vasodilatory signal.
    pub r: f64,
    /// Blood inflow.
    pub f: f64,
    /// Blood volume.
    pub v: f64,
    /// Deoxyhemoglobin content.
    pub q: f64,
}

impl BalloonState {
    pub const EQUILIBRIUM: BalloonState = BalloonState {
        r: 0.0,
        f: 1.0,
        v: 1.0,
        q: 1.0,
    };

    fn axpy(&self, h: f64, d: &BalloonState) -> BalloonState {
        BalloonState {
            r: self.r + h * d.r,
            f: self.f + h * d.f,
            v: self.v + h * d.v,
            q: self.q + h * d.q,
        }
    }

    fn check(&self) -> Result<()> {
        for (name, val) in [("f", self.f), ("v", self.v), ("q", self.q)] {
            if !(val > DOMAIN_FLOOR) {
                return Err(Error::Domain(format!("{name} = {val} is not positive")));
            }
        }
        Ok(())
    }
}

/// Time derivative of the hemodynamic state under neuronal input `x_in`.
pub fn balloon_derivatives(s: &BalloonState, x_in: f64, p: &BalloonParams) -> Result<BalloonState> {
    s.check()?;
    let inv_xi = 1.0 / p.xi;
    let outflow = s.v.powf(inv_xi);
    let extraction = (s.f / p.rho) * (1.0 - (1.0 - p.rho).powf(1.0 / s.f));
    Ok(BalloonState {
        r: x_in - p.kappa * s.r - p.gamma_f * (s.f - 1.0),
        f: s.r,
        v: (s.f - outflow) / p.tau,
        q: (extraction - s.v.powf(inv_xi - 1.0) * s.q) / p.tau,
    })
}

/// Noise-free BOLD signal of a hemodynamic state.
pub fn bold_output(s: &BalloonState, p: &BalloonParams) -> Result<f64> {
    if !(s.v > DOMAIN_FLOOR) {
        return Err(Error::Domain(format!("v = {} is not positive", s.v)));
    }
    Ok(p.v0 * (p.k1 * (1.0 - s.q) + p.k2 * (1.0 - s.q / s.v) + p.k3 * (1.0 - s.v)))
}

/// One classical RK4 step with the input evaluated at the start, middle and
/// end of the step.
pub fn rk4_step(
    s: &BalloonState,
    inputs: [f64; 3],
    dt: f64,
    p: &BalloonParams,
) -> Result<BalloonState> {
    let k1 = balloon_derivatives(s, inputs[0], p)?;
    let k2 = balloon_derivatives(&s.axpy(0.5 * dt, &k1), inputs[1], p)?;
    let k3 = balloon_derivatives(&s.axpy(0.5 * dt, &k2), inputs[1], p)?;
    let k4 = balloon_derivatives(&s.axpy(dt, &k3), inputs[2], p)?;
    let out = BalloonState {
        r: s.r + dt / 6.0 * (k1.r + 2.0 * k2.r + 2.0 * k3.r + k4.r),
        f: s.f + dt / 6.0 * (k1.f + 2.0 * k2.f + 2.0 * k3.f + k4.f),
        v: s.v + dt / 6.0 * (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v),
        q: s.q + dt / 6.0 * (k1.q + 2.0 * k2.q + 2.0 * k3.q + k4.q),
    };
    out.check()?;
    Ok(out)
}

/// Integrates one region driven by a continuous input function and returns
/// the BOLD output at `t = 0, dt, …, (steps-1)·dt`.
pub fn simulate_region_fn(
    input: impl Fn(f64) -> f64,
    steps: usize,
    dt: f64,
    p: &BalloonParams,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Argument(format!("dt must be positive, got {dt}")));
    }
    p.validate()?;
    let mut state = BalloonState::EQUILIBRIUM;
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        out.push(bold_output(&state, p)?);
        let t = k as f64 * dt;
        state = rk4_step(&state, [input(t), input(t + 0.5 * dt), input(t + dt)], dt, p).map_err(
            |e| Error::Integration {
                step: k,
                region: 0,
                detail: e.to_string(),
            },
        )?;
    }
    Ok(out)
}

/// Integrates one region with the input held constant over each step.
pub fn simulate_region(x: &[f64], dt: f64, p: &BalloonParams, region: usize) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Argument(format!("dt must be positive, got {dt}")));
    }
    p.validate()?;
    let mut state = BalloonState::EQUILIBRIUM;
    let mut out = Vec::with_capacity(x.len());
    for (k, &xk) in x.iter().enumerate() {
        if !xk.is_finite() {
            return Err(Error::Argument(format!("non-finite input at step {k}, region {region}")));
        }
        out.push(bold_output(&state, p).map_err(|e| Error::Integration {
            step: k,
            region,
            detail: e.to_string(),
        })?);
        state = rk4_step(&state, [xk; 3], dt, p).map_err(|e| Error::Integration {
            step: k,
            region,
            detail: e.to_string(),
        })?;
    }
    Ok(out)
}

/// BOLD series for every region of a `steps × regions` neuronal series.
///
/// Row `k` of the output is the signal at `t = k·dt`, before input `k` acts.
/// When `noise` is given, i.i.d. Gaussian noise of the stated variance is
/// added to every sample.
pub fn simulate_bold<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    dt: f64,
    params: &[BalloonParams],
    noise: Option<(f64, &mut R)>,
) -> Result<DMatrix<f64>> {
    let (steps, regions) = x.shape();
    if params.len() != regions {
        return Err(Error::Shape(format!(
            "{} parameter sets for {regions} regions",
            params.len()
        )));
    }
    let mut y = DMatrix::zeros(steps, regions);
    for (i, p) in params.iter().enumerate() {
        let col: Vec<f64> = x.column(i).iter().copied().collect();
        let out = simulate_region(&col, dt, p, i)?;
        y.column_mut(i).copy_from_slice(&out);
    }
    if let Some((var, rng)) = noise {
        if var < 0.0 || !var.is_finite() {
            return Err(Error::Argument(format!("noise variance {var} is invalid")));
        }
        let sd = var.sqrt();
        for v in y.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sd * z;
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equilibrium_is_fixed_point() {
        let d = balloon_derivatives(&BalloonState::EQUILIBRIUM, 0.0, &BalloonParams::default()).unwrap();
        assert_eq!((d.r, d.f, d.v), (0.0, 0.0, 0.0));
        assert!(d.q.abs() < 1e-15);
    }

    #[test]
    fn unit_input_at_equilibrium() {
        let d = balloon_derivatives(&BalloonState::EQUILIBRIUM, 1.0, &BalloonParams::default()).unwrap();
        assert_eq!((d.r, d.f, d.v), (1.0, 0.0, 0.0));
        assert!(d.q.abs() < 1e-15);
    }

    #[test]
    fn negative_volume_is_domain_error() {
        let s = BalloonState { v: -0.1, ..BalloonState::EQUILIBRIUM };
        let e = balloon_derivatives(&s, 0.0, &BalloonParams::default());
        assert!(matches!(e, Err(Error::Domain(_))));
    }

    #[test]
    fn bold_output_cases() {
        let p = BalloonParams::default();
        assert_eq!(bold_output(&BalloonState::EQUILIBRIUM, &p).unwrap(), 0.0);
        let s = BalloonState { q: 0.8, ..BalloonState::EQUILIBRIUM };
        assert_relative_eq!(
            bold_output(&s, &p).unwrap(),
            0.4 * (p.k1 + p.k2) * 0.2,
            max_relative = 1e-14
        );
        let s = BalloonState { v: 0.0, ..BalloonState::EQUILIBRIUM };
        assert!(matches!(bold_output(&s, &p), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_input_stays_at_rest() {
        let x = DMatrix::zeros(400, 3);
        let p = vec![BalloonParams::default(); 3];
        let y = simulate_bold::<ChaCha8Rng>(&x, 0.05, &p, None).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn noise_is_added_with_requested_variance() {
        let x = DMatrix::zeros(20000, 1);
        let p = vec![BalloonParams::default()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = simulate_bold(&x, 0.05, &p, Some((0.25, &mut rng))).unwrap();
        let var = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        assert!((var - 0.25).abs() < 0.02);
    }

    #[test]
    fn excessive_input_reports_step_and_region() {
        let mut x = DMatrix::zeros(2000, 2);
        for k in 0..2000 {
            x[(k, 1)] = -20.0;
        }
        let p = vec![BalloonParams::default(); 2];
        match simulate_bold::<ChaCha8Rng>(&x, 0.05, &p, None) {
            Err(Error::Integration { region, step, .. }) => {
                assert_eq!(region, 1);
                assert!(step > 0);
            }
            other => panic!("expected integration error, got {other:?}"),
        }
    }

    #[test]
    fn adding_a_silent_region_changes_nothing() {
        let steps = 600;
        let mut x1 = DMatrix::zeros(steps, 1);
        let mut x2 = DMatrix::zeros(steps, 2);
        for k in 0..steps {
            let v = (k as f64 * 0.05).sin() * 0.3;
            x1[(k, 0)] = v;
            x2[(k, 0)] = v;
        }
        let p = BalloonParams::default();
        let y1 = simulate_bold::<ChaCha8Rng>(&x1, 0.05, &[p], None).unwrap();
        let y2 = simulate_bold::<ChaCha8Rng>(&x2, 0.05, &[p, p], None).unwrap();
        assert_eq!(y1.column(0), y2.column(0));
        assert!(y2.column(1).iter().all(|v| *v == 0.0));
    }
}
