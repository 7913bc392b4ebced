//! Post-processing of the solver outputs: antenna-domain tap reconstruction
//! and scalar CFO extraction from the estimated phase-error spectrum.
//!
//! CFO extraction is a single-tone frequency estimation problem on the time
//! samples `m = U_Np* b_hat`. A lag-1 autocorrelation estimate initializes an
//! extended Kalman filter with state `(theta, eps)` that tracks the phase
//! ramp through the Wiener phase noise; the filter's frequency state is the
//! returned estimate.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::channel::{from_angle_delay, AngleDelayChannel, WidebandChannel};
use crate::kernels::{wrap_angle, Dft};
use crate::{Error, Result};

/// Extended Kalman filter state for phase/frequency tracking.
///
/// State vector `(theta, eps)`: accumulated phase and per-sample frequency.
/// The transition is `theta' = theta + eps + w`, `eps' = eps + drift`, with
/// `w ~ N(0, beta^2)`; the measurement is the per-sample phase innovation.
#[derive(Debug, Clone)]
pub struct EkfState {
    pub theta: f64,
    pub eps: f64,
    /// 2x2 covariance, kept symmetric positive-definite.
    pub cov: [[f64; 2]; 2],
    /// Process noise: phase-increment variance (`beta^2`) and frequency
    /// drift variance.
    pub q_theta: f64,
    pub q_eps: f64,
    /// Measurement noise variance of the phase innovation.
    pub r_meas: f64,
}

impl EkfState {
    pub fn new(theta0: f64, eps0: f64, beta: f64, r_meas: f64) -> Self {
        Self {
            theta: theta0,
            eps: eps0,
            cov: [[1.0, 0.0], [0.0, 1.0]],
            q_theta: beta * beta,
            q_eps: 1e-12,
            r_meas: r_meas.max(1e-9),
        }
    }

    fn predict(&mut self) {
        self.theta += self.eps;
        let p = self.cov;
        // F = [[1, 1], [0, 1]]; P <- F P F' + Q.
        let p00 = p[0][0] + p[0][1] + p[1][0] + p[1][1] + self.q_theta;
        let p01 = p[0][1] + p[1][1];
        let p10 = p[1][0] + p[1][1];
        let p11 = p[1][1] + self.q_eps;
        self.cov = [[p00, 0.5 * (p01 + p10)], [0.5 * (p01 + p10), p11]];
    }

    /// Scalar update with measurement `H = [1, 0]` and innovation `y`.
    fn update(&mut self, innovation: f64) {
        let p = self.cov;
        let s = p[0][0] + self.r_meas;
        let k0 = p[0][0] / s;
        let k1 = p[1][0] / s;
        self.theta += k0 * innovation;
        self.eps += k1 * innovation;
        // Joseph form keeps the covariance positive-definite.
        let a = [[1.0 - k0, 0.0], [-k1, 1.0]];
        let mut ap = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                ap[i][j] = a[i][0] * p[0][j] + a[i][1] * p[1][j];
            }
        }
        let mut new_p = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                new_p[i][j] = ap[i][0] * a[j][0] + ap[i][1] * a[j][1];
            }
        }
        new_p[0][0] += k0 * k0 * self.r_meas;
        new_p[0][1] += k0 * k1 * self.r_meas;
        new_p[1][0] += k1 * k0 * self.r_meas;
        new_p[1][1] += k1 * k1 * self.r_meas;
        let sym = 0.5 * (new_p[0][1] + new_p[1][0]);
        self.cov = [[new_p[0][0], sym], [sym, new_p[1][1]]];
    }
}

/// Rebuild antenna-domain taps from a solver channel estimate.
pub fn reconstruct_taps(
    c_hat: &Array2<Complex64>,
    ntx: usize,
    taps: usize,
    symbol_period: f64,
) -> Result<WidebandChannel> {
    if c_hat.ncols() != ntx * taps {
        return Err(Error::InvalidDimension(format!(
            "channel estimate has {} columns, expected {}",
            c_hat.ncols(),
            ntx * taps
        )));
    }
    let c = AngleDelayChannel { c: c_hat.clone(), ntx, taps };
    from_angle_delay(&c, symbol_period)
}

/// Estimate the digital-domain CFO from the phase-error spectrum estimate.
///
/// `sigma2_eff` sets the EKF measurement noise (the harness passes the
/// post-combining level `sigma^2 / Np`). Returns the frequency wrapped to
/// `(-pi, pi]`.
pub fn cfo_estimate(b_hat: &Array1<Complex64>, beta: f64, sigma2_eff: f64) -> Result<f64> {
    let np = b_hat.len();
    if np < 2 {
        return Err(Error::InvalidDimension("need at least 2 samples".into()));
    }
    let dft = Dft::new(np)?;
    let m = dft.inverse(b_hat.view());
    let total_energy: f64 = m.iter().map(|v| v.norm_sqr()).sum();
    let mean_energy = total_energy / np as f64;
    if !(mean_energy > 0.0) || mean_energy < 1e-24 {
        return Err(Error::EstimationFailed("phase samples are all near zero".into()));
    }

    // Coarse init: lag-1 autocorrelation (unbiased for off-grid tones).
    let mut acorr = Complex64::new(0.0, 0.0);
    for n in 0..np - 1 {
        acorr += m[n + 1] * m[n].conj();
    }
    let eps0 = if acorr.norm() >= 0.1 * total_energy {
        acorr.arg()
    } else {
        // Fallback: dominant DFT bin, mapped to (-pi, pi].
        let kmax = b_hat
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm_sqr().partial_cmp(&b.1.norm_sqr()).unwrap())
            .map(|(k, _)| k)
            .unwrap_or(0);
        let k = if kmax > np / 2 { kmax as f64 - np as f64 } else { kmax as f64 };
        2.0 * std::f64::consts::PI * k / np as f64
    };

    // Normalize out the global phase against the first usable sample; this
    // makes the estimate exactly invariant to rotations of b_hat.
    let amp_floor = mean_energy.sqrt() * 1e-6;
    let anchor = m.iter().find(|v| v.norm() >= amp_floor).copied().unwrap_or(m[0]);
    let anchor = anchor / anchor.norm();
    let m: Array1<Complex64> = m.mapv(|v| v * anchor.conj());

    // EKF over the amplitude-normalized phase innovations.
    let r_meas = (sigma2_eff / mean_energy.max(1e-300)).max(1e-9);
    let mut ekf = EkfState::new(m[0].arg(), eps0, beta, r_meas);
    ekf.cov = [[0.5, 0.0], [0.0, (2.0 * std::f64::consts::PI / np as f64).powi(2) * 4.0]];
    for n in 1..np {
        ekf.predict();
        if m[n].norm() < amp_floor {
            continue;
        }
        let innovation = (m[n] * Complex64::from_polar(1.0, -ekf.theta)).arg();
        ekf.update(innovation);
        debug_assert!(ekf.cov[0][0] > 0.0 && ekf.cov[1][1] > 0.0);
    }
    Ok(wrap_angle(ekf.eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{gen_sparse_angle_delay, to_angle_delay};
    use crate::kernels::fro_norm_sq;
    use crate::phase::{gen_phase_errors, to_spectrum, PhaseParams};
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    use std::f64::consts::PI;

    fn tone_spectrum(np: usize, eps: f64, beta: f64, seed: u64) -> Array1<Complex64> {
        let p = PhaseParams::new(eps, beta, np).unwrap();
        let mut rng = StdRng::seed_from_u64(seed);
        to_spectrum(&gen_phase_errors(&p, &mut rng)).unwrap().b
    }

    #[test]
    fn reconstruct_taps_roundtrip() {
        let mut rng = StdRng::seed_from_u64(1);
        let c = gen_sparse_angle_delay(4, 4, 2, 4, &mut rng).unwrap();
        let h = reconstruct_taps(&c.c, 4, 2, 1e-8).unwrap();
        let back = to_angle_delay(&h).unwrap();
        assert!(fro_norm_sq(&(&back.c - &c.c)) < 1e-20);
        assert!(reconstruct_taps(&c.c, 4, 3, 1e-8).is_err());
    }

    #[test]
    fn noiseless_on_grid_tone_recovered_exactly() {
        let np = 256;
        let eps = 2.0 * PI * 5.0 / np as f64;
        let b = tone_spectrum(np, eps, 0.0, 1);
        let got = cfo_estimate(&b, 0.0, 1e-9).unwrap();
        assert!((got - eps).abs() < 1e-6, "err {}", (got - eps).abs());
    }

    #[test]
    fn zero_cfo_spike_gives_zero() {
        let np = 64;
        let mut b = Array1::default(np);
        b[0] = Complex64::new((np as f64).sqrt(), 0.0);
        let got = cfo_estimate(&b, 0.0, 1e-9).unwrap();
        assert!(got.abs() < 1e-9);
    }

    #[test]
    fn off_grid_tone_with_phase_noise() {
        let np = 1024;
        let eps = 45.0 * PI / 1024.0;
        let mut worst: f64 = 0.0;
        for seed in 0..8 {
            let b = tone_spectrum(np, eps, 0.067, seed);
            let got = cfo_estimate(&b, 0.067, 1e-6).unwrap();
            worst = worst.max((got - eps).abs());
        }
        // Phase-noise-limited accuracy, not exact recovery.
        assert!(worst < 1e-2, "worst error {worst}");
    }

    #[test]
    fn estimate_invariant_under_global_phase() {
        let np = 128;
        let eps = 2.0 * PI * 7.3 / np as f64;
        let b = tone_spectrum(np, eps, 0.02, 3);
        let e1 = cfo_estimate(&b, 0.02, 1e-6).unwrap();
        let rotated = b.mapv(|v| v * Complex64::from_polar(1.0, 1.234));
        let e2 = cfo_estimate(&rotated, 0.02, 1e-6).unwrap();
        // The rotation passes through the DFT, so agreement is to rounding,
        // not bitwise.
        assert!((e1 - e2).abs() < 1e-12, "{e1} vs {e2}");
    }

    #[test]
    fn error_decreases_with_block_length() {
        let eps_rel = 10.5; // same relative off-grid position at each size
        let mut prev = f64::INFINITY;
        for &np in &[64usize, 256, 1024] {
            let eps = 2.0 * PI * eps_rel / np as f64;
            let mut errs: Vec<f64> = (0..9)
                .map(|seed| {
                    let b = tone_spectrum(np, eps, 0.0, seed);
                    (cfo_estimate(&b, 0.0, 1e-9).unwrap() - eps).abs()
                })
                .collect();
            errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = errs[4];
            // Monotone decrease down to the arithmetic floor.
            assert!(
                med <= prev.max(1e-12),
                "median error grew at Np={np}: {med} > {prev}"
            );
            assert!(med < 1e-9, "noiseless tone error {med} at Np={np}");
            prev = med;
        }
    }

    #[test]
    fn degenerate_input_is_rejected() {
        let b = Array1::from_elem(32, Complex64::new(0.0, 0.0));
        assert!(cfo_estimate(&b, 0.0, 1e-9).is_err());
    }
}
