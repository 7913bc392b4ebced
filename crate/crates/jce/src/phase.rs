//! CFO and Wiener phase-noise generation, and the time-domain / frequency-
//! domain conversions of the phase-error vector.
//!
//! The phase error applied to received sample `n` (n = 1..Np) is
//! `d_n = exp(j (eps n + phi_n))` with `phi_0 = 0` and IID Gaussian
//! increments `phi_n - phi_{n-1} ~ N(0, beta^2)`. Its unitary DFT `b` is the
//! compressible unknown the solver estimates: for small `eps` and `beta` the
//! energy of `b` concentrates in a few bins.

use std::f64::consts::PI;

use ndarray::Array1;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::kernels::Dft;
use crate::{Error, Result};

/// Parameters of the phase-error process.
#[derive(Debug, Clone, Copy)]
pub struct PhaseParams {
    /// Digital-domain CFO in radians per sample; must satisfy `|epsilon| < pi`.
    pub epsilon: f64,
    /// Standard deviation of the Wiener phase-noise increments, radians.
    pub beta: f64,
    /// Block length.
    pub np: usize,
}

impl PhaseParams {
    pub fn new(epsilon: f64, beta: f64, np: usize) -> Result<Self> {
        if epsilon.abs() >= PI {
            return Err(Error::CfoAliasing(epsilon));
        }
        if beta < 0.0 {
            return Err(Error::InvalidArgument("beta must be >= 0".into()));
        }
        if np == 0 {
            return Err(Error::InvalidDimension("Np must be >= 1".into()));
        }
        Ok(Self { epsilon, beta, np })
    }
}

/// Unit-modulus time-domain phase errors `d`.
#[derive(Debug, Clone)]
pub struct PhaseErrorVector {
    pub d: Array1<Complex64>,
}

/// Unitary DFT of the phase-error vector; `norm(b) = sqrt(Np)`.
#[derive(Debug, Clone)]
pub struct PhaseSpectrum {
    pub b: Array1<Complex64>,
}

/// Draw one realization of the phase-error vector.
pub fn gen_phase_errors<R: Rng>(p: &PhaseParams, rng: &mut R) -> PhaseErrorVector {
    let mut d = Array1::default(p.np);
    let mut phi = 0.0f64;
    if p.beta > 0.0 {
        let incr = Normal::new(0.0, p.beta).expect("beta checked nonnegative");
        for n in 1..=p.np {
            phi += incr.sample(rng);
            d[n - 1] = Complex64::from_polar(1.0, p.epsilon * n as f64 + phi);
        }
    } else {
        for n in 1..=p.np {
            d[n - 1] = Complex64::from_polar(1.0, p.epsilon * n as f64);
        }
    }
    PhaseErrorVector { d }
}

/// `b = U_Np d`.
pub fn to_spectrum(d: &PhaseErrorVector) -> Result<PhaseSpectrum> {
    let dft = Dft::new(d.d.len())?;
    Ok(PhaseSpectrum {
        b: dft.forward(d.d.view()),
    })
}

/// `d = U_Np* b`.
pub fn from_spectrum(b: &PhaseSpectrum) -> Result<PhaseErrorVector> {
    let dft = Dft::new(b.b.len())?;
    Ok(PhaseErrorVector {
        d: dft.inverse(b.b.view()),
    })
}

/// Convert an oscillator offset in parts-per-million of the carrier `f1` to
/// the digital-domain CFO `eps = 2 pi (ppm 1e-6 f1) T` (radians per sample).
pub fn ppm_to_digital(ppm: f64, f1: f64, symbol_period: f64) -> Result<f64> {
    let eps = 2.0 * PI * ppm * 1e-6 * f1 * symbol_period;
    if eps.abs() >= PI {
        return Err(Error::CfoAliasing(eps));
    }
    Ok(eps)
}
