//! Joint carrier-frequency-offset (CFO) and wideband MIMO channel estimation
//! for receivers with heavily quantized (one-bit) or full-resolution ADCs.
//!
//! The unknown channel is sparse in the angle-delay domain and the phase-error
//! vector produced by CFO plus Wiener phase noise is compressible in the
//! frequency domain, so the estimation problem is a noisy, quantized, sparse
//! *bilinear* problem. The solver in [`pbigamp`] is a parametric bilinear
//! generalized approximate message passing (PBiGAMP) iteration specialized to
//! the FFT structure of the measurement operator, with Bernoulli-Gaussian
//! priors whose parameters are learned by expectation maximization.
//!
//! Crate layout:
//!
//! - [`kernels`]: unitary DFT convention, Vandermonde vectors, sinc, circulant
//!   column shifts, standard-normal helpers.
//! - [`channel`]: clustered wideband mmWave channel generation and the
//!   antenna-domain / angle-delay-domain conversions.
//! - [`phase`]: CFO / Wiener phase-noise processes and their DFT spectra.
//! - [`training`]: QPSK, Gaussian and shifted Zadoff-Chu training blocks and
//!   the effective training operator.
//! - [`measurement`]: forward models, AWGN, quantizers, SNR calibration.
//! - [`pbigamp`]: the fast solver.
//! - [`estimators`]: channel-tap reconstruction and the scalar CFO extractor.
//! - [`oracle`]: slow, literal reference implementations used for
//!   verification (tensor-form message passing, quadrature moments, grid
//!   least squares, the CFO-propagation identity).
//! - [`harness`]: Monte Carlo experiment runner, metrics, and file outputs.

pub mod channel;
pub mod estimators;
pub mod fixtures;
pub mod harness;
pub mod kernels;
pub mod measurement;
pub mod oracle;
pub mod pbigamp;
pub mod phase;
pub mod training;

use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("digital CFO {0} rad/sample aliases (|eps| >= pi)")]
    CfoAliasing(f64),
    #[error("solver state became non-finite after {attempts} attempt(s)")]
    Divergence { attempts: usize },
    #[error("estimation failed: {0}")]
    EstimationFailed(String),
    #[error("quadrature did not converge")]
    QuadratureNonConvergent,
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod probe_cfo {
    use crate::channel::gen_sparse_angle_delay;
    use crate::estimators::cfo_estimate;
    use crate::measurement::{forward_factored, observe, snr_to_sigma2, Quantizer};
    use crate::pbigamp::{run, GampConfig, Hyperparams};
    use crate::phase::{from_spectrum, gen_phase_errors, to_spectrum, PhaseParams, PhaseSpectrum};
    use crate::training::{assemble_f, gen_training, TrainingKind};
    use num_complex::Complex64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probe_cfo_components() {
        let (nrx, ntx, l, np) = (8usize, 8usize, 4usize, 256usize);
        let eps = 0.1349903093339364;
        let beta = 0.067;
        for seed in 0..6u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let c = gen_sparse_angle_delay(nrx, ntx, l, 8, &mut rng).unwrap();
            let t = gen_training(TrainingKind::IidQpsk, ntx, np, 1.0, &mut rng).unwrap();
            let f = assemble_f(&t, l).unwrap();
            let pp = PhaseParams::new(eps, beta, np).unwrap();
            let d = gen_phase_errors(&pp, &mut rng);
            let b_true = to_spectrum(&d).unwrap();
            let z = forward_factored(&c, &f, &b_true).unwrap();
            let sigma2 = snr_to_sigma2(&t, 30.0).unwrap();
            let y = observe(&z, sigma2, Quantizer::OneBit, &mut rng).unwrap();
            let hp = Hyperparams::init(l, sigma2);
            let cfg = GampConfig { init_seed: seed, ..GampConfig::default() };
            let res = run(&y, &f, &hp, &cfg).unwrap();
            // CFO from the TRUE spectrum (EKF-only error) vs from the estimate.
            let e_true_spec = cfo_estimate(&b_true.b, beta, sigma2 / np as f64).unwrap();
            let e_est = cfo_estimate(&res.b_hat, beta, sigma2 / np as f64).unwrap();
            // Coarse-only: lag-1 autocorr of estimated time samples.
            let m = from_spectrum(&PhaseSpectrum { b: res.b_hat.clone() }).unwrap().d;
            let mut ac = Complex64::new(0.0, 0.0);
            for n in 0..np - 1 {
                ac += m[n + 1] * m[n].conj();
            }
            println!(
                "seed {seed}: ekf-on-true {:.2e}  ekf-on-est {:.2e}  coarse-on-est {:.2e}",
                (e_true_spec - eps).abs(),
                (e_est - eps).abs(),
                (ac.arg() - eps).abs()
            );
        }
    }
}
