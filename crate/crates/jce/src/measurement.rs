//! Forward measurement model: noiseless received block, AWGN, quantization,
//! and SNR calibration.
//!
//! Two independent evaluation paths are provided and cross-checked in tests:
//! the tapwise sum `Z = sum_l H[l] T J_l diag(d)` and the factored form
//! `Z = U_rx C F diag(U_Np* b)`. The factored path is the one the solver's
//! fast kernels are built on.

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::channel::{AngleDelayChannel, WidebandChannel};
use crate::kernels::{circ_shift_columns, fro_norm_sq, Dft};
use crate::phase::{PhaseErrorVector, PhaseSpectrum};
use crate::training::{EffectiveTraining, TrainingBlock};
use crate::{Error, Result};

/// ADC resolution: one-bit sign quantization or unquantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantizer {
    OneBit,
    Full,
}

impl std::fmt::Display for Quantizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Quantizer::OneBit => f.write_str("1"),
            Quantizer::Full => f.write_str("inf"),
        }
    }
}

// Config files write `"q": 1` or `"q": "inf"`.
impl Serialize for Quantizer {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Quantizer::OneBit => s.serialize_u64(1),
            Quantizer::Full => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Quantizer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        match &v {
            serde_json::Value::Number(n) if n.as_u64() == Some(1) => Ok(Quantizer::OneBit),
            serde_json::Value::String(s) if s == "1" => Ok(Quantizer::OneBit),
            serde_json::Value::String(s) if s == "inf" || s == "full" => Ok(Quantizer::Full),
            other => Err(D::Error::custom(format!(
                "quantizer must be 1 or \"inf\", got {other}"
            ))),
        }
    }
}

/// A quantized received block together with the noise level it was observed
/// at.
#[derive(Debug, Clone)]
pub struct ReceivedBlock {
    pub y: Array2<Complex64>,
    pub quantizer: Quantizer,
    pub sigma2: f64,
}

/// `Z = U_rx C F diag(U_Np* b)`, computed with FFTs; the Kronecker operators
/// `G` and `A` are never materialized.
pub fn forward_factored(
    c: &AngleDelayChannel,
    f: &EffectiveTraining,
    b: &PhaseSpectrum,
) -> Result<Array2<Complex64>> {
    let np = f.f.ncols();
    if c.c.ncols() != f.f.nrows() {
        return Err(Error::InvalidDimension(format!(
            "C has {} columns but F has {} rows",
            c.c.ncols(),
            f.f.nrows()
        )));
    }
    if b.b.len() != np {
        return Err(Error::InvalidDimension(format!(
            "b has length {} but F has {} columns",
            b.b.len(),
            np
        )));
    }
    let dft_rx = Dft::new(c.nrx())?;
    let dft_np = Dft::new(np)?;
    let d = dft_np.inverse(b.b.view());
    let mut z = dft_rx.forward_cols(&c.c.dot(&f.f));
    for (mut col, scale) in z.columns_mut().into_iter().zip(d.iter()) {
        col.mapv_inplace(|v| v * scale);
    }
    Ok(z)
}

/// `Z = sum_l H[l] T J_l diag(d)`.
pub fn forward_tapwise(
    h: &WidebandChannel,
    t: &TrainingBlock,
    d: &PhaseErrorVector,
) -> Result<Array2<Complex64>> {
    if h.taps.is_empty() {
        return Err(Error::InvalidDimension("channel must have >= 1 tap".into()));
    }
    let (nrx, ntx) = h.taps[0].dim();
    let np = t.t.ncols();
    if t.t.nrows() != ntx {
        return Err(Error::InvalidDimension(format!(
            "training has {} rows but channel has {} transmit antennas",
            t.t.nrows(),
            ntx
        )));
    }
    if d.d.len() != np {
        return Err(Error::InvalidDimension("phase vector length mismatch".into()));
    }
    let mut z = Array2::<Complex64>::default((nrx, np));
    for (ell, tap) in h.taps.iter().enumerate() {
        let shifted = circ_shift_columns(&t.t, ell)?;
        z = z + tap.dot(&shifted);
    }
    for (mut col, scale) in z.columns_mut().into_iter().zip(d.d.iter()) {
        col.mapv_inplace(|v| v * scale);
    }
    Ok(z)
}

/// Element-wise quantization; `sign(0) = +1` so the map is total.
pub fn quantize(x: &Array2<Complex64>, q: Quantizer) -> Array2<Complex64> {
    match q {
        Quantizer::Full => x.clone(),
        Quantizer::OneBit => x.mapv(|v| {
            let sr = if v.re >= 0.0 { 1.0 } else { -1.0 };
            let si = if v.im >= 0.0 { 1.0 } else { -1.0 };
            Complex64::new(sr, si)
        }),
    }
}

/// Noise variance for a target SNR: `sigma^2 = ||T||_F^2 / (Np 10^(snr/10))`.
pub fn snr_to_sigma2(t: &TrainingBlock, snr_db: f64) -> Result<f64> {
    let energy = fro_norm_sq(&t.t);
    if energy <= 0.0 {
        return Err(Error::DegenerateInput("training block has zero energy".into()));
    }
    let np = t.t.ncols() as f64;
    Ok(energy / (np * 10f64.powf(snr_db / 10.0)))
}

/// `Y = Q_q(Z + V)` with IID complex normal `V`, per-entry variance
/// `sigma2` split evenly between real and imaginary parts.
pub fn observe<R: Rng>(
    z: &Array2<Complex64>,
    sigma2: f64,
    q: Quantizer,
    rng: &mut R,
) -> Result<ReceivedBlock> {
    if sigma2 < 0.0 {
        return Err(Error::InvalidArgument("noise variance must be >= 0".into()));
    }
    let y = if sigma2 > 0.0 {
        let n = Normal::new(0.0, (sigma2 / 2.0).sqrt()).expect("sigma2 checked");
        let noisy = z.mapv(|v| v + Complex64::new(n.sample(rng), n.sample(rng)));
        quantize(&noisy, q)
    } else {
        quantize(z, q)
    };
    Ok(ReceivedBlock { y, quantizer: q, sigma2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{gen_sparse_angle_delay, sample_rays, synthesize_taps, to_angle_delay, ChannelGenParams};
    use crate::phase::{gen_phase_errors, to_spectrum, PhaseParams};
    use crate::training::{assemble_f, gen_training, TrainingKind};
    use ndarray::Array1;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn quantizer_definition() {
        let x = ndarray::array![[Complex64::new(0.3, -2.7)]];
        let y = quantize(&x, Quantizer::OneBit);
        assert_eq!(y[[0, 0]], Complex64::new(1.0, -1.0));
        // Positive scaling invariance.
        let xs = x.mapv(|v| v * 5.0);
        assert_eq!(quantize(&xs, Quantizer::OneBit), y);
        // Full resolution is the identity.
        assert_eq!(quantize(&x, Quantizer::Full), x);
        // sign(0) = +1.
        let z = ndarray::array![[Complex64::new(0.0, 0.0)]];
        assert_eq!(quantize(&z, Quantizer::OneBit)[[0, 0]], Complex64::new(1.0, 1.0));
    }

    #[test]
    fn snr_calibration_constant_modulus() {
        let mut rng = StdRng::seed_from_u64(2);
        let p = 1.8;
        let t = gen_training(TrainingKind::IidQpsk, 4, 64, p, &mut rng).unwrap();
        // ||T||_F^2 = Ntx Np P... per-symbol (column) energy is Ntx P; the
        // SNR definition normalizes by Np only.
        let s0 = snr_to_sigma2(&t, 0.0).unwrap();
        assert!((s0 - 4.0 * p).abs() < 1e-12);
        let s10 = snr_to_sigma2(&t, 10.0).unwrap();
        assert!((s10 - 0.4 * p).abs() < 1e-12);
    }

    #[test]
    fn observe_noiseless_paths() {
        let mut rng = StdRng::seed_from_u64(3);
        let z = Array2::from_shape_fn((3, 5), |_| {
            Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        });
        let y = observe(&z, 0.0, Quantizer::Full, &mut rng).unwrap();
        assert_eq!(y.y, z);
        let y1 = observe(&z, 0.0, Quantizer::OneBit, &mut rng).unwrap();
        assert_eq!(y1.y, quantize(&z, Quantizer::OneBit));
        assert!(observe(&z, -1.0, Quantizer::Full, &mut rng).is_err());
    }

    #[test]
    fn observe_noise_variance_statistics() {
        let mut rng = StdRng::seed_from_u64(4);
        let z = Array2::default((100, 1000));
        let sigma2 = 0.37;
        let y = observe(&z, sigma2, Quantizer::Full, &mut rng).unwrap();
        let var = fro_norm_sq(&y.y) / (100.0 * 1000.0);
        assert!((var - sigma2).abs() < 0.02 * sigma2, "empirical {var}");
    }

    #[test]
    fn factored_zero_channel_and_scale_ambiguity() {
        let mut rng = StdRng::seed_from_u64(5);
        let t = gen_training(TrainingKind::IidQpsk, 4, 16, 1.0, &mut rng).unwrap();
        let f = assemble_f(&t, 2).unwrap();
        let c0 = AngleDelayChannel { c: Array2::default((4, 8)), ntx: 4, taps: 2 };
        let p = PhaseParams::new(0.2, 0.0, 16).unwrap();
        let b = to_spectrum(&gen_phase_errors(&p, &mut rng)).unwrap();
        let z = forward_factored(&c0, &f, &b).unwrap();
        assert!(fro_norm_sq(&z) < 1e-30);

        let c = gen_sparse_angle_delay(4, 4, 2, 3, &mut rng).unwrap();
        let z1 = forward_factored(&c, &f, &b).unwrap();
        let alpha = Complex64::new(0.7, -1.3);
        let cb = AngleDelayChannel { c: c.c.mapv(|v| v / alpha), ntx: 4, taps: 2 };
        let bb = PhaseSpectrum { b: b.b.mapv(|v| v * alpha) };
        let z2 = forward_factored(&cb, &f, &bb).unwrap();
        assert!(fro_norm_sq(&(&z1 - &z2)) < 1e-20 * fro_norm_sq(&z1));
    }

    #[test]
    fn tapwise_identity_cases() {
        let mut rng = StdRng::seed_from_u64(6);
        // L = 1, d = 1: Z = H[0] T.
        let p = ChannelGenParams {
            n_clusters: 2,
            rays_per_cluster: 2,
            angle_spread: 0.2,
            delay_spread_max: 0.0,
            nrx: 4,
            ntx: 4,
            taps: 1,
            symbol_period: 1e-8,
        };
        let h = synthesize_taps(&sample_rays(&p, &mut rng).unwrap(), &p).unwrap();
        let t = gen_training(TrainingKind::IidQpsk, 4, 8, 1.0, &mut rng).unwrap();
        let ones = PhaseErrorVector { d: Array1::from_elem(8, Complex64::new(1.0, 0.0)) };
        let z = forward_tapwise(&h, &t, &ones).unwrap();
        let want = h.taps[0].dot(&t.t);
        assert!(fro_norm_sq(&(&z - &want)) < 1e-20 * fro_norm_sq(&want));

        // Single pure-delay tap: H[1] = I, Z = T J_1 diag(d).
        let mut taps = vec![Array2::<Complex64>::default((4, 4)); 2];
        taps[1] = Array2::eye(4);
        let h = WidebandChannel { taps, symbol_period: 1e-8 };
        let pp = PhaseParams::new(0.3, 0.1, 8).unwrap();
        let d = gen_phase_errors(&pp, &mut rng);
        let z = forward_tapwise(&h, &t, &d).unwrap();
        let mut want = circ_shift_columns(&t.t, 1).unwrap();
        for (mut col, s) in want.columns_mut().into_iter().zip(d.d.iter()) {
            col.mapv_inplace(|v| v * s);
        }
        assert!(fro_norm_sq(&(&z - &want)) < 1e-20 * fro_norm_sq(&want));
    }

    #[test]
    fn factored_matches_tapwise_on_random_instances() {
        // The Eq.(5) -> Eq.(6) derivation, checked end to end.
        for seed in 0..10u64 {
            let mut rng = StdRng::seed_from_u64(100 + seed);
            let p = ChannelGenParams {
                n_clusters: 2,
                rays_per_cluster: 3,
                angle_spread: 0.3,
                delay_spread_max: 1.5e-8,
                nrx: 4,
                ntx: 4,
                taps: 2,
                symbol_period: 1e-8,
            };
            let h = synthesize_taps(&sample_rays(&p, &mut rng).unwrap(), &p).unwrap();
            let t = gen_training(TrainingKind::IidGaussian, 4, 16, 1.0, &mut rng).unwrap();
            let pp = PhaseParams::new(0.21, 0.05, 16).unwrap();
            let d = gen_phase_errors(&pp, &mut rng);
            let z_tap = forward_tapwise(&h, &t, &d).unwrap();
            let c = to_angle_delay(&h).unwrap();
            let f = assemble_f(&t, 2).unwrap();
            let b = to_spectrum(&d).unwrap();
            let z_fac = forward_factored(&c, &f, &b).unwrap();
            let rel = fro_norm_sq(&(&z_tap - &z_fac)) / fro_norm_sq(&z_tap);
            assert!(rel.sqrt() < 1e-10, "seed {seed}: relative error {}", rel.sqrt());
        }
    }

    #[test]
    fn phase_errors_are_column_invariant() {
        let mut rng = StdRng::seed_from_u64(7);
        let p = ChannelGenParams {
            n_clusters: 2,
            rays_per_cluster: 3,
            angle_spread: 0.3,
            delay_spread_max: 1e-8,
            nrx: 4,
            ntx: 4,
            taps: 2,
            symbol_period: 1e-8,
        };
        let h = synthesize_taps(&sample_rays(&p, &mut rng).unwrap(), &p).unwrap();
        let t = gen_training(TrainingKind::IidQpsk, 4, 12, 1.0, &mut rng).unwrap();
        let pp = PhaseParams::new(0.15, 0.08, 12).unwrap();
        let d = gen_phase_errors(&pp, &mut rng);
        let z = forward_tapwise(&h, &t, &d).unwrap();
        let ones = PhaseErrorVector { d: Array1::from_elem(12, Complex64::new(1.0, 0.0)) };
        let z0 = forward_tapwise(&h, &t, &ones).unwrap();
        for n in 0..12 {
            for r in 0..4 {
                let want = z0[[r, n]] * d.d[n];
                assert!((z[[r, n]] - want).norm() < 1e-12 * want.norm().max(1.0));
            }
        }
    }

    #[test]
    fn quantizer_serde_forms() {
        #[derive(Serialize, Deserialize)]
        struct W { q: Quantizer }
        let w: W = serde_json::from_str(r#"{"q": 1}"#).unwrap();
        assert_eq!(w.q, Quantizer::OneBit);
        let w: W = serde_json::from_str(r#"{"q": "inf"}"#).unwrap();
        assert_eq!(w.q, Quantizer::Full);
        assert!(serde_json::from_str::<W>(r#"{"q": 3}"#).is_err());
        let s = serde_json::to_string(&W { q: Quantizer::OneBit }).unwrap();
        assert_eq!(s, r#"{"q":1}"#);
    }
}
