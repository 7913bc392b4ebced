//! Training-block generation (IID QPSK, IID Gaussian, shifted Zadoff-Chu) and
//! assembly of the effective training operator `F`.
//!
//! The transmitter sends a cyclic-prefixed block, so after prefix removal the
//! received block sees circularly delayed copies of the training matrix; `F`
//! stacks `U_Ntx* T J_l` for every delay tap `l`. Shifted-ZC blocks make `T`
//! circulant when `Np = Ntx`, which is exactly the structure that triggers
//! the CFO propagation ambiguity analysed in [`crate::oracle`].

use ndarray::{s, Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::kernels::{circ_shift_columns, Dft};
use crate::{Error, Result};

/// Which training matrix to transmit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingKind {
    IidQpsk,
    IidGaussian,
    ShiftedZc,
}

impl std::fmt::Display for TrainingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TrainingKind::IidQpsk => "iid_qpsk",
            TrainingKind::IidGaussian => "iid_gaussian",
            TrainingKind::ShiftedZc => "shifted_zc",
        };
        f.write_str(s)
    }
}

/// An `Ntx x Np` training block with per-symbol power `P`.
#[derive(Debug, Clone)]
pub struct TrainingBlock {
    pub t: Array2<Complex64>,
    pub power: f64,
}

/// The stacked operator `F` with row-block `l` equal to `U_Ntx* T J_l`.
#[derive(Debug, Clone)]
pub struct EffectiveTraining {
    pub f: Array2<Complex64>,
    pub ntx: usize,
    pub taps: usize,
}

/// Zadoff-Chu sequence of length `np` with the given root, unit modulus.
///
/// Odd `np` uses `exp(-j pi root n (n+1) / np)`, even `np` uses
/// `exp(-j pi root n^2 / np)`.
pub fn zc_sequence(np: usize, root: usize) -> Result<Array1<Complex64>> {
    if np == 0 {
        return Err(Error::InvalidDimension("ZC length must be >= 1".into()));
    }
    if gcd(root, np) != 1 {
        return Err(Error::InvalidArgument(format!(
            "ZC root {root} is not coprime to length {np}"
        )));
    }
    let npf = np as f64;
    let r = root as f64;
    Ok(Array1::from_iter((0..np).map(|n| {
        let nf = n as f64;
        let phase = if np % 2 == 1 {
            -std::f64::consts::PI * r * nf * (nf + 1.0) / npf
        } else {
            -std::f64::consts::PI * r * nf * nf / npf
        };
        Complex64::from_polar(1.0, phase)
    })))
}

fn gcd(a: usize, b: usize) -> usize {
    let (mut a, mut b) = (a, b);
    while b != 0 {
        let r = a % b;
        a = b;
        b = r;
    }
    a
}

/// Generate a training block of the requested kind.
///
/// Shifted-ZC rows are circular shifts of one base sequence; row `i` is
/// shifted by `i * floor(Np / Ntx)`, which makes `T` a circulant matrix in
/// the square case `Np = Ntx`.
pub fn gen_training<R: Rng>(
    kind: TrainingKind,
    ntx: usize,
    np: usize,
    power: f64,
    rng: &mut R,
) -> Result<TrainingBlock> {
    if ntx == 0 || np == 0 {
        return Err(Error::InvalidDimension("training dimensions must be >= 1".into()));
    }
    if power <= 0.0 {
        return Err(Error::InvalidArgument("training power must be > 0".into()));
    }
    let amp = power.sqrt();
    let t = match kind {
        TrainingKind::IidQpsk => {
            let a = amp / 2f64.sqrt();
            Array2::from_shape_fn((ntx, np), |_| {
                let re = if rng.gen::<bool>() { a } else { -a };
                let im = if rng.gen::<bool>() { a } else { -a };
                Complex64::new(re, im)
            })
        }
        TrainingKind::IidGaussian => {
            let n = Normal::new(0.0, (power / 2.0).sqrt()).expect("power checked positive");
            Array2::from_shape_fn((ntx, np), |_| Complex64::new(n.sample(rng), n.sample(rng)))
        }
        TrainingKind::ShiftedZc => {
            if ntx > np {
                return Err(Error::InvalidArgument(format!(
                    "shifted ZC needs Np >= Ntx (got Ntx={ntx}, Np={np})"
                )));
            }
            let root = (1..np).find(|r| gcd(*r, np) == 1).expect("1 is always coprime");
            let z = zc_sequence(np, root)?;
            let spacing = np / ntx;
            Array2::from_shape_fn((ntx, np), |(i, n)| {
                let shift = i * spacing;
                z[(n + np - shift % np) % np] * amp
            })
        }
    };
    Ok(TrainingBlock { t, power })
}

/// Stack `U_Ntx* T J_l` for `l = 0..L-1` into the `(Ntx L) x Np` operator.
pub fn assemble_f(t: &TrainingBlock, taps: usize) -> Result<EffectiveTraining> {
    if taps == 0 {
        return Err(Error::InvalidDimension("tap count must be >= 1".into()));
    }
    let ntx = t.t.nrows();
    let np = t.t.ncols();
    if taps > np {
        return Err(Error::InvalidArgument(format!(
            "tap count {taps} exceeds block length {np}"
        )));
    }
    let dft = Dft::new(ntx)?;
    let base = dft.inverse_cols(&t.t);
    let mut f = Array2::default((ntx * taps, np));
    for ell in 0..taps {
        let block = circ_shift_columns(&base, ell)?;
        f.slice_mut(s![ell * ntx..(ell + 1) * ntx, ..]).assign(&block);
    }
    Ok(EffectiveTraining { f, ntx, taps })
}
