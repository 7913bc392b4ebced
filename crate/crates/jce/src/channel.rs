//! Clustered wideband mmWave channel generation and conversion between the
//! antenna-delay taps `H[l]` and the angle-delay matrix `C`.
//!
//! Each tap is a sum of ray outer products weighted by a sinc pulse evaluated
//! at the ray delay, `H[l] = sum gamma a_rx(w_r) a_tx(w_t)^H sinc(l - tau/T)`
//! with `w = pi sin(theta)` for half-wavelength ULAs. `C` concatenates the
//! 2-D spatial DFTs `U_rx* H[l] U_tx` over taps and is approximately sparse,
//! which is what the solver exploits.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::kernels::{fro_norm_sq, sinc, vandermonde, Dft};
use crate::{Error, Result};

/// Generation parameters for the clustered ray model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelGenParams {
    pub n_clusters: usize,
    pub rays_per_cluster: usize,
    /// Standard deviation of the Laplacian within-cluster angle offsets,
    /// radians (the Laplacian scale is `angle_spread / sqrt(2)`).
    pub angle_spread: f64,
    /// Cluster-center delays are uniform on `[0, delay_spread_max]`, seconds.
    pub delay_spread_max: f64,
    pub nrx: usize,
    pub ntx: usize,
    pub taps: usize,
    /// Symbol period `T`, seconds.
    pub symbol_period: f64,
}

impl ChannelGenParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0
            || self.rays_per_cluster == 0
            || self.nrx == 0
            || self.ntx == 0
            || self.taps == 0
        {
            return Err(Error::InvalidDimension("channel dimensions must be >= 1".into()));
        }
        if self.angle_spread < 0.0 || self.delay_spread_max < 0.0 || self.symbol_period <= 0.0 {
            return Err(Error::InvalidArgument("channel spreads must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One propagation ray.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub gain: Complex64,
    /// Delay in seconds, within `[0, (L-1) T]` after generation.
    pub delay: f64,
    pub aoa: f64,
    pub aod: f64,
}

/// Rays grouped by cluster.
#[derive(Debug, Clone)]
pub struct RaySet {
    pub clusters: Vec<Vec<Ray>>,
}

impl RaySet {
    pub fn ray_count(&self) -> usize {
        self.clusters.iter().map(|c| c.len()).sum()
    }
}

/// The `L` antenna-domain taps.
#[derive(Debug, Clone)]
pub struct WidebandChannel {
    pub taps: Vec<Array2<Complex64>>,
    pub symbol_period: f64,
}

/// Concatenated angle-delay representation, `Nrx x (Ntx L)`.
#[derive(Debug, Clone)]
pub struct AngleDelayChannel {
    pub c: Array2<Complex64>,
    pub ntx: usize,
    pub taps: usize,
}

impl AngleDelayChannel {
    pub fn nrx(&self) -> usize {
        self.c.nrows()
    }

    /// View of tap block `l` (columns `l Ntx .. (l+1) Ntx`).
    pub fn block(&self, ell: usize) -> ndarray::ArrayView2<'_, Complex64> {
        self.c.slice(s![.., ell * self.ntx..(ell + 1) * self.ntx])
    }
}

fn sample_laplacian<R: Rng>(scale: f64, rng: &mut R) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    let u: f64 = rng.gen::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Draw a clustered ray set.
///
/// Cluster-center angles are uniform on `(-pi/2, pi/2)`; within-cluster
/// offsets are Laplacian with the configured spread. Gains are IID standard
/// complex normal. Per-ray delays jitter uniformly within `+-T` of the
/// cluster delay and are clamped to the modeled window `[0, (L-1) T]`.
pub fn sample_rays<R: Rng>(params: &ChannelGenParams, rng: &mut R) -> Result<RaySet> {
    params.validate()?;
    let gain = Normal::new(0.0, (0.5f64).sqrt()).expect("fixed std");
    let lap_scale = params.angle_spread / 2f64.sqrt();
    let delay_cap = (params.taps - 1) as f64 * params.symbol_period;
    let mut clusters = Vec::with_capacity(params.n_clusters);
    for _ in 0..params.n_clusters {
        let center_aoa = (rng.gen::<f64>() - 0.5) * PI;
        let center_aod = (rng.gen::<f64>() - 0.5) * PI;
        let center_delay = rng.gen::<f64>() * params.delay_spread_max;
        let mut rays = Vec::with_capacity(params.rays_per_cluster);
        for _ in 0..params.rays_per_cluster {
            let jitter = (rng.gen::<f64>() * 2.0 - 1.0) * params.symbol_period;
            rays.push(Ray {
                gain: Complex64::new(gain.sample(rng), gain.sample(rng)),
                delay: (center_delay + jitter).clamp(0.0, delay_cap),
                aoa: center_aoa + sample_laplacian(lap_scale, rng),
                aod: center_aod + sample_laplacian(lap_scale, rng),
            });
        }
        clusters.push(rays);
    }
    Ok(RaySet { clusters })
}

/// Build the `L` taps from a ray set.
pub fn synthesize_taps(rays: &RaySet, params: &ChannelGenParams) -> Result<WidebandChannel> {
    params.validate()?;
    let mut taps = vec![Array2::<Complex64>::default((params.nrx, params.ntx)); params.taps];
    for ray in rays.clusters.iter().flatten() {
        let a_rx = vandermonde(params.nrx, PI * ray.aoa.sin())?;
        let a_tx = vandermonde(params.ntx, PI * ray.aod.sin())?;
        let frac = ray.delay / params.symbol_period;
        for (ell, tap) in taps.iter_mut().enumerate() {
            let w = sinc(ell as f64 - frac);
            if w == 0.0 {
                continue;
            }
            let scale = ray.gain * w;
            for r in 0..params.nrx {
                let left = scale * a_rx[r];
                for t in 0..params.ntx {
                    tap[[r, t]] += left * a_tx[t].conj();
                }
            }
        }
    }
    Ok(WidebandChannel {
        taps,
        symbol_period: params.symbol_period,
    })
}

/// `C` block `l` = `U_rx* H[l] U_tx`.
pub fn to_angle_delay(h: &WidebandChannel) -> Result<AngleDelayChannel> {
    let taps = h.taps.len();
    if taps == 0 {
        return Err(Error::InvalidDimension("channel must have >= 1 tap".into()));
    }
    let (nrx, ntx) = h.taps[0].dim();
    let dft_rx = Dft::new(nrx)?;
    let dft_tx = Dft::new(ntx)?;
    let u_tx = dft_matrix(&dft_tx);
    let mut c = Array2::default((nrx, ntx * taps));
    for (ell, tap) in h.taps.iter().enumerate() {
        if tap.dim() != (nrx, ntx) {
            return Err(Error::InvalidDimension("taps differ in shape".into()));
        }
        let block = dft_rx.inverse_cols(tap).dot(&u_tx);
        c.slice_mut(s![.., ell * ntx..(ell + 1) * ntx]).assign(&block);
    }
    Ok(AngleDelayChannel { c, ntx, taps })
}

/// Inverse of [`to_angle_delay`]: `H[l] = U_rx C[l] U_tx*`.
pub fn from_angle_delay(c: &AngleDelayChannel, symbol_period: f64) -> Result<WidebandChannel> {
    let nrx = c.nrx();
    if c.c.ncols() != c.ntx * c.taps {
        return Err(Error::InvalidDimension("angle-delay block count mismatch".into()));
    }
    let dft_rx = Dft::new(nrx)?;
    let dft_tx = Dft::new(c.ntx)?;
    let u_tx_h = dft_matrix(&dft_tx).mapv(|v| v.conj()); // U* = conj(U) (symmetric)
    let mut taps = Vec::with_capacity(c.taps);
    for ell in 0..c.taps {
        let block = c.block(ell).to_owned();
        taps.push(dft_rx.forward_cols(&block).dot(&u_tx_h));
    }
    Ok(WidebandChannel { taps, symbol_period })
}

fn dft_matrix(dft: &Dft) -> Array2<Complex64> {
    let n = dft.size();
    let mut m = Array2::default((n, n));
    for c in 0..n {
        let mut e = Array1::<Complex64>::default(n);
        e[c] = Complex64::new(1.0, 0.0);
        m.column_mut(c).assign(&dft.forward(e.view()));
    }
    m
}

/// Ensemble scale `s` such that `E ||s C||_F^2 = Nrx Ntx`.
pub fn normalization_constant(ensemble: &[AngleDelayChannel]) -> Result<f64> {
    if ensemble.is_empty() {
        return Err(Error::DegenerateInput("empty calibration ensemble".into()));
    }
    let nrx = ensemble[0].nrx();
    let ntx = ensemble[0].ntx;
    let mean: f64 =
        ensemble.iter().map(|c| fro_norm_sq(&c.c)).sum::<f64>() / ensemble.len() as f64;
    if mean <= 0.0 {
        return Err(Error::DegenerateInput("all-zero calibration ensemble".into()));
    }
    Ok(((nrx * ntx) as f64 / mean).sqrt())
}

/// Exactly `nnz`-sparse on-grid angle-delay channel, scaled to
/// `||C||_F^2 = Nrx Ntx`. Test-fixture generator for recovery experiments
/// where the model holds exactly.
pub fn gen_sparse_angle_delay<R: Rng>(
    nrx: usize,
    ntx: usize,
    taps: usize,
    nnz: usize,
    rng: &mut R,
) -> Result<AngleDelayChannel> {
    let total = nrx * ntx * taps;
    if nnz == 0 || nnz > total {
        return Err(Error::InvalidArgument(format!(
            "support size {nnz} out of range for {total} entries"
        )));
    }
    let gain = Normal::new(0.0, (0.5f64).sqrt()).expect("fixed std");
    let mut c = Array2::default((nrx, ntx * taps));
    // Sample distinct support positions.
    let mut positions: Vec<usize> = (0..total).collect();
    for i in 0..nnz {
        let j = i + rng.gen_range(0..total - i);
        positions.swap(i, j);
    }
    for &p in positions.iter().take(nnz) {
        let (r, col) = (p % nrx, p / nrx);
        c[[r, col]] = Complex64::new(gain.sample(rng), gain.sample(rng));
    }
    let scale = ((nrx * ntx) as f64 / fro_norm_sq(&c)).sqrt();
    c.mapv_inplace(|v| v * scale);
    Ok(AngleDelayChannel { c, ntx, taps })
}
