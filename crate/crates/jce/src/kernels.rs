//! Shared numeric primitives: the unitary DFT convention used everywhere,
//! Vandermonde / array-response vectors, sinc, circulant column shifts, and
//! standard-normal helpers for the quantized-output likelihood.
//!
//! Every module in the crate shares one DFT sign convention,
//! `U[m, n] = exp(-j 2 pi m n / N) / sqrt(N)` (0-based), so that the CFO bin
//! mapping is consistent: a tone `exp(+j 2 pi k n / N)` lands in bin `k`.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::{Error, Result};

/// Unitary DFT of a fixed size. `forward` applies `U_N`, `inverse` applies
/// `U_N*`; both scale by `1/sqrt(N)` and therefore preserve the 2-norm.
pub struct Dft {
    size: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl Dft {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidDimension("DFT size must be >= 1".into()));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            size,
            fwd: planner.plan_fft_forward(size),
            inv: planner.plan_fft_inverse(size),
            scale: 1.0 / (size as f64).sqrt(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// `U_N x`.
    pub fn forward(&self, x: ArrayView1<Complex64>) -> Array1<Complex64> {
        self.apply(x, true)
    }

    /// `U_N* x`.
    pub fn inverse(&self, x: ArrayView1<Complex64>) -> Array1<Complex64> {
        self.apply(x, false)
    }

    fn apply(&self, x: ArrayView1<Complex64>, forward: bool) -> Array1<Complex64> {
        assert_eq!(x.len(), self.size, "DFT length mismatch");
        let mut buf: Vec<Complex64> = x.iter().copied().collect();
        if forward {
            self.fwd.process(&mut buf);
        } else {
            self.inv.process(&mut buf);
        }
        let mut out = Array1::from(buf);
        out.mapv_inplace(|v| v * self.scale);
        out
    }

    /// `U_N M`: transform every column of `M` (requires `M.nrows() == N`).
    pub fn forward_cols(&self, m: &Array2<Complex64>) -> Array2<Complex64> {
        self.apply_cols(m, true)
    }

    /// `U_N* M`.
    pub fn inverse_cols(&self, m: &Array2<Complex64>) -> Array2<Complex64> {
        self.apply_cols(m, false)
    }

    fn apply_cols(&self, m: &Array2<Complex64>, forward: bool) -> Array2<Complex64> {
        assert_eq!(m.nrows(), self.size, "column DFT height mismatch");
        let mut out = m.clone();
        let mut buf = vec![Complex64::default(); self.size];
        for mut col in out.columns_mut() {
            for (b, v) in buf.iter_mut().zip(col.iter()) {
                *b = *v;
            }
            if forward {
                self.fwd.process(&mut buf);
            } else {
                self.inv.process(&mut buf);
            }
            for (v, b) in col.iter_mut().zip(buf.iter()) {
                *v = *b * self.scale;
            }
        }
        out
    }
}

/// Array-response / Vandermonde vector `[1, e^{j d}, ..., e^{j (N-1) d}]`.
pub fn vandermonde(n: usize, delta: f64) -> Result<Array1<Complex64>> {
    if n == 0 {
        return Err(Error::InvalidDimension("vandermonde length must be >= 1".into()));
    }
    Ok(Array1::from_iter(
        (0..n).map(|k| Complex64::from_polar(1.0, delta * k as f64)),
    ))
}

/// Normalized sinc: `sin(pi x) / (pi x)`, with `sinc(0) = 1`.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// `X J_ell`, where `J_ell` is the circulant delay matrix whose first column
/// is the canonical vector `e_{1+ell}`. Column `c` of the result is column
/// `(c + ell) mod Np` of `X` (0-based).
pub fn circ_shift_columns(x: &Array2<Complex64>, ell: usize) -> Result<Array2<Complex64>> {
    let np = x.ncols();
    if ell >= np {
        return Err(Error::InvalidArgument(format!(
            "column shift {ell} out of range for {np} columns"
        )));
    }
    let mut out = Array2::default(x.raw_dim());
    for c in 0..np {
        let src = (c + ell) % np;
        out.column_mut(c).assign(&x.column(src));
    }
    Ok(out)
}

/// Standard normal pdf.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal cdf via `erfc`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse Mills ratio `phi(u) / Phi(u)`.
///
/// For `u < -8` the direct quotient loses accuracy and eventually underflows,
/// so the tail uses the asymptotic expansion
/// `phi/Phi ~ -u / (1 - u^-2 + 3 u^-4 - 15 u^-6 + 105 u^-8)`.
pub fn phi_over_cdf(u: f64) -> f64 {
    if u < -8.0 {
        let inv2 = 1.0 / (u * u);
        let series = 1.0 + inv2 * (-1.0 + inv2 * (3.0 + inv2 * (-15.0 + inv2 * 105.0)));
        -u / series
    } else {
        normal_pdf(u) / normal_cdf(u)
    }
}

/// Frobenius norm squared of a complex matrix.
pub fn fro_norm_sq(x: &Array2<Complex64>) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum()
}

/// `sum conj(a) * b` over matching entries (conjugate-linear in the first
/// argument).
pub fn inner_product(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Complex64 {
    assert_eq!(a.dim(), b.dim(), "inner product shape mismatch");
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn unit_matrix(n: usize) -> Array2<Complex64> {
        // Explicit U_N for cross-checking the FFT-backed implementation.
        let mut u = Array2::default((n, n));
        let s = 1.0 / (n as f64).sqrt();
        for m in 0..n {
            for k in 0..n {
                let ang = -2.0 * PI * (m as f64) * (k as f64) / n as f64;
                u[[m, k]] = Complex64::from_polar(s, ang);
            }
        }
        u
    }

    fn rand_cvec(n: usize, rng: &mut StdRng) -> Array1<Complex64> {
        Array1::from_iter((0..n).map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)))
    }

    #[test]
    fn vandermonde_basic_angles() {
        let v = vandermonde(4, 0.0).unwrap();
        for k in 0..4 {
            assert!((v[k] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
        let v = vandermonde(2, PI).unwrap();
        assert!((v[1] - Complex64::new(-1.0, 0.0)).norm() < 1e-15);
        let v = vandermonde(4, PI / 2.0).unwrap();
        let want = [
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 1.0),
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.0, -1.0),
        ];
        for (a, b) in v.iter().zip(want.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(vandermonde(0, 1.0).is_err());
    }

    #[test]
    fn dft_of_constant_is_scaled_e1() {
        let dft = Dft::new(4).unwrap();
        let x = Array1::from_elem(4, Complex64::new(1.0, 0.0));
        let y = dft.forward(x.view());
        assert!((y[0] - Complex64::new(2.0, 0.0)).norm() < 1e-12);
        for k in 1..4 {
            assert!(y[k].norm() < 1e-12);
        }
    }

    #[test]
    fn dft_matches_matrix_definition() {
        let n = 4;
        let dft = Dft::new(n).unwrap();
        let u = unit_matrix(n);
        // Column e2 picks out column 2 of U (0-based column 1).
        let mut e2 = Array1::from_elem(n, Complex64::default());
        e2[1] = Complex64::new(1.0, 0.0);
        let y = dft.forward(e2.view());
        for m in 0..n {
            assert!((y[m] - u[[m, 1]]).norm() < 1e-12);
        }
    }

    #[test]
    fn dft_unitary_roundtrip_and_norm() {
        let mut rng = StdRng::seed_from_u64(7);
        let n = 16;
        let dft = Dft::new(n).unwrap();
        let x = rand_cvec(n, &mut rng);
        let y = dft.forward(x.view());
        let back = dft.inverse(y.view());
        let nx: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let ny: f64 = y.iter().map(|v| v.norm_sqr()).sum();
        assert!((nx - ny).abs() < 1e-12 * nx);
        for k in 0..n {
            assert!((back[k] - x[k]).norm() < 1e-12);
        }
    }

    #[test]
    fn vandermonde_is_conjugate_dft_column() {
        for &n in &[4usize, 8, 16] {
            let u = unit_matrix(n);
            let v = vandermonde(n, 2.0 * PI / n as f64).unwrap();
            for m in 0..n {
                let want = u[[m, 1]].conj() * (n as f64).sqrt();
                assert!((v[m] - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn sinc_values() {
        assert_eq!(sinc(0.0), 1.0);
        assert!(sinc(1.0).abs() < 1e-15);
        assert!((sinc(0.5) - 2.0 / PI).abs() < 1e-15);
    }

    #[test]
    fn circ_shift_examples() {
        let x = array![
            [Complex64::new(1.0, 0.0), Complex64::new(2.0, 0.0), Complex64::new(3.0, 0.0)],
        ];
        let same = circ_shift_columns(&x, 0).unwrap();
        assert_eq!(same, x);
        let shifted = circ_shift_columns(&x, 1).unwrap();
        assert_eq!(shifted[[0, 0]].re, 2.0);
        assert_eq!(shifted[[0, 1]].re, 3.0);
        assert_eq!(shifted[[0, 2]].re, 1.0);
        assert!(circ_shift_columns(&x, 3).is_err());
    }

    #[test]
    fn circ_shift_composes_modulo_np() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = Array2::from_shape_fn((2, 5), |_| {
            Complex64::new(rng.gen::<f64>(), rng.gen::<f64>())
        });
        for ell in 0..5 {
            let a = circ_shift_columns(&x, ell).unwrap();
            let b = circ_shift_columns(&a, (5 - ell) % 5).unwrap();
            assert!(fro_norm_sq(&(&b - &x)) < 1e-24);
            // Additive composition.
            for ell2 in 0..5 {
                let c = circ_shift_columns(&a, ell2).unwrap();
                let d = circ_shift_columns(&x, (ell + ell2) % 5).unwrap();
                assert!(fro_norm_sq(&(&c - &d)) < 1e-24);
            }
        }
    }

    #[test]
    fn circ_shift_matches_delay_matrix() {
        // X J_ell against the explicit J_ell with first column e_{1+ell}.
        let np = 6;
        let mut rng = StdRng::seed_from_u64(11);
        let x = Array2::from_shape_fn((3, np), |_| {
            Complex64::new(rng.gen::<f64>(), rng.gen::<f64>())
        });
        for ell in 0..np {
            let mut j = Array2::<Complex64>::default((np, np));
            for c in 0..np {
                for r in 0..np {
                    if (r + np - c) % np == ell {
                        j[[r, c]] = Complex64::new(1.0, 0.0);
                    }
                }
            }
            let want = x.dot(&j);
            let got = circ_shift_columns(&x, ell).unwrap();
            assert!(fro_norm_sq(&(&got - &want)) < 1e-24);
        }
    }

    #[test]
    fn unit_dft_is_unitary_matrix() {
        for &n in &[4usize, 16, 64] {
            let u = unit_matrix(n);
            let uh = u.t().mapv(|v| v.conj());
            let prod = u.dot(&uh);
            for m in 0..n {
                for k in 0..n {
                    let want = if m == k { 1.0 } else { 0.0 };
                    assert!((prod[[m, k]] - Complex64::new(want, 0.0)).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mills_ratio_tail_is_smooth() {
        // Direct quotient and asymptotic series should agree near the switch.
        for &u in &[-7.9f64, -8.0, -8.1, -12.0, -30.0] {
            let series = {
                let inv2 = 1.0 / (u * u);
                -u / (1.0 + inv2 * (-1.0 + inv2 * (3.0 + inv2 * (-15.0 + inv2 * 105.0))))
            };
            let r = phi_over_cdf(u);
            assert!((r - series).abs() / series < 1e-6, "u={u} r={r} series={series}");
        }
        assert!((phi_over_cdf(0.0) - (2.0 / PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.1) + 0.1).abs() < 1e-12);
        assert!((wrap_angle(2.0 * PI)).abs() < 1e-12);
    }
}
