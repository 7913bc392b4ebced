//! Independent verification machinery, used by tests and the `selftest` CLI
//! subcommand:
//!
//! - a literal tensor-form implementation of the message-passing recursion
//!   (every sum written out over the materialized operator, no FFT
//!   shortcuts), to pin down the fast kernels;
//! - adaptive quadrature oracles for the closed-form posterior moments;
//! - a grid-search + least-squares joint estimator for small full-resolution
//!   instances;
//! - the CFO-propagation identity checker for circulant training.
//!
//! Everything here favors obviousness over speed; the tensor path is
//! `O((Nrx Np)^2 Ntx L)` per iteration and guarded to small instances.

use ndarray::{s, Array1, Array2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::{from_angle_delay, AngleDelayChannel};
use crate::kernels::{circ_shift_columns, fro_norm_sq, normal_cdf};
use crate::measurement::{forward_tapwise, Quantizer, ReceivedBlock};
use crate::pbigamp::moments::{input_moments_bg, output_moments};
use crate::pbigamp::{GampState, Hyperparams, Solver, VARIANCE_FLOOR};
use crate::phase::PhaseErrorVector;
use crate::training::{EffectiveTraining, TrainingBlock};
use crate::{Error, Result};

/// Largest allowed implied tensor size `M * Nb * Nc` for the literal path.
const MAX_TENSOR_ELEMENTS: usize = 1_000_000;

fn unitary_dft_matrix(n: usize) -> Array2<Complex64> {
    let scale = 1.0 / (n as f64).sqrt();
    Array2::from_shape_fn((n, n), |(m, k)| {
        Complex64::from_polar(
            scale,
            -2.0 * std::f64::consts::PI * (m as f64) * (k as f64) / n as f64,
        )
    })
}

/// The bilinear operator in fully materialized form: `z = diag(G b) A c` with
/// `G = U_Np* (x) 1_Nrx` and `A = F^T (x) U_Nrx` (column-major vectorization
/// of the received block and of the channel matrix).
pub struct TensorProblem {
    g: Array2<Complex64>,
    a: Array2<Complex64>,
    pub m: usize,
    pub nb: usize,
    pub nc: usize,
}

/// One literal iteration's outputs, all in vectorized (column-major) order.
pub struct TensorStep {
    pub z_star: Array1<Complex64>,
    pub nu_p_bar: Array1<f64>,
    pub nu_p: Array1<f64>,
    pub p_hat: Array1<Complex64>,
    pub z_hat: Array1<Complex64>,
    pub nu_z: Array1<f64>,
    pub s_hat: Array1<Complex64>,
    pub nu_s: Array1<f64>,
    pub nu_r: Array1<f64>,
    pub r_hat: Array1<Complex64>,
    pub nu_q: Array1<f64>,
    pub q_hat: Array1<Complex64>,
    pub c_next: Array1<Complex64>,
    pub nu_c_next: Array1<f64>,
    pub b_next: Array1<Complex64>,
    pub nu_b_next: Array1<f64>,
}

impl TensorProblem {
    pub fn new(f: &EffectiveTraining, nrx: usize) -> Result<Self> {
        let (ntx_l, np) = f.f.dim();
        let m = nrx * np;
        let nb = np;
        let nc = nrx * ntx_l;
        if m * nb * nc > MAX_TENSOR_ELEMENTS {
            return Err(Error::InvalidDimension(format!(
                "implied tensor of {} elements exceeds the {MAX_TENSOR_ELEMENTS} guard",
                m * nb * nc
            )));
        }
        let u_np = unitary_dft_matrix(np);
        let u_rx = unitary_dft_matrix(nrx);
        let mut g = Array2::default((m, nb));
        for n in 0..np {
            for r in 0..nrx {
                for i in 0..nb {
                    g[[n * nrx + r, i]] = u_np[[n, i]].conj();
                }
            }
        }
        let mut a = Array2::default((m, nc));
        for n in 0..np {
            for r in 0..nrx {
                for c in 0..ntx_l {
                    for rho in 0..nrx {
                        a[[n * nrx + r, c * nrx + rho]] = f.f[[c, n]] * u_rx[[r, rho]];
                    }
                }
            }
        }
        Ok(Self { g, a, m, nb, nc })
    }

    fn z_elem(&self, m: usize, i: usize, k: usize) -> Complex64 {
        self.g[[m, i]] * self.a[[m, k]]
    }

    /// One full iteration computed by direct summation over the tensor.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        y: &Array1<Complex64>,
        quantizer: Quantizer,
        sigma2: f64,
        b_hat: &Array1<Complex64>,
        nu_b: &Array1<f64>,
        c_hat: &Array1<Complex64>,
        nu_c: &Array1<f64>,
        s_prev: &Array1<Complex64>,
        hp: &Hyperparams,
    ) -> TensorStep {
        let (m_dim, nb, nc) = (self.m, self.nb, self.nc);

        // (R1), (R2)
        let mut zi = Array2::<Complex64>::default((m_dim, nb));
        for m in 0..m_dim {
            for i in 0..nb {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..nc {
                    acc += self.z_elem(m, i, k) * c_hat[k];
                }
                zi[[m, i]] = acc;
            }
        }
        let mut zk = Array2::<Complex64>::default((m_dim, nc));
        for m in 0..m_dim {
            for k in 0..nc {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..nb {
                    acc += b_hat[i] * self.z_elem(m, i, k);
                }
                zk[[m, k]] = acc;
            }
        }

        // (R3)
        let mut z_star = Array1::<Complex64>::default(m_dim);
        for m in 0..m_dim {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..nb {
                acc += b_hat[i] * zi[[m, i]];
            }
            z_star[m] = acc;
        }

        // (R4), (R5)
        let mut nu_p_bar = Array1::<f64>::default(m_dim);
        let mut nu_p = Array1::<f64>::default(m_dim);
        for m in 0..m_dim {
            let mut bar = 0.0;
            for i in 0..nb {
                bar += nu_b[i] * zi[[m, i]].norm_sqr();
            }
            for k in 0..nc {
                bar += nu_c[k] * zk[[m, k]].norm_sqr();
            }
            nu_p_bar[m] = bar;
            let mut extra = 0.0;
            for i in 0..nb {
                let mut inner = 0.0;
                for k in 0..nc {
                    inner += nu_c[k] * self.z_elem(m, i, k).norm_sqr();
                }
                extra += nu_b[i] * inner;
            }
            nu_p[m] = (bar + extra).max(VARIANCE_FLOOR);
        }

        // (R6)
        let mut p_hat = Array1::<Complex64>::default(m_dim);
        for m in 0..m_dim {
            p_hat[m] = z_star[m] - s_prev[m] * nu_p_bar[m];
        }

        // (R7), (R8): shared scalar moment maps (verified against quadrature
        // independently).
        let mut z_hat = Array1::<Complex64>::default(m_dim);
        let mut nu_z = Array1::<f64>::default(m_dim);
        for m in 0..m_dim {
            let (z, v) = output_moments(y[m], p_hat[m], nu_p[m], sigma2, quantizer);
            z_hat[m] = z;
            nu_z[m] = v;
        }

        // (R9), (R10)
        let mut s_hat = Array1::<Complex64>::default(m_dim);
        let mut nu_s = Array1::<f64>::default(m_dim);
        for m in 0..m_dim {
            s_hat[m] = (z_hat[m] - p_hat[m]) / nu_p[m];
            nu_s[m] = ((1.0 - nu_z[m] / nu_p[m]) / nu_p[m]).max(VARIANCE_FLOOR);
        }

        // (R11), (R12)
        let mut nu_r = Array1::<f64>::default(nc);
        let mut r_hat = Array1::<Complex64>::default(nc);
        for k in 0..nc {
            let mut prec = 0.0;
            for m in 0..m_dim {
                prec += nu_s[m] * zk[[m, k]].norm_sqr();
            }
            nu_r[k] = 1.0 / prec.max(VARIANCE_FLOOR);
            let mut lin = Complex64::new(0.0, 0.0);
            for m in 0..m_dim {
                lin += s_hat[m] * zk[[m, k]].conj();
            }
            let mut corr = 0.0;
            for m in 0..m_dim {
                let mut inner = 0.0;
                for i in 0..nb {
                    inner += nu_b[i] * self.z_elem(m, i, k).norm_sqr();
                }
                corr += nu_s[m] * inner;
            }
            r_hat[k] = c_hat[k] + lin * nu_r[k] - c_hat[k] * (nu_r[k] * corr);
        }

        // (R13), (R14)
        let mut nu_q = Array1::<f64>::default(nb);
        let mut q_hat = Array1::<Complex64>::default(nb);
        for i in 0..nb {
            let mut prec = 0.0;
            for m in 0..m_dim {
                prec += nu_s[m] * zi[[m, i]].norm_sqr();
            }
            nu_q[i] = 1.0 / prec.max(VARIANCE_FLOOR);
            let mut lin = Complex64::new(0.0, 0.0);
            for m in 0..m_dim {
                lin += s_hat[m] * zi[[m, i]].conj();
            }
            let mut corr = 0.0;
            for m in 0..m_dim {
                let mut inner = 0.0;
                for k in 0..nc {
                    inner += nu_c[k] * self.z_elem(m, i, k).norm_sqr();
                }
                corr += nu_s[m] * inner;
            }
            q_hat[i] = b_hat[i] + lin * nu_q[i] - b_hat[i] * (nu_q[i] * corr);
        }

        // (R15)-(R18): shared Bernoulli-Gaussian maps.
        let mut c_next = Array1::<Complex64>::default(nc);
        let mut nu_c_next = Array1::<f64>::default(nc);
        for k in 0..nc {
            let post = input_moments_bg(r_hat[k], nu_r[k], hp.lambda_c, hp.sigma_c2);
            c_next[k] = post.x_hat;
            nu_c_next[k] = post.nu_x.max(VARIANCE_FLOOR);
        }
        let mut b_next = Array1::<Complex64>::default(nb);
        let mut nu_b_next = Array1::<f64>::default(nb);
        for i in 0..nb {
            let post = input_moments_bg(q_hat[i], nu_q[i], hp.lambda_b, hp.sigma_b2);
            b_next[i] = post.x_hat;
            nu_b_next[i] = post.nu_x.max(VARIANCE_FLOOR);
        }

        TensorStep {
            z_star,
            nu_p_bar,
            nu_p,
            p_hat,
            z_hat,
            nu_z,
            s_hat,
            nu_s,
            nu_r,
            r_hat,
            nu_q,
            q_hat,
            c_next,
            nu_c_next,
            b_next,
            nu_b_next,
        }
    }
}

fn vec_cm_c(m: &Array2<Complex64>) -> Array1<Complex64> {
    Array1::from_iter(m.t().iter().copied())
}

fn vec_cm_r(m: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter(m.t().iter().copied())
}

fn rel_err_c(a: &Array1<Complex64>, b: &Array1<Complex64>) -> f64 {
    let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm_sqr()).sum();
    let norm: f64 = b.iter().map(|v| v.norm_sqr()).sum();
    (diff / norm.max(1e-30)).sqrt()
}

fn rel_err_r(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    let norm: f64 = b.iter().map(|v| v * v).sum();
    (diff / norm.max(1e-30)).sqrt()
}

/// Run the fast path and the literal tensor path side by side on one random
/// instance for `iterations` steps and return the worst relative error seen
/// across every state vector. The shared trajectory is advanced with mild
/// damping purely to keep it bounded; each comparison is of one undamped
/// step from an identical state.
pub fn fast_tensor_max_rel_error(
    nrx: usize,
    ntx: usize,
    taps: usize,
    np: usize,
    quantizer: Quantizer,
    seed: u64,
    iterations: usize,
) -> Result<f64> {
    use crate::channel::gen_sparse_angle_delay;
    use crate::measurement::{forward_factored, observe, snr_to_sigma2};
    use crate::phase::{gen_phase_errors, to_spectrum, PhaseParams};
    use crate::training::{assemble_f, gen_training, TrainingKind};
    use num_complex::Complex64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = gen_training(TrainingKind::IidQpsk, ntx, np, 1.0, &mut rng)?;
    let f = assemble_f(&t, taps)?;
    let c = gen_sparse_angle_delay(nrx, ntx, taps, (nrx * ntx * taps / 8).max(2), &mut rng)?;
    let eps = 2.0 * std::f64::consts::PI * 1.3 / np as f64;
    let phase = PhaseParams::new(eps, 0.01, np)?;
    let b = to_spectrum(&gen_phase_errors(&phase, &mut rng))?;
    let z = forward_factored(&c, &f, &b)?;
    let sigma2 = snr_to_sigma2(&t, 10.0)?;
    let y = observe(&z, sigma2, quantizer, &mut rng)?;

    let solver = Solver::new(&y, &f)?;
    let tensor = TensorProblem::new(&f, nrx)?;
    let hp = Hyperparams::init(taps, sigma2);
    let mut st = GampState::init(nrx, ntx * taps, np, &hp, seed);
    let y_vec = vec_cm_c(&y.y);

    let mut worst = 0.0f64;
    for _ in 0..iterations {
        let fast = solver.raw_iteration(&st, &hp);
        let lit = tensor.step(
            &y_vec,
            quantizer,
            sigma2,
            &st.b_hat,
            &st.nu_b,
            &vec_cm_c(&st.c_hat),
            &vec_cm_r(&st.nu_c),
            &vec_cm_c(&st.s_hat),
            &hp,
        );

        let checks = [
            rel_err_c(&vec_cm_c(&fast.p.z_star), &lit.z_star),
            rel_err_r(&vec_cm_r(&fast.p.nu_p_bar), &lit.nu_p_bar),
            rel_err_r(&vec_cm_r(&fast.p.nu_p), &lit.nu_p),
            rel_err_c(&vec_cm_c(&fast.p.p_hat), &lit.p_hat),
            rel_err_c(&vec_cm_c(&fast.z_hat), &lit.z_hat),
            rel_err_r(&vec_cm_r(&fast.nu_z), &lit.nu_z),
            rel_err_c(&vec_cm_c(&fast.s_hat), &lit.s_hat),
            rel_err_r(&vec_cm_r(&fast.nu_s), &lit.nu_s),
            rel_err_r(&vec_cm_r(&fast.rq.nu_r), &lit.nu_r),
            rel_err_c(&vec_cm_c(&fast.rq.r_hat), &lit.r_hat),
            rel_err_r(&fast.rq.nu_q, &lit.nu_q),
            rel_err_c(&fast.rq.q_hat, &lit.q_hat),
            rel_err_c(&vec_cm_c(&fast.c_next), &lit.c_next),
            rel_err_r(&vec_cm_r(&fast.nu_c_next), &lit.nu_c_next),
            rel_err_c(&fast.b_next, &lit.b_next),
            rel_err_r(&fast.nu_b_next, &lit.nu_b_next),
        ];
        for e in checks {
            worst = worst.max(e);
        }

        // Advance the shared state (damped for boundedness).
        let delta = 0.5;
        let dc = Complex64::new(delta, 0.0);
        let oc = Complex64::new(1.0 - delta, 0.0);
        st.s_hat = fast.s_hat.mapv(|v| v * dc) + st.s_hat.mapv(|v| v * oc);
        st.nu_s = &fast.nu_s * delta + &st.nu_s * (1.0 - delta);
        st.c_hat = fast.c_next.mapv(|v| v * dc) + st.c_hat.mapv(|v| v * oc);
        st.nu_c = &fast.nu_c_next * delta + &st.nu_c * (1.0 - delta);
        st.b_hat = fast.b_next.mapv(|v| v * dc) + st.b_hat.mapv(|v| v * oc);
        st.nu_b = &fast.nu_b_next * delta + &st.nu_b * (1.0 - delta);
        st.z_star = fast.p.z_star;
        st.iteration += 1;
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Quadrature oracles
// ---------------------------------------------------------------------------

fn simpson(f0: f64, f1: f64, f2: f64, h: f64) -> f64 {
    h / 6.0 * (f0 + 4.0 * f1 + f2)
}

fn adaptive_simpson_inner(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(fa, flm, fm, m - a);
    let right = simpson(fm, frm, fb, b - m);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::QuadratureNonConvergent);
    }
    // Floor the child tolerance near machine precision; below that the
    // refinement test is pure rounding noise.
    let child = (tol / 2.0).max(1e-16);
    let l = adaptive_simpson_inner(f, a, m, fa, flm, fm, left, child, depth - 1)?;
    let r = adaptive_simpson_inner(f, m, b, fm, frm, fb, right, child, depth - 1)?;
    Ok(l + r)
}

/// Adaptive Simpson integration to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if !(a < b) {
        return Ok(0.0);
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson(fa, fm, fb, b - a);
    adaptive_simpson_inner(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// Zeroth, first and second moments of an unnormalized weight function.
///
/// The weight is normalized by its scanned peak (relative accuracy even for
/// tiny total mass) and the domain is pre-split into the scan panels before
/// adaptive refinement, so narrow interior features cannot be skipped by a
/// deceptively smooth top-level estimate.
fn weighted_moments(weight: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> Result<(f64, f64, f64)> {
    const PANELS: usize = 128;
    let mut peak = 0.0f64;
    for i in 0..=2 * PANELS {
        let z = lo + (hi - lo) * i as f64 / (2 * PANELS) as f64;
        peak = peak.max(weight(z));
    }
    if !(peak > 0.0) {
        return Err(Error::QuadratureNonConvergent);
    }
    let scaled = move |z: f64| weight(z) / peak;
    let span = (hi - lo).max(1e-12);
    let zmax = lo.abs().max(hi.abs()).max(1.0);
    let panel_tol = 1e-12 * span / PANELS as f64;
    let mut sums = [0.0f64; 3];
    for i in 0..PANELS {
        let a = lo + span * i as f64 / PANELS as f64;
        let b = lo + span * (i + 1) as f64 / PANELS as f64;
        sums[0] += adaptive_simpson(&scaled, a, b, panel_tol)?;
        sums[1] += adaptive_simpson(&|z| z * scaled(z), a, b, panel_tol * zmax)?;
        sums[2] += adaptive_simpson(&|z| z * z * scaled(z), a, b, panel_tol * zmax * zmax)?;
    }
    Ok((sums[0] * peak, sums[1] * peak, sums[2] * peak))
}

fn real_gauss(x: f64, mean: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return 0.0;
    }
    (-(x - mean) * (x - mean) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Quadrature posterior moments for one real dimension of the output channel:
/// prior `N(m, v)`, likelihood either a Gaussian around the observation
/// (variance `w`) or a probit sign observation through noise variance `w`.
fn quad_output_dim(y_dim: f64, m: f64, v: f64, w: f64, one_bit: bool) -> Result<(f64, f64)> {
    let sd = v.sqrt();
    let (lo, hi) = if one_bit {
        let s = if y_dim >= 0.0 { 1.0 } else { -1.0 };
        if w <= 0.0 {
            // Hard sign: the posterior is the prior truncated to one side.
            if s > 0.0 {
                (0.0, m.max(0.0) + 14.0 * sd)
            } else {
                (m.min(0.0) - 14.0 * sd, 0.0)
            }
        } else {
            (m - 14.0 * sd, m + 14.0 * sd)
        }
    } else {
        let span = 14.0 * v.max(w).sqrt();
        (m.min(y_dim) - span, m.max(y_dim) + span)
    };
    let like = |z: f64| -> f64 {
        if one_bit {
            let s = if y_dim >= 0.0 { 1.0 } else { -1.0 };
            if w <= 0.0 {
                // Hard sign; the integration domain is already restricted to
                // the observed orthant.
                1.0
            } else {
                normal_cdf(s * z / w.sqrt())
            }
        } else {
            real_gauss(y_dim, z, w)
        }
    };
    let weight = |z: f64| like(z) * real_gauss(z, m, v);
    let (z0, z1, z2) = weighted_moments(&weight, lo, hi)?;
    if z0 <= 0.0 {
        return Err(Error::QuadratureNonConvergent);
    }
    let mean = z1 / z0;
    Ok((mean, (z2 / z0 - mean * mean).max(0.0)))
}

/// Quadrature version of the output moments (both quantizers).
pub fn quad_output_moments(
    y: Complex64,
    p_hat: Complex64,
    nu_p: f64,
    sigma2: f64,
    q: Quantizer,
) -> Result<(Complex64, f64)> {
    let one_bit = matches!(q, Quantizer::OneBit);
    let (mr, vr) = quad_output_dim(y.re, p_hat.re, nu_p / 2.0, sigma2 / 2.0, one_bit)?;
    let (mi, vi) = quad_output_dim(y.im, p_hat.im, nu_p / 2.0, sigma2 / 2.0, one_bit)?;
    Ok((Complex64::new(mr, mi), vr + vi))
}

/// Quadrature version of the Bernoulli-Gaussian input moments. The point
/// mass is handled exactly; only the Gaussian-product integrals are numeric.
pub fn quad_bg_moments(
    r_hat: Complex64,
    nu_r: f64,
    lambda: f64,
    sigma_x2: f64,
) -> Result<(Complex64, f64, f64)> {
    if lambda >= 1.0 {
        return Ok((Complex64::new(0.0, 0.0), 0.0, 0.0));
    }
    let v_prior = sigma_x2 / 2.0;
    let v_noise = nu_r / 2.0;
    let dim = |r_dim: f64| -> Result<(f64, f64, f64)> {
        let sd = (v_prior + v_noise).sqrt();
        let lo = -14.0 * sd + r_dim.min(0.0);
        let hi = 14.0 * sd + r_dim.max(0.0);
        let weight = move |x: f64| real_gauss(x, 0.0, v_prior) * real_gauss(r_dim, x, v_noise);
        weighted_moments(&weight, lo, hi)
    };
    let (z0r, z1r, z2r) = dim(r_hat.re)?;
    let (z0i, z1i, z2i) = dim(r_hat.im)?;
    if z0r <= 0.0 || z0i <= 0.0 {
        return Err(Error::QuadratureNonConvergent);
    }
    // Mixture weights: point mass vs the Gaussian branch.
    let w0 = lambda * real_gauss(r_hat.re, 0.0, v_noise) * real_gauss(r_hat.im, 0.0, v_noise);
    let w1 = (1.0 - lambda) * z0r * z0i;
    let pi = w1 / (w0 + w1);
    let mean = Complex64::new(z1r / z0r, z1i / z0i) * pi;
    let e_abs2 = pi * (z2r / z0r + z2i / z0i);
    Ok((mean, (e_abs2 - mean.norm_sqr()).max(0.0), pi))
}

// ---------------------------------------------------------------------------
// Grid-search + least-squares joint estimator
// ---------------------------------------------------------------------------

/// Solve `A X = B` for square complex `A` by Gaussian elimination with
/// partial pivoting. Errors on a numerically singular pivot.
fn solve_linear(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::InvalidDimension("linear solve shape mismatch".into()));
    }
    let mut m = a.clone();
    let mut x = b.clone();
    let scale = a.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300);
    for col in 0..n {
        let (pivot_row, pivot_mag) = (col..n)
            .map(|r| (r, m[[r, col]].norm()))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        if pivot_mag < 1e-12 * scale {
            return Err(Error::DegenerateInput("rank-deficient system".into()));
        }
        if pivot_row != col {
            for j in 0..n {
                m.swap([col, j], [pivot_row, j]);
            }
            for j in 0..x.ncols() {
                x.swap([col, j], [pivot_row, j]);
            }
        }
        let pivot = m[[col, col]];
        for r in col + 1..n {
            let factor = m[[r, col]] / pivot;
            if factor.norm() == 0.0 {
                continue;
            }
            for j in col..n {
                let v = m[[col, j]];
                m[[r, j]] -= factor * v;
            }
            for j in 0..x.ncols() {
                let v = x[[col, j]];
                x[[r, j]] -= factor * v;
            }
        }
    }
    for col in (0..n).rev() {
        for j in 0..x.ncols() {
            let mut acc = x[[col, j]];
            for k in col + 1..n {
                acc -= m[[col, k]] * x[[k, j]];
            }
            x[[col, j]] = acc / m[[col, col]];
        }
    }
    Ok(x)
}

/// Result of the grid-search + least-squares oracle.
pub struct GridLsResult {
    pub eps_hat: f64,
    pub h_hat: crate::channel::WidebandChannel,
    pub residual: f64,
}

/// Joint estimation for tiny full-resolution instances: for each CFO
/// candidate, de-rotate the received block and solve least squares for the
/// channel taps over the stacked linear model; return the candidate with the
/// smallest residual. Assumes no phase noise.
pub fn grid_ls_estimate(
    y: &ReceivedBlock,
    t: &TrainingBlock,
    taps: usize,
    grid: &[f64],
) -> Result<GridLsResult> {
    if y.quantizer != Quantizer::Full {
        return Err(Error::InvalidArgument("grid LS needs full-resolution data".into()));
    }
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty CFO grid".into()));
    }
    let np = y.y.ncols();
    let ntx = t.t.nrows();
    if ntx * taps > np {
        return Err(Error::InvalidArgument("need Np >= Ntx L for least squares".into()));
    }
    // W stacks T J_l; the Gram matrix is shared by all candidates.
    let mut w = Array2::default((ntx * taps, np));
    for ell in 0..taps {
        w.slice_mut(s![ell * ntx..(ell + 1) * ntx, ..])
            .assign(&circ_shift_columns(&t.t, ell)?);
    }
    let w_h = w.t().mapv(|v| v.conj());
    let gram = w.dot(&w_h);

    let mut best: Option<GridLsResult> = None;
    for &eps in grid {
        let mut de_rot = y.y.clone();
        for (n, mut col) in de_rot.columns_mut().into_iter().enumerate() {
            let rot = Complex64::from_polar(1.0, -eps * (n + 1) as f64);
            col.mapv_inplace(|v| v * rot);
        }
        // Solve Gram H^H = W Yd^H, then H = (solution)^H.
        let rhs = w.dot(&de_rot.t().mapv(|v| v.conj()));
        let h_herm = solve_linear(&gram, &rhs)?;
        let h = h_herm.t().mapv(|v| v.conj());
        let residual = fro_norm_sq(&(&de_rot - &h.dot(&w))).sqrt();
        if best.as_ref().map_or(true, |b| residual < b.residual) {
            let mut tap_list = Vec::with_capacity(taps);
            for ell in 0..taps {
                tap_list.push(h.slice(s![.., ell * ntx..(ell + 1) * ntx]).to_owned());
            }
            best = Some(GridLsResult {
                eps_hat: eps,
                h_hat: crate::channel::WidebandChannel { taps: tap_list, symbol_period: 1.0 },
                residual,
            });
        }
    }
    Ok(best.expect("grid checked nonempty"))
}

// ---------------------------------------------------------------------------
// CFO propagation identity
// ---------------------------------------------------------------------------

/// Outcome of the propagation identity check.
pub struct CfoPropagation {
    /// `||Z(C, eps) - Z(C(eps), 0)||_F / ||Z(C, eps)||_F`.
    pub residual: f64,
    pub nnz_original: usize,
    pub nnz_propagated: usize,
}

fn nnz_relative(c: &Array2<Complex64>) -> usize {
    let max = c.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    c.iter().filter(|v| v.norm() > 1e-9 * max).count()
}

/// Verify that with circulant constant-modulus training (`L = 1`,
/// `Np = Ntx`) an on-grid CFO `eps = 2 pi d / Np` can be absorbed into a
/// permuted, rescaled channel `C(eps) = e^{j eps} C Lambda_T J_{N-d}
/// Lambda_T^{-1}` with identical support size.
///
/// The leading unit scalar reflects the time origin `n = 1` of the phase
/// ramp; it does not affect the support.
pub fn cfo_propagation_check(
    t: &TrainingBlock,
    c: &AngleDelayChannel,
    d: usize,
) -> Result<CfoPropagation> {
    let n = t.t.nrows();
    if t.t.ncols() != n {
        return Err(Error::InvalidArgument("training must be square (Np = Ntx)".into()));
    }
    if c.taps != 1 || c.ntx != n {
        return Err(Error::InvalidArgument("channel must be single-tap with Ntx = Np".into()));
    }
    if d >= n {
        return Err(Error::InvalidArgument("CFO bin index out of range".into()));
    }
    // Circulant check: T[i, j] = T[0, (j - i) mod n].
    let t_scale = t.t.iter().map(|v| v.norm()).fold(0.0, f64::max);
    for i in 0..n {
        for j in 0..n {
            let want = t.t[[0, (j + n - i) % n]];
            if (t.t[[i, j]] - want).norm() > 1e-9 * t_scale {
                return Err(Error::InvalidArgument("training block is not circulant".into()));
            }
        }
    }
    // Lambda_T from U* T U; must come out diagonal.
    let u = unitary_dft_matrix(n);
    let u_h = u.t().mapv(|v| v.conj());
    let lam_full = u_h.dot(&t.t).dot(&u);
    let mut lambda = Array1::<Complex64>::default(n);
    for k in 0..n {
        lambda[k] = lam_full[[k, k]];
        if lambda[k].norm() < 1e-9 * t_scale {
            return Err(Error::DegenerateInput("training eigenvalue near zero".into()));
        }
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && lam_full[[i, j]].norm() > 1e-7 * t_scale {
                return Err(Error::InvalidArgument("training did not diagonalize".into()));
            }
        }
    }

    let eps = 2.0 * std::f64::consts::PI * d as f64 / n as f64;
    // C(eps) = e^{j eps} C Lambda J_{n-d} Lambda^{-1}.
    let mut scaled = c.c.clone();
    for (mut col, lam) in scaled.columns_mut().into_iter().zip(lambda.iter()) {
        col.mapv_inplace(|v| v * lam);
    }
    let mut c_eps = circ_shift_columns(&scaled, (n - d) % n)?;
    for (mut col, lam) in c_eps.columns_mut().into_iter().zip(lambda.iter()) {
        col.mapv_inplace(|v| v / lam);
    }
    let phase = Complex64::from_polar(1.0, eps);
    c_eps.mapv_inplace(|v| v * phase);

    // Z(C, eps) vs Z(C(eps), 0), both through the tapwise forward model.
    let h = from_angle_delay(c, 1.0)?;
    let d_vec = PhaseErrorVector {
        d: Array1::from_iter((1..=n).map(|k| Complex64::from_polar(1.0, eps * k as f64))),
    };
    let z1 = forward_tapwise(&h, t, &d_vec)?;
    let c_eps_chan = AngleDelayChannel { c: c_eps.clone(), ntx: n, taps: 1 };
    let h_eps = from_angle_delay(&c_eps_chan, 1.0)?;
    let ones = PhaseErrorVector { d: Array1::from_elem(n, Complex64::new(1.0, 0.0)) };
    let z0 = forward_tapwise(&h_eps, t, &ones)?;

    let residual = (fro_norm_sq(&(&z1 - &z0)) / fro_norm_sq(&z1)).sqrt();
    Ok(CfoPropagation {
        residual,
        nnz_original: nnz_relative(&c.c),
        nnz_propagated: nnz_relative(&c_eps),
    })
}

// ---------------------------------------------------------------------------
// Self-test battery (shared by the CLI `selftest` subcommand and the
// acceptance suite)
// ---------------------------------------------------------------------------

/// One named check with its outcome.
pub struct SelfTestResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Worst factored-vs-tapwise forward-model disagreement over random
/// instances.
pub fn forward_identity_max_rel_error(instances: usize, seed: u64) -> Result<f64> {
    use crate::channel::{sample_rays, synthesize_taps, to_angle_delay, ChannelGenParams};
    use crate::measurement::{forward_factored, forward_tapwise};
    use crate::phase::{gen_phase_errors, to_spectrum, PhaseParams};
    use crate::training::{assemble_f, gen_training, TrainingKind};

    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let params = ChannelGenParams {
            n_clusters: 2,
            rays_per_cluster: 3,
            angle_spread: 0.3,
            delay_spread_max: 1.2e-8,
            nrx: 4,
            ntx: 4,
            taps: 2,
            symbol_period: 1e-8,
        };
        let h = synthesize_taps(&sample_rays(&params, &mut rng)?, &params)?;
        let kind = match i % 3 {
            0 => TrainingKind::IidQpsk,
            1 => TrainingKind::IidGaussian,
            _ => TrainingKind::ShiftedZc,
        };
        let t = gen_training(kind, 4, 16, 1.0, &mut rng)?;
        let phase = PhaseParams::new(0.21, 0.05, 16)?;
        let d = gen_phase_errors(&phase, &mut rng);
        let z_tap = forward_tapwise(&h, &t, &d)?;
        let z_fac = forward_factored(&to_angle_delay(&h)?, &assemble_f(&t, 2)?, &to_spectrum(&d)?)?;
        let rel = (fro_norm_sq(&(&z_tap - &z_fac)) / fro_norm_sq(&z_tap)).sqrt();
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Worst closed-form-vs-quadrature error for the output moments over a
/// 100-point parameter grid.
pub fn output_moment_grid_max_error() -> Result<f64> {
    let mut worst = 0.0f64;
    let y = Complex64::new(1.0, -1.0);
    for &pr in &[-3.0, -1.0, 0.0, 0.7, 2.5] {
        for &pi_ in &[-2.0, -0.3, 0.0, 1.0, 3.0] {
            for &vp in &[0.2, 2.0] {
                for &(s2, q) in &[(0.5, Quantizer::OneBit), (1.5, Quantizer::Full)] {
                    let p = Complex64::new(pr, pi_);
                    let (mc, vc) = output_moments(y, p, vp, s2, q);
                    let (mq, vq) = quad_output_moments(y, p, vp, s2, q)?;
                    worst = worst.max((mc - mq).norm()).max((vc - vq).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Worst closed-form-vs-quadrature error for the Bernoulli-Gaussian input
/// moments over a 100-point parameter grid.
pub fn input_moment_grid_max_error() -> Result<f64> {
    let mut worst = 0.0f64;
    for &rr in &[-2.5, -0.8, 0.0, 0.4, 1.9] {
        for &ri in &[-1.5, 0.0, 0.2, 0.9, 2.8] {
            for &nr in &[0.1, 1.0] {
                for &(lambda, sx) in &[(0.5, 1.0), (0.95, 4.0)] {
                    let r = Complex64::new(rr, ri);
                    let post = input_moments_bg(r, nr, lambda, sx);
                    let (mq, vq, pq) = quad_bg_moments(r, nr, lambda, sx)?;
                    worst = worst
                        .max((post.x_hat - mq).norm())
                        .max((post.nu_x - vq).abs())
                        .max((post.pi - pq).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Run the full verification battery.
pub fn run_selftest() -> Vec<SelfTestResult> {
    use crate::channel::gen_sparse_angle_delay;
    use crate::training::{gen_training, TrainingKind};

    let mut out = Vec::new();
    let mut push = |name: &str, res: Result<(f64, f64)>| {
        // (value, limit)
        match res {
            Ok((value, limit)) => out.push(SelfTestResult {
                name: name.to_string(),
                passed: value <= limit,
                detail: format!("{value:.3e} (limit {limit:.1e})"),
            }),
            Err(e) => out.push(SelfTestResult {
                name: name.to_string(),
                passed: false,
                detail: format!("error: {e}"),
            }),
        }
    };

    let tensor = |q: Quantizer| -> Result<(f64, f64)> {
        let mut worst = 0.0f64;
        for seed in 0..10 {
            worst = worst.max(fast_tensor_max_rel_error(4, 4, 2, 8, q, 91 + seed, 3)?);
        }
        Ok((worst, 1e-8))
    };
    push("fast vs tensor recursion (full resolution)", tensor(Quantizer::Full));
    push("fast vs tensor recursion (one-bit)", tensor(Quantizer::OneBit));
    push(
        "output moments vs quadrature (100-point grid)",
        output_moment_grid_max_error().map(|v| (v, 1e-6)),
    );
    push(
        "input moments vs quadrature (100-point grid)",
        input_moment_grid_max_error().map(|v| (v, 1e-6)),
    );
    push(
        "tapwise vs factored forward model (50 instances)",
        forward_identity_max_rel_error(50, 7).map(|v| (v, 1e-10)),
    );
    push(
        "CFO propagation identity (circulant ZC, Np=Ntx=16)",
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let t = gen_training(TrainingKind::ShiftedZc, 16, 16, 1.0, &mut rng)?;
            let c = gen_sparse_angle_delay(8, 16, 1, 5, &mut rng)?;
            let mut worst = 0.0f64;
            for d in [0usize, 1, 3, 7, 15] {
                let res = cfo_propagation_check(&t, &c, d)?;
                if res.nnz_original != res.nnz_propagated {
                    return Ok((1.0, 1e-10));
                }
                worst = worst.max(res.residual);
            }
            Ok((worst, 1e-10))
        })(),
    );
    out
}
