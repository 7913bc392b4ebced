//! Vector-variance parametric bilinear GAMP specialized to the joint CFO /
//! channel estimation measurement structure, with EM learning of the
//! Bernoulli-Gaussian prior parameters.
//!
//! One iteration follows the reference recursion (R1)-(R19) but never touches
//! the third-order tensor: every step reduces to products of `Nrx x Np` and
//! `(Ntx L) x Np` matrices plus length-`Np` FFTs, so an iteration costs
//! `O(Nrx Ntx L Np)`. The reductions rely on two invariances of the operator:
//! DFT entries have constant modulus `1/sqrt(Np)`, and the Kronecker factor
//! `U_rx` makes per-column blocks of the squared operator constant, which
//! collapses the variance sums onto the column means `mu_c` and `mu_z`.
//! A literal tensor implementation lives in [`crate::oracle`] and the two are
//! held to 1e-8 agreement in tests.

pub mod moments;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::kernels::{fro_norm_sq, Dft};
use crate::measurement::{Quantizer, ReceivedBlock};
use crate::training::EffectiveTraining;
use crate::{Error, Result};
use moments::{em_update_bg, input_moments_bg, output_moments, BgPosterior};

/// Floor applied to every computed variance and precision denominator.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Bernoulli-Gaussian prior and noise parameters.
///
/// `lambda` is the probability of an entry being exactly zero; `sigma_*2` the
/// variance of active coefficients. The noise variance is treated as known
/// (calibrated from the configured SNR): the one-bit likelihood needs a noise
/// scale and learning it from sign data alone is ill-posed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda_b: f64,
    pub lambda_c: f64,
    pub sigma_b2: f64,
    pub sigma_c2: f64,
    pub sigma2: f64,
}

impl Hyperparams {
    /// Default initialization: weakly sparse priors scaled so the prior
    /// energies match `E||b||^2 = Np` and `E||C||^2 = Nrx Ntx`.
    pub fn init(taps: usize, sigma2: f64) -> Self {
        let lambda_b = 0.99;
        let lambda_c = 0.95;
        Self {
            lambda_b,
            lambda_c,
            sigma_b2: 1.0 / (1.0 - lambda_b),
            sigma_c2: 1.0 / ((1.0 - lambda_c) * taps.max(1) as f64),
            sigma2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.lambda_b, self.lambda_c].iter().all(|p| (0.0..1.0).contains(p)) {
            return Err(Error::InvalidArgument("lambda must be in [0, 1)".into()));
        }
        if self.sigma_b2 <= 0.0 || self.sigma_c2 <= 0.0 || self.sigma2 < 0.0 {
            return Err(Error::InvalidArgument("variances must be positive".into()));
        }
        Ok(())
    }
}

/// Solver controls.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct GampConfig {
    /// Maximum inner iterations per EM pass.
    pub t_max: usize,
    /// Relative-change stopping threshold on the bilinear product (R19).
    pub tau_stop: f64,
    /// Fixed damping factor in (0, 1] applied to the estimates, their
    /// variances and the correction vectors. Undamped bilinear GAMP diverges
    /// readily.
    pub damping: f64,
    /// EM outer iterations (0 disables hyperparameter learning).
    pub em_outer_iters: usize,
    /// Restarts with a fresh initialization after a divergence.
    pub restarts: usize,
    /// Seed for the random initialization of the channel estimate.
    pub init_seed: u64,
}

impl Default for GampConfig {
    fn default() -> Self {
        Self {
            t_max: 200,
            tau_stop: 1e-7,
            damping: 0.3,
            em_outer_iters: 10,
            restarts: 2,
            init_seed: 0,
        }
    }
}

/// All persistent per-iteration solver quantities.
#[derive(Debug, Clone)]
pub struct GampState {
    pub b_hat: Array1<Complex64>,
    pub nu_b: Array1<f64>,
    pub c_hat: Array2<Complex64>,
    pub nu_c: Array2<f64>,
    pub p_hat: Array2<Complex64>,
    pub nu_p: Array2<f64>,
    pub nu_p_bar: Array2<f64>,
    pub z_hat: Array2<Complex64>,
    pub nu_z: Array2<f64>,
    pub s_hat: Array2<Complex64>,
    pub nu_s: Array2<f64>,
    pub r_hat: Array2<Complex64>,
    pub nu_r: Array2<f64>,
    pub q_hat: Array1<Complex64>,
    pub nu_q: Array1<f64>,
    /// Bilinear product `U C F diag(U* b)` from the last iteration; drives
    /// the (R19) stopping rule.
    pub z_star: Array2<Complex64>,
    pub iteration: usize,
}

impl GampState {
    /// Initial state: `b` starts at the zero-CFO spectrum `sqrt(Np) e1`
    /// (which also pins the bilinear scale ambiguity), `C` at a random draw
    /// from its prior, and the correction term `s(0) = 0`.
    ///
    /// `randomize_b` (used by restarts) replaces the deterministic spike
    /// with a random spectrum of the same energy so a retry explores a
    /// different basin.
    pub fn init_with(
        nrx: usize,
        ntx_l: usize,
        np: usize,
        hp: &Hyperparams,
        seed: u64,
        randomize_b: bool,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b_hat = Array1::default(np);
        if randomize_b {
            let n = Normal::new(0.0, 1.0).expect("unit normal");
            for v in b_hat.iter_mut() {
                *v = Complex64::new(n.sample(&mut rng), n.sample(&mut rng));
            }
            let energy: f64 = b_hat.iter().map(|v| v.norm_sqr()).sum();
            let s = (np as f64 / energy.max(1e-300)).sqrt();
            b_hat.mapv_inplace(|v| v * s);
        } else {
            b_hat[0] = Complex64::new((np as f64).sqrt(), 0.0);
        }
        let c_var = (1.0 - hp.lambda_c) * hp.sigma_c2;
        let n = Normal::new(0.0, (c_var / 2.0).sqrt()).expect("positive variance");
        let c_hat =
            Array2::from_shape_fn((nrx, ntx_l), |_| Complex64::new(n.sample(&mut rng), n.sample(&mut rng)));
        Self {
            b_hat,
            nu_b: Array1::from_elem(np, (1.0 - hp.lambda_b) * hp.sigma_b2),
            c_hat,
            nu_c: Array2::from_elem((nrx, ntx_l), c_var),
            p_hat: Array2::default((nrx, np)),
            nu_p: Array2::from_elem((nrx, np), VARIANCE_FLOOR),
            nu_p_bar: Array2::from_elem((nrx, np), VARIANCE_FLOOR),
            z_hat: Array2::default((nrx, np)),
            nu_z: Array2::from_elem((nrx, np), VARIANCE_FLOOR),
            s_hat: Array2::default((nrx, np)),
            nu_s: Array2::default((nrx, np)),
            r_hat: Array2::default((nrx, ntx_l)),
            nu_r: Array2::from_elem((nrx, ntx_l), VARIANCE_FLOOR),
            q_hat: Array1::default(np),
            nu_q: Array1::from_elem(np, VARIANCE_FLOOR),
            z_star: Array2::default((nrx, np)),
            iteration: 0,
        }
    }

    pub fn init(nrx: usize, ntx_l: usize, np: usize, hp: &Hyperparams, seed: u64) -> Self {
        Self::init_with(nrx, ntx_l, np, hp, seed, false)
    }
}

/// Intermediate products shared between the P-stage and the R/Q-stage of one
/// iteration.
pub struct StageCache {
    /// `U_Np* b_hat` (time-domain phase estimate).
    pub ub: Array1<Complex64>,
    /// `U_rx C_hat F`.
    pub ucf: Array2<Complex64>,
    /// `|U_rx C_hat F|^2`.
    pub ucf_abs2: Array2<f64>,
    /// `F diag(U_Np* b_hat)`.
    pub fhat: Array2<Complex64>,
    /// `|F diag(U_Np* b_hat)|^2`.
    pub fhat_abs2: Array2<f64>,
    /// Column means of `nu_c` (length `Ntx L`).
    pub mu_c: Array1<f64>,
    /// `sum(nu_b)`.
    pub sum_nu_b: f64,
}

/// Outputs of the P-stage (R1)-(R6).
pub struct PStage {
    pub z_star: Array2<Complex64>,
    pub nu_p_bar: Array2<f64>,
    pub nu_p: Array2<f64>,
    pub p_hat: Array2<Complex64>,
    pub cache: StageCache,
}

/// Outputs of the R/Q-stage (R11)-(R14).
pub struct RqStage {
    pub nu_r: Array2<f64>,
    pub r_hat: Array2<Complex64>,
    pub nu_q: Array1<f64>,
    pub q_hat: Array1<Complex64>,
}

/// Every quantity produced by one undamped iteration; compared against the
/// literal tensor recursion in tests.
pub struct StepOutputs {
    pub p: PStage,
    pub z_hat: Array2<Complex64>,
    pub nu_z: Array2<f64>,
    pub s_hat: Array2<Complex64>,
    pub nu_s: Array2<f64>,
    pub rq: RqStage,
    pub c_next: Array2<Complex64>,
    pub nu_c_next: Array2<f64>,
    pub b_next: Array1<Complex64>,
    pub nu_b_next: Array1<f64>,
}

/// Per-iteration trace record, emitted as CSV by the harness.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceRow {
    pub em_iter: usize,
    pub iteration: usize,
    pub residual: f64,
    pub damping: f64,
    pub lambda_b: f64,
    pub lambda_c: f64,
    pub sigma_b2: f64,
    pub sigma_c2: f64,
}

/// Final estimates plus diagnostics.
pub struct RunResult {
    pub b_hat: Array1<Complex64>,
    pub c_hat: Array2<Complex64>,
    pub trace: Vec<TraceRow>,
    pub iterations: usize,
    pub converged: bool,
    pub attempts: usize,
    pub hyperparams: Hyperparams,
}

/// The fast solver bound to one measurement instance.
pub struct Solver<'a> {
    y: &'a Array2<Complex64>,
    quantizer: Quantizer,
    sigma2: f64,
    f: &'a Array2<Complex64>,
    f_abs2: Array2<f64>,
    dft_rx: Dft,
    dft_np: Dft,
    nrx: usize,
    ntx_l: usize,
    np: usize,
}

fn col_means(m: &Array2<f64>) -> Array1<f64> {
    let rows = m.nrows() as f64;
    m.sum_axis(ndarray::Axis(0)) / rows
}

impl<'a> Solver<'a> {
    pub fn new(y: &'a ReceivedBlock, f: &'a EffectiveTraining) -> Result<Self> {
        let (nrx, np) = y.y.dim();
        let (ntx_l, np_f) = f.f.dim();
        if np != np_f {
            return Err(Error::InvalidDimension(format!(
                "received block has {np} columns but F has {np_f}"
            )));
        }
        Ok(Self {
            y: &y.y,
            quantizer: y.quantizer,
            sigma2: y.sigma2,
            f: &f.f,
            f_abs2: f.f.mapv(|v| v.norm_sqr()),
            dft_rx: Dft::new(nrx)?,
            dft_np: Dft::new(np)?,
            nrx,
            ntx_l,
            np,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nrx, self.ntx_l, self.np)
    }

    /// (R1)-(R6). `s_prev` is the correction carried over from the previous
    /// iteration (`s(0) = 0`).
    pub fn p_stage(
        &self,
        c_hat: &Array2<Complex64>,
        nu_c: &Array2<f64>,
        b_hat: &Array1<Complex64>,
        nu_b: &Array1<f64>,
        s_prev: &Array2<Complex64>,
    ) -> PStage {
        let np_f = self.np as f64;
        let ub = self.dft_np.inverse(b_hat.view());
        let ucf = self.dft_rx.forward_cols(&c_hat.dot(self.f));
        let ucf_abs2 = ucf.mapv(|v| v.norm_sqr());

        let mut z_star = ucf.clone();
        for (mut col, scale) in z_star.columns_mut().into_iter().zip(ub.iter()) {
            col.mapv_inplace(|v| v * scale);
        }

        let sum_nu_b: f64 = nu_b.sum();
        let mu_c = col_means(nu_c);

        let mut fhat = self.f.clone();
        let mut fhat_abs2 = self.f_abs2.clone();
        for ((mut col, mut col2), scale) in fhat
            .columns_mut()
            .into_iter()
            .zip(fhat_abs2.columns_mut())
            .zip(ub.iter())
        {
            let mag2 = scale.norm_sqr();
            col.mapv_inplace(|v| v * scale);
            col2.mapv_inplace(|v| v * mag2);
        }

        // (R4): the first summand collapses to a constant times |U C F|^2,
        // the second is constant down each receive antenna.
        let w2 = mu_c.dot(&fhat_abs2); // length Np
        let mut nu_p_bar = ucf_abs2.mapv(|v| v * (sum_nu_b / np_f));
        for (mut col, add) in nu_p_bar.columns_mut().into_iter().zip(w2.iter()) {
            col.mapv_inplace(|v| v + add);
        }

        // (R5): variance-product term; |F|^2 appears unmodulated because the
        // DFT magnitudes are constant.
        let r5 = mu_c.dot(&self.f_abs2).mapv(|v| v * (sum_nu_b / np_f)); // length Np
        let mut nu_p = nu_p_bar.clone();
        for (mut col, add) in nu_p.columns_mut().into_iter().zip(r5.iter()) {
            col.mapv_inplace(|v| (v + add).max(VARIANCE_FLOOR));
        }

        // (R6): Onsager correction.
        let p_hat = &z_star - &(s_prev * &nu_p_bar);

        PStage {
            z_star,
            nu_p_bar,
            nu_p,
            p_hat,
            cache: StageCache { ub, ucf, ucf_abs2, fhat, fhat_abs2, mu_c, sum_nu_b },
        }
    }

    /// (R7)-(R8): elementwise output posterior.
    pub fn output_stage(
        &self,
        p_hat: &Array2<Complex64>,
        nu_p: &Array2<f64>,
    ) -> (Array2<Complex64>, Array2<f64>) {
        let mut z_hat = Array2::default((self.nrx, self.np));
        let mut nu_z = Array2::default((self.nrx, self.np));
        for r in 0..self.nrx {
            for n in 0..self.np {
                let (z, v) = output_moments(
                    self.y[[r, n]],
                    p_hat[[r, n]],
                    nu_p[[r, n]],
                    self.sigma2,
                    self.quantizer,
                );
                z_hat[[r, n]] = z;
                nu_z[[r, n]] = v;
            }
        }
        (z_hat, nu_z)
    }

    /// (R9)-(R10).
    pub fn correction_stage(
        &self,
        p: &PStage,
        z_hat: &Array2<Complex64>,
        nu_z: &Array2<f64>,
    ) -> (Array2<Complex64>, Array2<f64>) {
        let mut s_hat = Array2::default((self.nrx, self.np));
        let mut nu_s = Array2::default((self.nrx, self.np));
        for r in 0..self.nrx {
            for n in 0..self.np {
                let vp = p.nu_p[[r, n]];
                s_hat[[r, n]] = (z_hat[[r, n]] - p.p_hat[[r, n]]) / vp;
                nu_s[[r, n]] = ((1.0 - nu_z[[r, n]] / vp) / vp).max(VARIANCE_FLOOR);
            }
        }
        (s_hat, nu_s)
    }

    /// (R11)-(R14). `s_hat`/`nu_s` are the current (possibly damped)
    /// correction vectors.
    pub fn rq_stage(
        &self,
        cache: &StageCache,
        c_hat: &Array2<Complex64>,
        b_hat: &Array1<Complex64>,
        s_hat: &Array2<Complex64>,
        nu_s: &Array2<f64>,
    ) -> RqStage {
        let np_f = self.np as f64;
        let mu_z = col_means(nu_s); // length Np

        // (R11): precision is constant down each column of the C-shaped view.
        let vr_inv = cache.fhat_abs2.dot(&mu_z); // length NtxL
        let mut nu_r = Array2::default((self.nrx, self.ntx_l));
        for (mut col, inv) in nu_r.columns_mut().into_iter().zip(vr_inv.iter()) {
            col.fill(1.0 / inv.max(VARIANCE_FLOOR));
        }

        // (R13): one shared precision for every entry of b.
        let vq_inv = (nu_s * &cache.ucf_abs2).sum() / np_f;
        let nu_q = Array1::from_elem(self.np, 1.0 / vq_inv.max(VARIANCE_FLOOR));

        // (R12): second summand is U_rx* S Fhat^H; third is block-constant.
        let s2 = self.dft_rx.inverse_cols(s_hat);
        let fhat_h = cache.fhat.t().mapv(|v| v.conj());
        let r12_2 = s2.dot(&fhat_h); // Nrx x NtxL
        let r12_3 = self.f_abs2.dot(&mu_z).mapv(|v| v * (cache.sum_nu_b / np_f)); // NtxL
        let mut r_hat = Array2::default((self.nrx, self.ntx_l));
        for c in 0..self.ntx_l {
            for r in 0..self.nrx {
                let nr = nu_r[[r, c]];
                r_hat[[r, c]] =
                    c_hat[[r, c]] + r12_2[[r, c]] * nr - c_hat[[r, c]] * (nr * r12_3[c]);
            }
        }

        // (R14): column-wise inner products then one FFT; the third summand
        // is a scalar shared by every entry.
        let mut g = Array1::default(self.np);
        for n in 0..self.np {
            let mut acc = Complex64::new(0.0, 0.0);
            for r in 0..self.nrx {
                acc += s_hat[[r, n]] * cache.ucf[[r, n]].conj();
            }
            g[n] = acc;
        }
        let r14_2 = self.dft_np.forward(g.view());
        let r14_3 = self.nrx as f64 / np_f * cache.mu_c.dot(&self.f_abs2).dot(&mu_z);
        let mut q_hat = Array1::default(self.np);
        for i in 0..self.np {
            q_hat[i] = b_hat[i] + r14_2[i] * nu_q[i] - b_hat[i] * (nu_q[i] * r14_3);
        }

        RqStage { nu_r, r_hat, nu_q, q_hat }
    }

    /// (R15)-(R16).
    pub fn input_stage_c(&self, rq: &RqStage, hp: &Hyperparams) -> (Array2<Complex64>, Array2<f64>) {
        let mut c_next = Array2::default((self.nrx, self.ntx_l));
        let mut nu_c_next = Array2::default((self.nrx, self.ntx_l));
        for c in 0..self.ntx_l {
            for r in 0..self.nrx {
                let post =
                    input_moments_bg(rq.r_hat[[r, c]], rq.nu_r[[r, c]], hp.lambda_c, hp.sigma_c2);
                c_next[[r, c]] = post.x_hat;
                nu_c_next[[r, c]] = post.nu_x.max(VARIANCE_FLOOR);
            }
        }
        (c_next, nu_c_next)
    }

    /// (R17)-(R18).
    pub fn input_stage_b(&self, rq: &RqStage, hp: &Hyperparams) -> (Array1<Complex64>, Array1<f64>) {
        let mut b_next = Array1::default(self.np);
        let mut nu_b_next = Array1::default(self.np);
        for i in 0..self.np {
            let post = input_moments_bg(rq.q_hat[i], rq.nu_q[i], hp.lambda_b, hp.sigma_b2);
            b_next[i] = post.x_hat;
            nu_b_next[i] = post.nu_x.max(VARIANCE_FLOOR);
        }
        (b_next, nu_b_next)
    }

    /// How much worse the bilinear product fits the observations than the
    /// noise level predicts; positive values flag a spurious fixed point.
    ///
    /// Full resolution compares the residual energy against the noise floor;
    /// one-bit compares the realized sign-mismatch fraction against the flip
    /// probability implied by the fitted amplitudes.
    pub fn fit_gap(&self, z_star: &Array2<Complex64>) -> f64 {
        match self.quantizer {
            Quantizer::Full => {
                let y_energy = fro_norm_sq(self.y).max(1e-300);
                let resid = fro_norm_sq(&(self.y - z_star));
                let noise = self.sigma2 * (self.nrx * self.np) as f64;
                (resid - 4.0 * noise) / y_energy - 0.02
            }
            Quantizer::OneBit => {
                let mut mismatched = 0usize;
                let mut expected = 0.0f64;
                let denom = (2 * self.nrx * self.np) as f64;
                let noise_sd = (self.sigma2 / 2.0).sqrt();
                for (y, z) in self.y.iter().zip(z_star.iter()) {
                    for (yd, zd) in [(y.re, z.re), (y.im, z.im)] {
                        if (yd >= 0.0) != (zd >= 0.0) {
                            mismatched += 1;
                        }
                        expected += if noise_sd > 0.0 {
                            crate::kernels::normal_cdf(-zd.abs() / noise_sd)
                        } else {
                            0.0
                        };
                    }
                }
                mismatched as f64 / denom - (expected / denom + 0.1)
            }
        }
    }

    /// One complete undamped iteration of (R1)-(R18).
    pub fn raw_iteration(&self, st: &GampState, hp: &Hyperparams) -> StepOutputs {
        let p = self.p_stage(&st.c_hat, &st.nu_c, &st.b_hat, &st.nu_b, &st.s_hat);
        let (z_hat, nu_z) = self.output_stage(&p.p_hat, &p.nu_p);
        let (s_hat, nu_s) = self.correction_stage(&p, &z_hat, &nu_z);
        let rq = self.rq_stage(&p.cache, &st.c_hat, &st.b_hat, &s_hat, &nu_s);
        let (c_next, nu_c_next) = self.input_stage_c(&rq, hp);
        let (b_next, nu_b_next) = self.input_stage_b(&rq, hp);
        StepOutputs { p, z_hat, nu_z, s_hat, nu_s, rq, c_next, nu_c_next, b_next, nu_b_next }
    }
}

fn damp_c(new: &Array2<Complex64>, old: &Array2<Complex64>, delta: f64) -> Array2<Complex64> {
    let d = Complex64::new(delta, 0.0);
    let od = Complex64::new(1.0 - delta, 0.0);
    new.mapv(|v| v * d) + old.mapv(|v| v * od)
}

fn damp_r(new: &Array2<f64>, old: &Array2<f64>, delta: f64) -> Array2<f64> {
    new * delta + old * (1.0 - delta)
}

fn all_finite(st: &GampState) -> bool {
    st.b_hat.iter().all(|v| v.is_finite())
        && st.c_hat.iter().all(|v| v.is_finite())
        && st.s_hat.iter().all(|v| v.is_finite())
        && st.nu_b.iter().all(|v| v.is_finite())
        && st.nu_c.iter().all(|v| v.is_finite())
        && st.nu_s.iter().all(|v| v.is_finite())
}

/// Run PBiGAMP with EM hyperparameter learning.
///
/// Returns the MMSE estimates of `b` and `C` together with the per-iteration
/// trace. On a non-finite state the solver restarts from a fresh random
/// initialization up to `cfg.restarts` times before reporting divergence.
pub fn run(
    y: &ReceivedBlock,
    f: &EffectiveTraining,
    hp0: &Hyperparams,
    cfg: &GampConfig,
) -> Result<RunResult> {
    hp0.validate()?;
    if cfg.t_max == 0 {
        return Err(Error::InvalidArgument("t_max must be >= 1".into()));
    }
    if cfg.tau_stop <= 0.0 || !(0.0..=1.0).contains(&cfg.damping) || cfg.damping == 0.0 {
        return Err(Error::InvalidArgument("tau_stop must be > 0 and damping in (0, 1]".into()));
    }
    let solver = Solver::new(y, f)?;
    let (nrx, ntx_l, np) = solver.dims();

    // A non-finite state always restarts; a finite state whose data fit is
    // worse than the noise level predicts (a spurious bilinear fixed point)
    // also retries, keeping the best-fitting attempt.
    let mut best: Option<(f64, RunResult)> = None;
    for attempt in 0..=cfg.restarts {
        let mut hp = *hp0;
        let mut st = GampState::init_with(
            nrx,
            ntx_l,
            np,
            &hp,
            cfg.init_seed.wrapping_add(attempt as u64),
            attempt > 0,
        );
        let mut trace = Vec::new();
        let mut converged = false;
        let mut total_iters = 0usize;
        let mut diverged = false;

        let em_passes = cfg.em_outer_iters.max(1);
        'em: for em_it in 0..em_passes {
            converged = false;
            for _ in 0..cfg.t_max {
                let delta = cfg.damping;
                let p = solver.p_stage(&st.c_hat, &st.nu_c, &st.b_hat, &st.nu_b, &st.s_hat);
                let (z_hat, nu_z) = solver.output_stage(&p.p_hat, &p.nu_p);
                let (s_raw, nu_s_raw) = solver.correction_stage(&p, &z_hat, &nu_z);

                let diff = &p.z_star - &st.z_star;
                let energy = fro_norm_sq(&p.z_star);
                let residual = if energy > 0.0 { fro_norm_sq(&diff) / energy } else { 1.0 };

                st.s_hat = damp_c(&s_raw, &st.s_hat, delta);
                st.nu_s = damp_r(&nu_s_raw, &st.nu_s, delta);

                let rq = solver.rq_stage(&p.cache, &st.c_hat, &st.b_hat, &st.s_hat, &st.nu_s);
                let (c_next, nu_c_next) = solver.input_stage_c(&rq, &hp);
                let (b_next, nu_b_next) = solver.input_stage_b(&rq, &hp);

                st.c_hat = damp_c(&c_next, &st.c_hat, delta);
                st.nu_c = damp_r(&nu_c_next, &st.nu_c, delta);
                {
                    let d = Complex64::new(delta, 0.0);
                    let od = Complex64::new(1.0 - delta, 0.0);
                    st.b_hat = b_next.mapv(|v| v * d) + st.b_hat.mapv(|v| v * od);
                }
                st.nu_b = &nu_b_next * delta + &st.nu_b * (1.0 - delta);

                st.p_hat = p.p_hat;
                st.nu_p = p.nu_p;
                st.nu_p_bar = p.nu_p_bar;
                st.z_hat = z_hat;
                st.nu_z = nu_z;
                st.r_hat = rq.r_hat;
                st.nu_r = rq.nu_r;
                st.q_hat = rq.q_hat;
                st.nu_q = rq.nu_q;
                st.z_star = p.z_star;
                st.iteration += 1;
                total_iters += 1;

                trace.push(TraceRow {
                    em_iter: em_it,
                    iteration: st.iteration,
                    residual,
                    damping: delta,
                    lambda_b: hp.lambda_b,
                    lambda_c: hp.lambda_c,
                    sigma_b2: hp.sigma_b2,
                    sigma_c2: hp.sigma_c2,
                });

                if !all_finite(&st) {
                    diverged = true;
                    break 'em;
                }
                if st.iteration > 1 && residual <= cfg.tau_stop {
                    converged = true;
                    break;
                }
            }

            if cfg.em_outer_iters == 0 || em_it + 1 == em_passes {
                break;
            }
            // Re-gauge the scale ambiguity before updating the priors:
            // (b, c) -> (s b, c / s) leaves the bilinear product unchanged,
            // and pinning ||b||^2 = Np stops EM from chasing a runaway
            // scale split between sigma_b2 and sigma_c2.
            let b_energy: f64 = st.b_hat.iter().map(|v| v.norm_sqr()).sum();
            if b_energy > 0.0 {
                let s = (np as f64 / b_energy).sqrt();
                let sc = Complex64::new(s, 0.0);
                let inv = Complex64::new(1.0 / s, 0.0);
                st.b_hat.mapv_inplace(|v| v * sc);
                st.q_hat.mapv_inplace(|v| v * sc);
                st.nu_b.mapv_inplace(|v| v * s * s);
                st.nu_q.mapv_inplace(|v| v * s * s);
                st.c_hat.mapv_inplace(|v| v * inv);
                st.r_hat.mapv_inplace(|v| v * inv);
                st.nu_c.mapv_inplace(|v| v / (s * s));
                st.nu_r.mapv_inplace(|v| v / (s * s));
            }
            let hp_next = em_step(&st, &hp);
            let rel = (hp_next.lambda_b - hp.lambda_b).abs()
                + (hp_next.lambda_c - hp.lambda_c).abs()
                + (hp_next.sigma_b2 - hp.sigma_b2).abs() / hp.sigma_b2
                + (hp_next.sigma_c2 - hp.sigma_c2).abs() / hp.sigma_c2;
            hp = hp_next;
            if converged && rel < 1e-4 {
                break;
            }
        }

        if !diverged {
            let gap = solver.fit_gap(&st.z_star);
            let result = RunResult {
                b_hat: st.b_hat,
                c_hat: st.c_hat,
                trace,
                iterations: total_iters,
                converged,
                attempts: attempt + 1,
                hyperparams: hp,
            };
            if gap <= 0.0 {
                return Ok(result);
            }
            if best.as_ref().map_or(true, |(g, _)| gap < *g) {
                best = Some((gap, result));
            }
        }
    }
    match best {
        Some((_, result)) => Ok(result),
        None => Err(Error::Divergence { attempts: cfg.restarts + 1 }),
    }
}

/// EM update of both priors from the converged state; the noise variance is
/// held fixed.
pub fn em_step(st: &GampState, hp: &Hyperparams) -> Hyperparams {
    let c_post = st
        .r_hat
        .iter()
        .zip(st.nu_r.iter())
        .map(|(&r, &nr)| input_moments_bg(r, nr, hp.lambda_c, hp.sigma_c2))
        .collect::<Vec<BgPosterior>>();
    let (lambda_c, sigma_c2) = em_update_bg(c_post, hp.sigma_c2);
    let b_post = st
        .q_hat
        .iter()
        .zip(st.nu_q.iter())
        .map(|(&q, &nq)| input_moments_bg(q, nq, hp.lambda_b, hp.sigma_b2))
        .collect::<Vec<BgPosterior>>();
    let (lambda_b, sigma_b2) = em_update_bg(b_post, hp.sigma_b2);
    Hyperparams { lambda_b, lambda_c, sigma_b2, sigma_c2, sigma2: hp.sigma2 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::gen_sparse_angle_delay;
    use crate::measurement::{forward_factored, observe};
    use crate::phase::{gen_phase_errors, to_spectrum, PhaseParams};
    use crate::training::{assemble_f, gen_training, TrainingKind};
    use rand::rngs::StdRng;

    #[test]
    fn zero_variance_state_passes_z_through() {
        // nu_b = nu_c = 0 implies nu_p_bar = nu_p = 0 (up to the floor) and
        // p_hat = z_star.
        let mut rng = StdRng::seed_from_u64(1);
        let t = gen_training(TrainingKind::IidQpsk, 4, 8, 1.0, &mut rng).unwrap();
        let f = assemble_f(&t, 2).unwrap();
        let c = gen_sparse_angle_delay(4, 4, 2, 3, &mut rng).unwrap();
        let pp = PhaseParams::new(0.2, 0.0, 8).unwrap();
        let b = to_spectrum(&gen_phase_errors(&pp, &mut rng)).unwrap();
        let z = forward_factored(&c, &f, &b).unwrap();
        let y = observe(&z, 0.01, Quantizer::Full, &mut rng).unwrap();
        let solver = Solver::new(&y, &f).unwrap();
        let p = solver.p_stage(
            &c.c,
            &Array2::default((4, 8)),
            &b.b,
            &Array1::default(8),
            &Array2::default((4, 8)),
        );
        assert!(p.nu_p_bar.iter().all(|&v| v <= VARIANCE_FLOOR));
        assert!(p.nu_p.iter().all(|&v| v <= VARIANCE_FLOOR));
        let rel = fro_norm_sq(&(&p.p_hat - &p.z_star)) / fro_norm_sq(&p.z_star);
        assert!(rel < 1e-24);
        // And it reproduces the forward model.
        let relz = fro_norm_sq(&(&p.z_star - &z)) / fro_norm_sq(&z);
        assert!(relz < 1e-20);
    }

    #[test]
    fn nu_r_is_constant_down_columns_and_nu_q_uniform() {
        let mut rng = StdRng::seed_from_u64(2);
        let t = gen_training(TrainingKind::IidGaussian, 4, 8, 1.0, &mut rng).unwrap();
        let f = assemble_f(&t, 2).unwrap();
        let c = gen_sparse_angle_delay(4, 4, 2, 4, &mut rng).unwrap();
        let pp = PhaseParams::new(0.1, 0.0, 8).unwrap();
        let b = to_spectrum(&gen_phase_errors(&pp, &mut rng)).unwrap();
        let z = forward_factored(&c, &f, &b).unwrap();
        let y = observe(&z, 0.1, Quantizer::Full, &mut rng).unwrap();
        let solver = Solver::new(&y, &f).unwrap();
        let hp = Hyperparams::init(2, 0.1);
        let st = GampState::init(4, 8, 8, &hp, 0);
        let out = solver.raw_iteration(&st, &hp);
        for col in out.rq.nu_r.columns() {
            for v in col.iter() {
                assert!((v - col[0]).abs() < 1e-15 * col[0]);
            }
        }
        for v in out.rq.nu_q.iter() {
            assert!((v - out.rq.nu_q[0]).abs() < 1e-15 * out.rq.nu_q[0]);
        }
    }

    #[test]
    fn zero_correction_is_a_fixed_point_of_rq() {
        // s = 0 makes r_hat = c_hat and q_hat = b_hat.
        let mut rng = StdRng::seed_from_u64(3);
        let t = gen_training(TrainingKind::IidQpsk, 4, 8, 1.0, &mut rng).unwrap();
        let f = assemble_f(&t, 1).unwrap();
        let c = gen_sparse_angle_delay(4, 4, 1, 3, &mut rng).unwrap();
        let pp = PhaseParams::new(0.0, 0.0, 8).unwrap();
        let b = to_spectrum(&gen_phase_errors(&pp, &mut rng)).unwrap();
        let z = forward_factored(&c, &f, &b).unwrap();
        let y = observe(&z, 0.1, Quantizer::Full, &mut rng).unwrap();
        let solver = Solver::new(&y, &f).unwrap();
        let hp = Hyperparams::init(1, 0.1);
        let mut st = GampState::init(4, 4, 8, &hp, 0);
        st.c_hat = c.c.clone();
        st.b_hat = b.b.clone();
        let p = solver.p_stage(&st.c_hat, &st.nu_c, &st.b_hat, &st.nu_b, &st.s_hat);
        let zero_s = Array2::default((4, 8));
        let zero_ns = Array2::from_elem((4, 8), 0.0);
        let rq = solver.rq_stage(&p.cache, &st.c_hat, &st.b_hat, &zero_s, &zero_ns);
        let dc = fro_norm_sq(&(&rq.r_hat - &st.c_hat));
        assert!(dc < 1e-20);
        let db: f64 = rq
            .q_hat
            .iter()
            .zip(st.b_hat.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        assert!(db < 1e-20);
    }

    #[test]
    fn all_zero_observation_drives_channel_to_zero() {
        let mut rng = StdRng::seed_from_u64(4);
        let t = gen_training(TrainingKind::IidQpsk, 4, 16, 1.0, &mut rng).unwrap();
        let f = assemble_f(&t, 2).unwrap();
        let y = ReceivedBlock {
            y: Array2::default((4, 16)),
            quantizer: Quantizer::Full,
            sigma2: 0.1,
        };
        let hp = Hyperparams::init(2, 0.1);
        let cfg = GampConfig { em_outer_iters: 0, ..GampConfig::default() };
        let res = run(&y, &f, &hp, &cfg).unwrap();
        let c_energy = fro_norm_sq(&res.c_hat);
        assert!(c_energy < 1e-6, "channel energy {c_energy}");
        // b stays prior-dominated (finite, dominated by the init bin).
        assert!(res.b_hat.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn noiseless_full_resolution_exact_recovery_small() {
        // Small instance sanity run; the acceptance suite runs the full-size
        // version. On-grid CFO, exactly sparse C, QPSK training.
        let mut rng = StdRng::seed_from_u64(5);
        let (nrx, ntx, l, np) = (4usize, 4usize, 2usize, 64usize);
        let t = gen_training(TrainingKind::IidQpsk, ntx, np, 1.0, &mut rng).unwrap();
        let f = assemble_f(&t, l).unwrap();
        let c = gen_sparse_angle_delay(nrx, ntx, l, 4, &mut rng).unwrap();
        let pp = PhaseParams::new(2.0 * std::f64::consts::PI * 3.0 / np as f64, 0.0, np).unwrap();
        let b = to_spectrum(&gen_phase_errors(&pp, &mut rng)).unwrap();
        let z = forward_factored(&c, &f, &b).unwrap();
        let sigma2 = 1e-10;
        let y = observe(&z, sigma2, Quantizer::Full, &mut rng).unwrap();
        let hp = Hyperparams::init(l, sigma2);
        let cfg = GampConfig::default();
        let res = run(&y, &f, &hp, &cfg).unwrap();
        let (nmse, _) = crate::harness::nmse(&c.c, &res.c_hat);
        assert!(
            nmse < 1e-4,
            "nmse {} dB after {} iterations (converged: {})",
            10.0 * nmse.log10(),
            res.iterations,
            res.converged
        );
    }
}
