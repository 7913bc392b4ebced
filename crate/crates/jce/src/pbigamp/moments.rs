//! Scalar posterior-moment maps: the quantized/AWGN output channel and the
//! Bernoulli-Gaussian input prior, plus the EM hyperparameter updates built
//! on the same quantities.
//!
//! Complex quantities factor into independent real and imaginary parts
//! everywhere here: the noise splits its variance evenly between the two, and
//! the one-bit quantizer acts per component.

use num_complex::Complex64;

use crate::kernels::phi_over_cdf;
use crate::measurement::Quantizer;

/// Posterior mean/variance of a real Gaussian `N(m, v)` observed through a
/// sign measurement `s in {-1, +1}` with additive `N(0, w)` noise.
fn probit_moments(m: f64, v: f64, s: f64, w: f64) -> (f64, f64) {
    let tot = v + w;
    if tot <= 0.0 {
        return (m, 0.0);
    }
    let st = tot.sqrt();
    let u = s * m / st;
    let ratio = phi_over_cdf(u);
    let mean = m + s * v / st * ratio;
    let var = v - v * v / tot * ratio * (u + ratio);
    (mean, var.max(0.0))
}

/// Output moments (R7)-(R8): posterior mean and variance of `z` under the
/// pseudo-prior `N(p_hat, nu_p)` and the observation `y`.
///
/// Full resolution reduces to a product of Gaussians; one-bit treats the real
/// and imaginary parts independently through the probit likelihood with noise
/// `sigma^2 / 2` per component.
pub fn output_moments(
    y: Complex64,
    p_hat: Complex64,
    nu_p: f64,
    sigma2: f64,
    q: Quantizer,
) -> (Complex64, f64) {
    match q {
        Quantizer::Full => {
            let denom = nu_p + sigma2;
            if denom <= 0.0 {
                return (y, 0.0);
            }
            let z = (y * nu_p + p_hat * sigma2) / denom;
            (z, nu_p * sigma2 / denom)
        }
        Quantizer::OneBit => {
            let v = nu_p / 2.0;
            let w = sigma2 / 2.0;
            let sr = if y.re >= 0.0 { 1.0 } else { -1.0 };
            let si = if y.im >= 0.0 { 1.0 } else { -1.0 };
            let (mr, vr) = probit_moments(p_hat.re, v, sr, w);
            let (mi, vi) = probit_moments(p_hat.im, v, si, w);
            (Complex64::new(mr, mi), vr + vi)
        }
    }
}

/// Posterior of one Bernoulli-Gaussian coefficient given the pseudo-
/// measurement `r_hat ~ N(x, nu_r)`.
#[derive(Debug, Clone, Copy)]
pub struct BgPosterior {
    /// Posterior mean.
    pub x_hat: Complex64,
    /// Posterior variance.
    pub nu_x: f64,
    /// Activity probability `P(x != 0 | r_hat)`.
    pub pi: f64,
    /// Mean of the active component.
    pub m_active: Complex64,
    /// Variance of the active component.
    pub v_active: f64,
}

/// Input moments (R15)-(R18) for the prior
/// `lambda delta(x) + (1 - lambda) CN(0, sigma_x2)`.
pub fn input_moments_bg(r_hat: Complex64, nu_r: f64, lambda: f64, sigma_x2: f64) -> BgPosterior {
    if lambda >= 1.0 {
        return BgPosterior {
            x_hat: Complex64::new(0.0, 0.0),
            nu_x: 0.0,
            pi: 0.0,
            m_active: Complex64::new(0.0, 0.0),
            v_active: 0.0,
        };
    }
    let nu_r = nu_r.max(1e-300);
    let tot = sigma_x2 + nu_r;
    let m_active = r_hat * (sigma_x2 / tot);
    let v_active = sigma_x2 * nu_r / tot;
    let pi = if lambda <= 0.0 {
        1.0
    } else {
        // log of lambda N(r;0,nu_r) / ((1-lambda) N(r;0,sigma_x2+nu_r)),
        // with the complex Gaussian density exp(-|r|^2/v) / (pi v).
        let log_ratio = (lambda / (1.0 - lambda)).ln() + (tot / nu_r).ln()
            - r_hat.norm_sqr() * sigma_x2 / (nu_r * tot);
        if log_ratio > 0.0 {
            let e = (-log_ratio).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + log_ratio.exp())
        }
    };
    let x_hat = m_active * pi;
    // pi (v_a + |m_a|^2) - |pi m_a|^2, rearranged to a sum of nonnegatives.
    let nu_x = pi * v_active + pi * (1.0 - pi) * m_active.norm_sqr();
    BgPosterior { x_hat, nu_x, pi, m_active, v_active }
}

/// EM update of one Bernoulli-Gaussian prior from the converged pseudo-
/// measurements: `1 - lambda <- mean(pi)` and
/// `sigma_x^2 <- sum pi (v_a + |m_a|^2) / sum pi` (kept when `sum pi = 0`).
pub fn em_update_bg<I>(posteriors: I, prev_sigma_x2: f64) -> (f64, f64)
where
    I: IntoIterator<Item = BgPosterior>,
{
    let mut count = 0usize;
    let mut sum_pi = 0.0;
    let mut sum_energy = 0.0;
    for p in posteriors {
        count += 1;
        sum_pi += p.pi;
        sum_energy += p.pi * (p.v_active + p.m_active.norm_sqr());
    }
    let lambda = (1.0 - sum_pi / count.max(1) as f64).clamp(0.0, 1.0 - 1e-12);
    let sigma_x2 = if sum_pi > 0.0 {
        (sum_energy / sum_pi).max(1e-12)
    } else {
        prev_sigma_x2
    };
    (lambda, sigma_x2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_resolution_limits() {
        let y = Complex64::new(0.8, -0.3);
        let p = Complex64::new(0.1, 0.2);
        // sigma2 -> 0: posterior collapses onto the observation.
        let (z, v) = output_moments(y, p, 0.5, 0.0, Quantizer::Full);
        assert!((z - y).norm() < 1e-12);
        assert!(v.abs() < 1e-12);
        // nu_p -> 0: posterior collapses onto the prior mean.
        let (z, v) = output_moments(y, p, 0.0, 0.5, Quantizer::Full);
        assert!((z - p).norm() < 1e-12);
        assert!(v.abs() < 1e-12);
        // Generic Gaussian product.
        let (z, v) = output_moments(y, p, 0.5, 1.5, Quantizer::Full);
        let want = (y * 0.5 + p * 1.5) / 2.0;
        assert!((z - want).norm() < 1e-12);
        assert!((v - 0.375).abs() < 1e-12);
    }

    #[test]
    fn one_bit_zero_mean_unit_variances() {
        // Prior mean 0, nu_p = sigma2 = 1, positive signs: per component
        // u = 0, posterior mean = (1/2) phi(0)/Phi(0) = 1/sqrt(2 pi).
        let (z, v) = output_moments(
            Complex64::new(1.0, 1.0),
            Complex64::new(0.0, 0.0),
            1.0,
            1.0,
            Quantizer::OneBit,
        );
        let want = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((z.re - want).abs() < 1e-12, "re = {}", z.re);
        assert!((z.im - want).abs() < 1e-12);
        // var per component: 1/2 - (1/4)/1 * r (0 + r), r = sqrt(2/pi).
        let r = (2.0 / std::f64::consts::PI).sqrt();
        let want_v = 2.0 * (0.5 - 0.25 * r * r);
        assert!((v - want_v).abs() < 1e-12, "v = {v}");
    }

    #[test]
    fn one_bit_sign_symmetry_and_extreme_prior() {
        let p = Complex64::new(0.4, -0.2);
        let (zp, vp) = output_moments(Complex64::new(1.0, -1.0), p, 0.7, 0.3, Quantizer::OneBit);
        let (zm, vm) = output_moments(Complex64::new(-1.0, 1.0), -p, 0.7, 0.3, Quantizer::OneBit);
        assert!((zp + zm).norm() < 1e-12);
        assert!((vp - vm).abs() < 1e-12);
        // Strongly contradicting prior: deep tail must stay finite and pull
        // the mean toward the observed orthant.
        let far = Complex64::new(-30.0, 30.0);
        let (z, v) = output_moments(Complex64::new(1.0, -1.0), far, 1.0, 1.0, Quantizer::OneBit);
        assert!(z.re > far.re && z.im < far.im);
        assert!(z.is_finite() && v.is_finite() && v > 0.0);
    }

    #[test]
    fn bg_pure_gaussian_and_pure_zero() {
        let r = Complex64::new(0.5, -1.0);
        // lambda = 0: plain Wiener shrinkage.
        let p = input_moments_bg(r, 0.5, 0.0, 2.0);
        let want = r * (2.0 / 2.5);
        assert!((p.x_hat - want).norm() < 1e-12);
        assert!((p.nu_x - 2.0 * 0.5 / 2.5).abs() < 1e-12);
        assert!((p.pi - 1.0).abs() < 1e-15);
        // lambda = 1: identically zero.
        let p = input_moments_bg(r, 0.5, 1.0, 2.0);
        assert_eq!(p.x_hat, Complex64::new(0.0, 0.0));
        assert_eq!(p.nu_x, 0.0);
        assert_eq!(p.pi, 0.0);
    }

    #[test]
    fn bg_activity_tracks_measurement_energy() {
        // Large |r| relative to nu_r implies active; small implies inactive.
        let strong = input_moments_bg(Complex64::new(5.0, 0.0), 0.1, 0.9, 1.0);
        assert!(strong.pi > 0.999);
        let weak = input_moments_bg(Complex64::new(0.01, 0.0), 0.1, 0.9, 1.0);
        assert!(weak.pi < 0.2);
        // Very large |r| must not overflow the logistic.
        let huge = input_moments_bg(Complex64::new(1e8, 0.0), 0.1, 0.9, 1.0);
        assert!((huge.pi - 1.0).abs() < 1e-12 && huge.x_hat.is_finite());
    }

    #[test]
    fn em_update_limit_cases() {
        let active = BgPosterior {
            x_hat: Complex64::new(1.0, 0.0),
            nu_x: 0.1,
            pi: 1.0,
            m_active: Complex64::new(1.0, 0.0),
            v_active: 0.25,
        };
        let (lambda, sigma) = em_update_bg(vec![active; 4], 3.0);
        assert!(lambda < 1e-12);
        assert!((sigma - 1.25).abs() < 1e-12);

        let inactive = BgPosterior { pi: 0.0, ..active };
        let (lambda, sigma) = em_update_bg(vec![inactive; 4], 3.0);
        assert!(lambda > 1.0 - 1e-9);
        assert_eq!(sigma, 3.0);
    }

    #[test]
    fn em_update_hand_computed_mixture() {
        // Two posteriors with known moments; expected values computed from
        // the update formulas directly.
        let a = BgPosterior {
            x_hat: Complex64::new(0.0, 0.0),
            nu_x: 0.0,
            pi: 0.25,
            m_active: Complex64::new(2.0, 0.0),
            v_active: 0.5,
        };
        let b = BgPosterior {
            x_hat: Complex64::new(0.0, 0.0),
            nu_x: 0.0,
            pi: 0.75,
            m_active: Complex64::new(0.0, 1.0),
            v_active: 1.5,
        };
        let (lambda, sigma) = em_update_bg([a, b], 9.0);
        assert!((lambda - 0.5).abs() < 1e-12);
        let want = (0.25 * (0.5 + 4.0) + 0.75 * (1.5 + 1.0)) / 1.0;
        assert!((sigma - want).abs() < 1e-12);
    }
}
