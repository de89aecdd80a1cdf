//! Mean-reverting variance-exploding SDE
//!
//! `dx = gamma (y - x) dt + g(t) dw` with
//! `g(t) = sigma_min (sigma_max / sigma_min)^t sqrt(2 ln(sigma_max / sigma_min))`.
//!
//! The perturbation kernel `p(x_t | x_0, y)` is Gaussian with mean
//! `e^{-gamma t} x_0 + (1 - e^{-gamma t}) y` and isotropic variance
//! `sigma_min^2 ((sigma_max/sigma_min)^{2t} - e^{-2 gamma t}) ln(sigma_max/sigma_min)
//!  / (gamma + ln(sigma_max/sigma_min))`.
//!
//! Complex arrays are treated as pairs of real channels: Gaussian noise has
//! independent unit-variance real and imaginary parts.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stft::{ComplexSpectrogram, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeParams {
    /// Stiffness of the reversion towards the mixture.
    pub gamma: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Process horizon.
    #[serde(rename = "t_max")]
    pub t_max: f64,
    /// Smallest process time visited by training and sampling.
    pub t_eps: f64,
}

impl Default for SdeParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            sigma_min: 0.05,
            sigma_max: 0.5,
            t_max: 1.0,
            t_eps: 0.03,
        }
    }
}

impl SdeParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_min > 0.0
            && self.sigma_min < self.sigma_max
            && self.gamma > 0.0
            && self.t_eps > 0.0
            && self.t_eps < self.t_max
            && [self.gamma, self.sigma_min, self.sigma_max, self.t_max, self.t_eps]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "sde: need 0 < sigma_min < sigma_max, gamma > 0, 0 < t_eps < t_max (got {self:?})"
            )))
        }
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    /// Diffusion coefficient `g(t)`.
    pub fn diffusion_coefficient(&self, t: f64) -> f64 {
        let lr = self.log_ratio();
        self.sigma_min * (lr * t).exp() * (2.0 * lr).sqrt()
    }

    /// Drift `gamma (y - x)`.
    pub fn drift(&self, x: f64, y: f64) -> f64 {
        self.gamma * (y - x)
    }

    /// Weight of `x_0` in the kernel mean, `e^{-gamma t}`.
    pub fn mean_weight(&self, t: f64) -> f64 {
        (-self.gamma * t).exp()
    }

    /// Kernel variance `sigma(t)^2`.
    pub fn variance(&self, t: f64) -> f64 {
        let lr = self.log_ratio();
        let num = (2.0 * lr * t).exp() - (-2.0 * self.gamma * t).exp();
        self.sigma_min * self.sigma_min * num * lr / (self.gamma + lr)
    }

    /// Kernel standard deviation `sigma(t)`.
    pub fn std(&self, t: f64) -> f64 {
        self.variance(t).max(0.0).sqrt()
    }

    /// Elementwise kernel mean.
    pub fn mean(&self, x0: &[Complex64], y: &[Complex64], t: f64) -> Result<Vec<Complex64>> {
        if x0.len() != y.len() {
            return Err(Error::shape(x0.len(), y.len()));
        }
        let w = self.mean_weight(t);
        Ok(x0.iter().zip(y).map(|(a, b)| a * w + b * (1.0 - w)).collect())
    }

    /// `x_t = mean(x0, y, t) + sigma(t) z`.
    pub fn perturb(
        &self,
        x0: &[Complex64],
        y: &[Complex64],
        t: f64,
        z: &[Complex64],
    ) -> Result<Vec<Complex64>> {
        if z.len() != x0.len() {
            return Err(Error::shape(x0.len(), z.len()));
        }
        let sigma = self.std(t);
        let mut out = self.mean(x0, y, t)?;
        for (o, n) in out.iter_mut().zip(z) {
            *o += n * sigma;
        }
        Ok(out)
    }

    /// Draws `x_T = y + sigma(T) z`.
    pub fn prior_sample<R: Rng + ?Sized>(&self, y: &[Complex64], rng: &mut R) -> Vec<Complex64> {
        let sigma = self.std(self.t_max);
        y.iter()
            .map(|v| v + complex_normal(rng) * sigma)
            .collect()
    }

    /// [`SdeParams::perturb`] on spectrograms.
    pub fn perturb_spectrogram(
        &self,
        x0: &ComplexSpectrogram,
        y: &ComplexSpectrogram,
        t: f64,
        z: &[Complex64],
    ) -> Result<ComplexSpectrogram> {
        x0.ensure_same_shape(y)?;
        y.with_data(self.perturb(x0.data(), y.data(), t, z)?)
    }

    /// [`SdeParams::prior_sample`] on a compressed mixture spectrogram.
    pub fn prior_sample_spectrogram<R: Rng + ?Sized>(
        &self,
        y: &ComplexSpectrogram,
        rng: &mut R,
    ) -> Result<ComplexSpectrogram> {
        if y.domain != Domain::Compressed {
            return Err(Error::Domain {
                expected: "compressed",
                actual: "raw",
            });
        }
        y.with_data(self.prior_sample(y.data(), rng))
    }
}

/// Complex sample with independent standard-normal real and imaginary parts.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im)
}

pub fn complex_noise<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<Complex64> {
    (0..len).map(|_| complex_normal(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    /// Integrates d(var)/dt = -2 gamma var + g(t)^2 with classical RK4.
    fn variance_ode(p: &SdeParams, t_end: f64, steps: usize) -> f64 {
        let f = |t: f64, v: f64| -2.0 * p.gamma * v + p.diffusion_coefficient(t).powi(2);
        let h = t_end / steps as f64;
        let mut v = 0.0;
        for i in 0..steps {
            let t = i as f64 * h;
            let k1 = f(t, v);
            let k2 = f(t + h / 2.0, v + h / 2.0 * k1);
            let k3 = f(t + h / 2.0, v + h / 2.0 * k2);
            let k4 = f(t + h, v + h * k3);
            v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        v
    }

    #[test]
    fn variance_matches_ode_oracle() {
        let p = SdeParams::default();
        let oracle_half = variance_ode(&p, 0.5, 20_000);
        let oracle_one = variance_ode(&p, 1.0, 20_000);
        // Values frozen from the RK4 oracle above.
        assert_abs_diff_eq!(oracle_half, 0.013198, epsilon = 1e-6);
        assert_abs_diff_eq!(oracle_one, 0.133766, epsilon = 1e-6);
        assert_abs_diff_eq!(p.variance(0.5), oracle_half, epsilon = 1e-10);
        assert_abs_diff_eq!(p.variance(1.0), oracle_one, epsilon = 1e-10);
        assert_abs_diff_eq!(p.std(1.0), 0.365741, epsilon = 1e-6);
        assert_eq!(p.std(0.0), 0.0);
    }

    #[test]
    fn diffusion_coefficient_values() {
        let p = SdeParams::default();
        // 30-digit evaluations: g(0) = 0.1072983013..., g(1) = 1.072983013...
        assert_abs_diff_eq!(p.diffusion_coefficient(0.0), 0.1072983013, epsilon = 1e-10);
        assert_abs_diff_eq!(p.diffusion_coefficient(1.0), 1.0729830131, epsilon = 1e-9);
        let ratio = p.diffusion_coefficient(0.5) / p.diffusion_coefficient(0.0);
        assert_abs_diff_eq!(ratio, 10f64.sqrt(), epsilon = 1e-12);
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let lhs = p.diffusion_coefficient(t).ln() - p.diffusion_coefficient(0.0).ln();
            assert_abs_diff_eq!(lhs, t * 10f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn mean_examples() {
        let p = SdeParams::default();
        let x0 = [c(1.0), Complex64::new(0.3, -0.2)];
        let y = [c(0.0), Complex64::new(-0.5, 0.4)];
        assert_eq!(p.mean(&x0, &y, 0.0).unwrap(), x0.to_vec());
        assert_abs_diff_eq!(p.mean(&x0, &y, 0.5).unwrap()[0].re, 0.367879, epsilon = 1e-6);
        for t in [0.1, 0.5, 1.0] {
            assert_eq!(p.mean(&y, &y, t).unwrap()[1], y[1]);
        }
        assert!(p.mean(&x0, &y[..1], 0.5).is_err());
    }

    #[test]
    fn perturb_examples() {
        let p = SdeParams::default();
        let x = p.perturb(&[c(1.0)], &[c(0.0)], 0.5, &[c(1.0)]).unwrap();
        // e^{-1} + sigma(0.5) = 0.3678794412 + 0.1148826061
        assert_abs_diff_eq!(x[0].re, 0.4827620473, epsilon = 1e-9);
        let x = p.perturb(&[c(0.7)], &[c(0.1)], 0.0, &[c(5.0)]).unwrap();
        assert_eq!(x[0], c(0.7));
        let x = p.perturb(&[c(1.0)], &[c(0.0)], 0.5, &[c(0.0)]).unwrap();
        assert_eq!(x, p.mean(&[c(1.0)], &[c(0.0)], 0.5).unwrap());
        assert!(p.perturb(&[c(1.0)], &[c(0.0)], 0.5, &[]).is_err());
    }

    #[test]
    fn std_is_nondecreasing_on_grid() {
        let p = SdeParams::default();
        let mut prev = 0.0;
        for i in 0..=1000 {
            let s = p.std(i as f64 / 1000.0);
            assert!(s >= prev);
            prev = s;
        }
    }

    #[test]
    fn prior_sample_statistics_and_determinism() {
        let p = SdeParams::default();
        // 5000 complex draws give 10,000 real draws, each with mean 0.3.
        let y = vec![Complex64::new(0.3, 0.3); 5000];
        let a = p.prior_sample(&y, &mut ChaCha8Rng::seed_from_u64(9));
        let b = p.prior_sample(&y, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let draws: Vec<f64> = a.iter().flat_map(|v| [v.re, v.im]).collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 0.3).abs() < 3.0 * p.std(1.0) / 100.0);
        assert!((var / p.variance(1.0) - 1.0).abs() < 0.05);
    }

    #[test]
    fn validate_rejects_bad_params() {
        assert!(SdeParams { sigma_min: 0.6, ..Default::default() }.validate().is_err());
        assert!(SdeParams { t_eps: 0.0, ..Default::default() }.validate().is_err());
        assert!(SdeParams { gamma: 0.0, ..Default::default() }.validate().is_err());
        assert!(SdeParams::default().validate().is_ok());
    }
}
