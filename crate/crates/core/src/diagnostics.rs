//! Closed-form SDE quantities checked against scalar Euler-Maruyama paths of
//! `dx = gamma (y - x) dt + g(t) dw`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sde::SdeParams;

/// Sample moments of `x_t` at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub t: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Simulates `paths` scalar paths from `x(0) = x0` on a uniform grid of
/// `steps` steps over `[0, t_max]` and returns the unbiased sample moments at
/// each time in `times`, each rounded to the nearest grid point.
pub fn simulate_forward<R: Rng + ?Sized>(
    sde: &SdeParams,
    x0: f64,
    y: f64,
    paths: usize,
    steps: usize,
    times: &[f64],
    rng: &mut R,
) -> Result<Vec<Moments>> {
    if paths < 2 || steps == 0 {
        return Err(Error::InvalidInput("simulation needs at least 2 paths and 1 step".into()));
    }
    let dt = sde.t_max / steps as f64;
    let mut record: Vec<usize> = Vec::with_capacity(times.len());
    for &t in times {
        if !(0.0..=sde.t_max).contains(&t) {
            return Err(Error::InvalidInput(format!("time {t} outside [0, {}]", sde.t_max)));
        }
        record.push((t / dt).round() as usize);
    }
    let mut sums = vec![(0.0f64, 0.0f64); times.len()];
    let mut x = vec![x0; paths];
    let emit = |step: usize, x: &[f64], sums: &mut [(f64, f64)]| {
        for (k, &r) in record.iter().enumerate() {
            if r == step {
                sums[k] = (x.iter().sum(), x.iter().map(|v| v * v).sum());
            }
        }
    };
    emit(0, &x, &mut sums);
    for step in 0..steps {
        let t = step as f64 * dt;
        let noise = sde.diffusion_coefficient(t) * dt.sqrt();
        for v in x.iter_mut() {
            let dw: f64 = rng.sample(StandardNormal);
            *v += sde.drift(*v, y) * dt + noise * dw;
        }
        emit(step + 1, &x, &mut sums);
    }
    let n = paths as f64;
    Ok(times
        .iter()
        .zip(&sums)
        .map(|(&t, &(s, s2))| {
            let mean = s / n;
            Moments {
                t,
                mean,
                variance: ((s2 - n * mean * mean) / (n - 1.0)).max(0.0),
            }
        })
        .collect())
}

/// One row of the diagnostics table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagRow {
    pub t: f64,
    pub g: f64,
    /// Weight of `x0` in the kernel mean, `exp(-gamma t)`.
    pub mu_x0: f64,
    /// Weight of `y` in the kernel mean.
    pub mu_y: f64,
    pub sigma: f64,
    pub variance: f64,
    pub closed_mean: f64,
    pub mc_mean: f64,
    pub mc_variance: f64,
    pub mean_rel_err: f64,
    pub var_rel_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagConfig {
    pub grid_points: usize,
    pub paths: usize,
    pub steps: usize,
    pub x0: f64,
    pub y: f64,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            grid_points: 11,
            paths: 10_000,
            steps: 1000,
            x0: 1.0,
            y: 2.0,
        }
    }
}

/// Relative error with an absolute fallback when the reference is zero.
pub fn rel_err(estimate: f64, reference: f64) -> f64 {
    let d = (estimate - reference).abs();
    if reference == 0.0 {
        d
    } else {
        d / reference.abs()
    }
}

/// Table over the uniform grid `0, T/(n-1), ..., T`.
pub fn sde_diagnostics<R: Rng + ?Sized>(sde: &SdeParams, cfg: &DiagConfig, rng: &mut R) -> Result<Vec<DiagRow>> {
    sde.validate()?;
    if cfg.grid_points < 2 {
        return Err(Error::InvalidInput("diagnostics grid needs at least 2 points".into()));
    }
    let times: Vec<f64> = (0..cfg.grid_points)
        .map(|i| sde.t_max * i as f64 / (cfg.grid_points - 1) as f64)
        .collect();
    let mc = simulate_forward(sde, cfg.x0, cfg.y, cfg.paths, cfg.steps, &times, rng)?;
    Ok(times
        .iter()
        .zip(&mc)
        .map(|(&t, m)| {
            let w = sde.mean_weight(t);
            let closed_mean = w * cfg.x0 + (1.0 - w) * cfg.y;
            let variance = sde.variance(t);
            DiagRow {
                t,
                g: sde.diffusion_coefficient(t),
                mu_x0: w,
                mu_y: 1.0 - w,
                sigma: sde.std(t),
                variance,
                closed_mean,
                mc_mean: m.mean,
                mc_variance: m.variance,
                mean_rel_err: rel_err(m.mean, closed_mean),
                var_rel_err: rel_err(m.variance, variance),
            }
        })
        .collect())
}

pub fn diagnostics_table(rows: &[DiagRow]) -> String {
    let mut s = format!(
        "{:>6} {:>10} {:>8} {:>8} {:>9} {:>10} {:>10} {:>10} {:>10} {:>9} {:>9}\n",
        "t", "g", "mu_x0", "mu_y", "sigma", "sigma^2", "mean", "mc_mean", "mc_var", "mean_err", "var_err"
    );
    for r in rows {
        s.push_str(&format!(
            "{:>6.3} {:>10.6} {:>8.5} {:>8.5} {:>9.6} {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>9.4} {:>9.4}\n",
            r.t, r.g, r.mu_x0, r.mu_y, r.sigma, r.variance, r.closed_mean, r.mc_mean, r.mc_variance, r.mean_rel_err, r.var_rel_err
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_time_row_is_exact() {
        let sde = SdeParams::default();
        let cfg = DiagConfig {
            paths: 200,
            steps: 100,
            grid_points: 3,
            ..DiagConfig::default()
        };
        let rows = sde_diagnostics(&sde, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(rows[0].sigma, 0.0);
        assert_eq!(rows[0].mc_mean, 1.0);
        assert_eq!(rows[0].mc_variance, 0.0);
        assert!((rows[2].variance - 0.133766).abs() < 1e-6);
    }

    #[test]
    fn noiseless_paths_follow_the_mean_ode() {
        // With sigma_min tiny the diffusion vanishes and Euler steps converge
        // to the exponential relaxation towards y.
        let sde = SdeParams {
            sigma_min: 1e-12,
            sigma_max: 1e-11,
            ..SdeParams::default()
        };
        let m = simulate_forward(&sde, 1.0, 2.0, 2, 20_000, &[0.5, 1.0], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for mm in m {
            let exact = 2.0 - (-2.0 * mm.t).exp();
            assert!((mm.mean - exact).abs() < 1e-4, "{mm:?}");
        }
    }

    #[test]
    fn bad_arguments() {
        let sde = SdeParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(simulate_forward(&sde, 0.0, 0.0, 1, 10, &[0.5], &mut rng).is_err());
        assert!(simulate_forward(&sde, 0.0, 0.0, 10, 10, &[1.5], &mut rng).is_err());
        assert_eq!(rel_err(0.1, 0.0), 0.1);
    }
}
