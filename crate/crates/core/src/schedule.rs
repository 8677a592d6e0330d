//! Linear-β noise schedule and deterministic (η = 0) DDIM stepping.
//!
//! Sampling steps are addressed by a reverse index: with `T` sampling steps,
//! denoising runs from step index `T-1` down to `0`. Step index `s` uses the
//! `s`-th smallest sampled training timestep.

use crate::denoiser::{DenoiserConfig, LatentState, StepContext};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// `alpha_bar[t] = prod_{i<=t} (1 - beta_i)`.
    pub alpha_bar: Vec<f64>,
    /// Training timesteps visited by the sampler, strictly decreasing.
    pub sample_steps: Vec<usize>,
}

fn invalid(key: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        key: key.into(),
        reason: reason.into(),
    }
}

/// `n_steps` evenly spaced indices `floor(k·(t_train−1)/(n_steps−1))`, which
/// always include `0` and `t_train − 1`.
pub fn build_schedule(t_train: usize, beta_start: f64, beta_end: f64, n_steps: usize) -> Result<NoiseSchedule> {
    if t_train == 0 {
        return Err(invalid("schedule.t_train", "must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(invalid(
            "schedule.beta_start",
            format!("need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"),
        ));
    }
    if n_steps == 0 || n_steps > t_train {
        return Err(invalid("schedule.n_steps", format!("must be in 1..={t_train}, got {n_steps}")));
    }

    let mut alpha_bar = Vec::with_capacity(t_train);
    let mut acc = 1.0;
    for i in 0..t_train {
        let beta = if t_train == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }

    let sample_steps = if n_steps == 1 {
        vec![t_train - 1]
    } else {
        (0..n_steps)
            .rev()
            .map(|k| k * (t_train - 1) / (n_steps - 1))
            .collect()
    };

    Ok(NoiseSchedule {
        t_train,
        beta_start,
        beta_end,
        alpha_bar,
        sample_steps,
    })
}

impl NoiseSchedule {
    pub fn n_steps(&self) -> usize {
        self.sample_steps.len()
    }

    /// Training timestep used at reverse step index `step_index`.
    pub fn timestep(&self, step_index: usize) -> usize {
        self.sample_steps[self.n_steps() - 1 - step_index]
    }

    pub fn context(&self, step_index: usize) -> StepContext {
        let timestep = self.timestep(step_index);
        StepContext {
            step_index,
            timestep,
            alpha_bar: self.alpha_bar[timestep],
        }
    }

    /// `(alpha_bar_t, alpha_bar_prev)` for a reverse step; the step after
    /// index 0 is the clean sample with `alpha_bar = 1`.
    pub fn alphas(&self, step_index: usize) -> (f64, f64) {
        let abar_t = self.alpha_bar[self.timestep(step_index)];
        let abar_prev = if step_index == 0 {
            1.0
        } else {
            self.alpha_bar[self.timestep(step_index - 1)]
        };
        (abar_t, abar_prev)
    }
}

/// `x_prev = sqrt(ā_prev)·(x_t − sqrt(1−ā_t)·ε)/sqrt(ā_t) + sqrt(1−ā_prev)·ε`
pub fn ddim_step(x_t: &Matrix, eps_pred: &Matrix, abar_t: f64, abar_prev: f64) -> Result<Matrix> {
    if x_t.shape() != eps_pred.shape() {
        return Err(Error::ShapeMismatch {
            op: "ddim_step",
            left: x_t.shape(),
            right: eps_pred.shape(),
        });
    }
    if !(abar_t > 0.0 && abar_t <= 1.0 && abar_prev > 0.0 && abar_prev <= 1.0) {
        return Err(invalid("alpha_bar", format!("out of (0, 1]: {abar_t}, {abar_prev}")));
    }
    let sqrt_t = abar_t.sqrt();
    let sqrt_1mt = (1.0 - abar_t).sqrt();
    let sqrt_prev = abar_prev.sqrt();
    let sqrt_1mprev = (1.0 - abar_prev).sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(x, e)| sqrt_prev * ((x - sqrt_1mt * e) / sqrt_t) + sqrt_1mprev * e)
        .collect();
    let out = Matrix::from_vec(x_t.rows(), x_t.cols(), data)?;
    out.ensure_finite()?;
    Ok(out)
}

/// `x_T` with i.i.d. standard-normal entries drawn row-major from `rng`.
pub fn init_latent(rng: &mut SeededRng, cfg: &DenoiserConfig, condition_id: usize) -> Result<LatentState> {
    if condition_id >= cfg.n_conditions {
        return Err(invalid(
            "run.conditions",
            format!("condition {condition_id} out of range 0..{}", cfg.n_conditions),
        ));
    }
    let n = cfg.n_tokens * cfg.d_model;
    let data = (0..n).map(|_| rng.standard_normal()).collect();
    Ok(LatentState {
        x: Matrix::from_vec(cfg.n_tokens, cfg.d_model, data)?,
        condition_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_length_schedule() {
        let s = build_schedule(10, 1e-4, 2e-2, 10).unwrap();
        assert_eq!(s.sample_steps, (0..10).rev().collect::<Vec<_>>());
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar.iter().all(|&a| a > 0.0 && a <= 1.0));
    }

    #[test]
    fn twenty_step_schedule() {
        let s = build_schedule(1000, 1e-4, 2e-2, 20).unwrap();
        assert_eq!(s.n_steps(), 20);
        assert_eq!(s.sample_steps[0], 999);
        assert_eq!(*s.sample_steps.last().unwrap(), 0);
        assert!(s.sample_steps.windows(2).all(|w| w[0] > w[1]));
        // independent product oracle at every sampled index
        for &t in &s.sample_steps {
            let mut prod = 1.0;
            for i in 0..=t {
                prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0);
            }
            assert!((s.alpha_bar[t] - prod).abs() <= 1e-15 * prod.max(1e-300).max(1.0));
        }
        assert_eq!(s.timestep(19), 999);
        assert_eq!(s.timestep(0), 0);
    }

    #[test]
    fn schedule_validation() {
        assert!(build_schedule(1000, 2e-2, 1e-4, 20).is_err());
        assert!(build_schedule(1000, 0.0, 1e-2, 20).is_err());
        assert!(build_schedule(10, 1e-4, 2e-2, 11).is_err());
        assert!(build_schedule(10, 1e-4, 2e-2, 0).is_err());
    }

    #[test]
    fn ddim_algebra() {
        let x = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let zero = Matrix::zeros(2, 2);
        assert_eq!(ddim_step(&x, &zero, 0.25, 1.0).unwrap(), x.scale(2.0));
        assert_eq!(ddim_step(&x, &zero, 0.3, 0.3).unwrap(), x);
    }

    #[test]
    fn ddim_elementwise_oracle() {
        let mut rng = SeededRng::new(8);
        let n = 12;
        let x = Matrix::from_vec(3, 4, (0..n).map(|_| rng.standard_normal()).collect()).unwrap();
        let e = Matrix::from_vec(3, 4, (0..n).map(|_| rng.standard_normal()).collect()).unwrap();
        let (at, ap) = (0.37, 0.61);
        let out = ddim_step(&x, &e, at, ap).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let x0 = (x.get(i, j) - (1.0f64 - at).sqrt() * e.get(i, j)) / at.sqrt();
                let want = ap.sqrt() * x0 + (1.0f64 - ap).sqrt() * e.get(i, j);
                assert!((out.get(i, j) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn ddim_rejects_bad_alphas_and_non_finite() {
        let x = Matrix::from_rows(&[[1.0]]);
        assert!(ddim_step(&x, &x, 0.0, 0.5).is_err());
        assert!(ddim_step(&x, &x, 0.5, 1.5).is_err());
        let inf = Matrix::from_rows(&[[f64::INFINITY]]);
        assert!(ddim_step(&inf, &x, 0.5, 0.6).is_err());
    }

    #[test]
    fn latent_statistics() {
        let cfg = DenoiserConfig {
            n_tokens: 100,
            d_model: 100,
            ..DenoiserConfig::default()
        };
        let mut rng = SeededRng::new(2024);
        let s = init_latent(&mut rng, &cfg, 0).unwrap();
        let v = s.x.data();
        assert_eq!(v.len(), 10_000);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!(var > 0.9 && var < 1.1, "var {var}");

        let again = init_latent(&mut SeededRng::new(2024), &cfg, 0).unwrap();
        assert!(s.x.bitwise_eq(&again.x));
        assert!(init_latent(&mut rng, &cfg, 8).is_err());
    }
}
