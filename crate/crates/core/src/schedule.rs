//! DDPM noise schedule, forward noising and the ancestral reverse step.
//!
//! Timesteps are 1-based: step `t` uses `beta[t - 1]` and `alpha_bar[t - 1]`.
//! Timestep 0 denotes the clean image (`alpha_bar = 1`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Image;

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_INFERENCE_STEPS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// An image together with the timestep it sits at.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageState<R: Real = f32> {
    pub x: Image<R>,
    pub t: usize,
}

impl DiffusionSchedule {
    /// Linear beta schedule over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            return Err(Error::Timestep {
                t,
                min,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t, 1)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t, 0)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    /// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn add_noise<R: Real>(&self, x0: &Image<R>, eps: &Image<R>, t: usize) -> Result<Image<R>> {
        x0.ensure_same_shape(eps, "add_noise")?;
        let ab = self.alpha_bar(t)?;
        let (a, b) = (R::from_f64_lossy(ab.sqrt()), R::from_f64_lossy((1.0 - ab).sqrt()));
        let data = x0
            .data
            .iter()
            .zip(&eps.data)
            .map(|(&x, &e)| a * x + b * e)
            .collect();
        Ok(Image { data, ..x0.clone() })
    }

    /// Coefficients `(1/sqrt(1 - beta_t), beta_t / sqrt(1 - alpha_bar_t), sigma_t)`
    /// of the ancestral step, with `sigma_t^2 = beta_t`.
    pub fn reverse_coefficients(&self, t: usize) -> Result<(f64, f64, f64)> {
        let beta = self.beta(t)?;
        let ab = self.alpha_bar(t)?;
        Ok((1.0 / (1.0 - beta).sqrt(), beta / (1.0 - ab).sqrt(), beta.sqrt()))
    }

    /// One DDPM ancestral step from `x_t` to `x_{t-1}`. Pass `z = None` for the
    /// deterministic (final) step.
    pub fn reverse_step<R: Real>(
        &self,
        x_t: &Image<R>,
        eps_hat: &Image<R>,
        t: usize,
        z: Option<&Image<R>>,
    ) -> Result<Image<R>> {
        x_t.ensure_same_shape(eps_hat, "reverse_step noise")?;
        let (scale, eps_coef, sigma) = self.reverse_coefficients(t)?;
        let (scale, eps_coef) = (R::from_f64_lossy(scale), R::from_f64_lossy(eps_coef));
        let mut data: Vec<R> = x_t
            .data
            .iter()
            .zip(&eps_hat.data)
            .map(|(&x, &e)| scale * (x - eps_coef * e))
            .collect();
        if let Some(z) = z {
            x_t.ensure_same_shape(z, "reverse_step z")?;
            let sigma = R::from_f64_lossy(sigma);
            for (d, &zv) in data.iter_mut().zip(&z.data) {
                *d += sigma * zv;
            }
        }
        Ok(Image { data, ..x_t.clone() })
    }
}

/// A short sampling schedule strided over a longer training schedule.
///
/// Inference step `k` (1-based) evaluates the denoiser at training timestep
/// `timesteps[k - 1]`; the derived betas make the ancestral step exact for
/// the skipped interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceSchedule {
    pub schedule: DiffusionSchedule,
    pub timesteps: Vec<usize>,
}

impl InferenceSchedule {
    pub fn respace(train: &DiffusionSchedule, steps: usize) -> Result<Self> {
        let total = train.steps();
        if steps == 0 || steps > total {
            return Err(Error::InvalidArgument(format!(
                "inference steps must be in 1..={total}, got {steps}"
            )));
        }
        let timesteps: Vec<usize> = (1..=steps)
            .map(|k| ((k * total) as f64 / steps as f64).round() as usize)
            .collect();
        let alpha_bars = timesteps.iter().map(|&t| train.alpha_bar(t)).collect::<Result<Vec<_>>>()?;
        let betas: Vec<f64> = alpha_bars
            .iter()
            .scan(1.0, |prev, &ab| {
                let b = 1.0 - ab / *prev;
                *prev = ab;
                Some(b)
            })
            .collect();
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("respaced beta {b} outside (0, 1)")));
        }
        // Keep the training alpha-bars rather than re-multiplying the derived betas.
        Ok(Self {
            schedule: DiffusionSchedule { betas, alpha_bars },
            timesteps,
        })
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    /// Training timestep for inference step `k`; 0 maps to the clean image.
    pub fn train_timestep(&self, k: usize) -> usize {
        if k == 0 {
            0
        } else {
            self.timesteps[k - 1]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_schedule() -> DiffusionSchedule {
        DiffusionSchedule::linear(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = DiffusionSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn default_schedule_terminal_alpha_bar() {
        // Direct product of (1 - beta) computed offline: 4.035829765e-5.
        let s = default_schedule();
        let last = s.alpha_bar(1000).unwrap();
        assert!((last - 4.035829765375676e-5).abs() < 1e-12, "{last}");
        assert!((s.alpha_bars()[0] - (1.0 - 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn thirty_step_schedule_is_strictly_decreasing() {
        let s = DiffusionSchedule::linear(30, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        assert_eq!(s.alpha_bars().len(), 30);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        let inf = InferenceSchedule::respace(&default_schedule(), 30).unwrap();
        assert_eq!(inf.steps(), 30);
        assert_eq!(*inf.timesteps.last().unwrap(), 1000);
        assert!(inf.schedule.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn respaced_alpha_bars_match_training_schedule() {
        let train = default_schedule();
        let inf = InferenceSchedule::respace(&train, 30).unwrap();
        for k in 1..=30 {
            let want = train.alpha_bar(inf.train_timestep(k)).unwrap();
            let got = inf.schedule.alpha_bar(k).unwrap();
            assert!((want - got).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(DiffusionSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(DiffusionSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn add_noise_limits() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Image::<f64>::standard_normal(1, 4, 4, &mut rng);
        let eps = Image::<f64>::standard_normal(1, 4, 4, &mut rng);
        assert_eq!(s.add_noise(&x0, &eps, 0).unwrap(), x0);
        let noisy = s.add_noise(&x0, &eps, 1000).unwrap();
        for (n, e) in noisy.data.iter().zip(&eps.data) {
            assert!((n - e).abs() < 0.02);
        }
        assert!(matches!(s.add_noise(&x0, &eps, 1001), Err(Error::Timestep { .. })));
    }

    #[test]
    fn add_noise_variance_monte_carlo() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = Image::<f64>::zeros(1, 1, 100_000);
        let eps = Image::<f64>::standard_normal(1, 1, 100_000, &mut rng);
        for t in [10, 300, 900] {
            let (_, var) = s.add_noise(&x0, &eps, t).unwrap().mean_var();
            let want = 1.0 - s.alpha_bar(t).unwrap();
            // Sample variance of N(0, v) over n draws has sd v*sqrt(2/n).
            assert!((var - want).abs() < 4.0 * want * (2.0f64 / 1e5).sqrt());
        }
    }

    #[test]
    fn one_step_round_trip_recovers_x0() {
        let s = DiffusionSchedule::linear(1, 0.3, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Image::<f64>::standard_normal(1, 3, 3, &mut rng);
        let eps = Image::<f64>::standard_normal(1, 3, 3, &mut rng);
        let x1 = s.add_noise(&x0, &eps, 1).unwrap();
        let back = s.reverse_step(&x1, &eps, 1, None).unwrap();
        for (a, b) in back.data.iter().zip(&x0.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_step_matches_closed_form_posterior_mean() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Image::<f64>::standard_normal(1, 4, 4, &mut rng);
        let eps = Image::<f64>::standard_normal(1, 4, 4, &mut rng);
        for t in [2, 50, 500, 1000] {
            let xt = s.add_noise(&x0, &eps, t).unwrap();
            let got = s.reverse_step(&xt, &eps, t, None).unwrap();
            // Posterior q(x_{t-1} | x_t, x_0) mean, coded independently.
            let beta = s.betas()[t - 1];
            let ab = s.alpha_bars()[t - 1];
            let ab_prev = s.alpha_bars()[t - 2];
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            for i in 0..16 {
                let want = c0 * x0.data[i] + ct * xt.data[i];
                assert!((got.data[i] - want).abs() < 1e-9 * (1.0 + want.abs()), "t={t}");
            }
        }
    }

    #[test]
    fn tiny_beta_step_is_nearly_identity() {
        let s = DiffusionSchedule::linear(1, 1e-12, 1e-12).unwrap();
        let x = Image::<f64>::from_vec(1, 1, 2, vec![0.3, -0.7]).unwrap();
        let e = Image::<f64>::from_vec(1, 1, 2, vec![1.0, 1.0]).unwrap();
        let out = s.reverse_step(&x, &e, 1, None).unwrap();
        for (a, b) in out.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(s.reverse_step(&x, &e, 0, None).is_err());
    }

    #[test]
    fn stochastic_step_mean_agrees_across_seeds() {
        let s = default_schedule();
        let x = Image::<f64>::from_vec(1, 1, 1, vec![0.4]).unwrap();
        let e = Image::<f64>::from_vec(1, 1, 1, vec![-0.2]).unwrap();
        let t = 500;
        let det = s.reverse_step(&x, &e, t, None).unwrap().data[0];
        let sigma = s.beta(t).unwrap().sqrt();
        let draws = 10_000;
        let mean_for = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..draws)
                .map(|_| {
                    let z = Image::<f64>::standard_normal(1, 1, 1, &mut rng);
                    s.reverse_step(&x, &e, t, Some(&z)).unwrap().data[0]
                })
                .sum::<f64>()
                / draws as f64
        };
        let (m1, m2) = (mean_for(1), mean_for(2));
        assert_ne!(m1, m2);
        let se = sigma / (draws as f64).sqrt();
        assert!((m1 - det).abs() < 3.0 * se);
        assert!((m2 - det).abs() < 3.0 * se);
    }
}
