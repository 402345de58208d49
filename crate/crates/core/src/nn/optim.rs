use serde::{Deserialize, Serialize};

use super::Parameterized;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<R> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new<M: Parameterized<R>>(config: AdamConfig, model: &M) -> Self {
        let zeros: Vec<Vec<R>> = model
            .params()
            .iter()
            .map(|p| vec![R::zero(); p.data.len()])
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step<M: Parameterized<R>>(&mut self, model: &mut M, grads: &M, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = R::from_f64_lossy(lr * bc2.sqrt() / bc1);
        let (b1, b2) = (R::from_f64_lossy(c.beta1), R::from_f64_lossy(c.beta2));
        let eps = R::from_f64_lossy(c.eps * bc2.sqrt());
        let grads = grads.params();
        for (((p, g), m), v) in model
            .params_mut()
            .into_iter()
            .zip(&grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (R::one() - b1) * gi;
                v[i] = b2 * v[i] + (R::one() - b2) * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone)]
pub struct Ema<M> {
    pub decay: f64,
    pub shadow: M,
}

impl<M: Clone> Ema<M> {
    pub fn new(model: &M, decay: f64) -> Self {
        Self {
            decay,
            shadow: model.clone(),
        }
    }

    pub fn update<R: Real>(&mut self, model: &M)
    where
        M: Parameterized<R>,
    {
        let d = R::from_f64_lossy(self.decay);
        let src = model.params();
        for (s, p) in self.shadow.params_mut().into_iter().zip(&src) {
            for (a, &b) in s.iter_mut().zip(p.data) {
                *a = d * *a + (R::one() - d) * b;
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm<R: Real, M: Parameterized<R>>(grads: &mut M, max_norm: f64) -> f64 {
    let norm = grads
        .params()
        .iter()
        .flat_map(|p| p.data.iter())
        .map(|v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = R::from_f64_lossy(max_norm / norm);
        for p in grads.params_mut() {
            p.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut lin = Linear::<f64>::new(3, 1, &mut rng);
        let mut opt = Adam::new(AdamConfig::default(), &lin);
        for _ in 0..3000 {
            let mut g = lin.zeros_like();
            for (gw, w) in g.weight.iter_mut().zip(&lin.weight) {
                *gw = 2.0 * (w - 0.5);
            }
            g.bias[0] = 2.0 * (lin.bias[0] + 1.0);
            opt.step(&mut lin, &g, 1e-2);
        }
        assert!(lin.weight.iter().all(|w| (w - 0.5).abs() < 1e-3));
        assert!((lin.bias[0] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Linear::<f32>::new(10, 10, &mut rng);
        g.weight.iter_mut().for_each(|v| *v *= 100.0);
        let before = clip_grad_norm(&mut g, 1.0);
        assert!(before > 1.0);
        let after: f64 = g.flatten().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-5);
    }
}
