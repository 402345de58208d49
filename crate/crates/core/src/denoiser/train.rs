use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Condition, Denoiser, DenoiserConfig};
use crate::data::ShapeDataset;
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Adam, AdamConfig, Ema, Parameterized};
use crate::schedule::DiffusionSchedule;
use crate::tensor::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing the concept with the null token.
    pub cond_dropout: f64,
    pub grad_clip: f64,
    /// 0 disables the parameter average.
    pub ema_decay: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 2e-3,
            cond_dropout: 0.1,
            grad_clip: 1.0,
            ema_decay: 0.995,
            seed: 0,
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
}

/// Epsilon-prediction training: each item is noised at a uniform timestep
/// and the model regresses the injected noise.
pub fn train_denoiser(
    dataset: &ShapeDataset,
    config: &DenoiserConfig,
    schedule: &DiffusionSchedule,
    train: &DenoiserTrainConfig,
) -> Result<(Denoiser, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.vocab.len() != config.num_concepts {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} concepts, model expects {}",
            dataset.vocab.len(),
            config.num_concepts
        )));
    }
    if schedule.steps() != config.max_timestep {
        return Err(Error::InvalidArgument("schedule length differs from max_timestep".into()));
    }
    if train.batch_size == 0 || !(0.0..=1.0).contains(&train.cond_dropout) {
        return Err(Error::InvalidArgument("batch_size must be positive and cond_dropout in [0, 1]".into()));
    }
    let mut model = Denoiser::<f32>::new(config.clone(), train.seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: train.lr,
            ..AdamConfig::default()
        },
        &model,
    );
    let mut ema = Ema::new(&model, train.ema_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_0001);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = TrainReport::default();
    let (c, s) = (config.channels, config.image_size);
    let pixels = c * s * s;
    let mut step = 0;
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch_size) {
            let b = chunk.len();
            let mut xs = Vec::with_capacity(b * pixels);
            let mut eps = Vec::with_capacity(b * pixels);
            let mut ts = Vec::with_capacity(b);
            let mut conds = Vec::with_capacity(b);
            for &i in chunk {
                let x0 = &dataset.images[i];
                if x0.shape() != (c, s, s) {
                    return Err(Error::Shape(format!("dataset image {:?} vs model {c}x{s}x{s}", x0.shape())));
                }
                let t = rng.random_range(1..=schedule.steps());
                let noise = Image::<f32>::standard_normal(c, s, s, &mut rng);
                xs.extend_from_slice(&schedule.add_noise(x0, &noise, t)?.data);
                eps.extend_from_slice(&noise.data);
                ts.push(t);
                conds.push(if rng.random_bool(train.cond_dropout) {
                    Condition::Null
                } else {
                    Condition::Concept(dataset.labels[i])
                });
            }
            let (out, cache) = model.forward_batch(&xs, &ts, &conds);
            let n = out.len() as f32;
            let mut loss = 0.0f64;
            let dout: Vec<f32> = out
                .iter()
                .zip(&eps)
                .map(|(o, e)| {
                    let d = o - e;
                    loss += (d as f64).powi(2);
                    2.0 * d / n
                })
                .collect();
            loss /= n as f64;
            let mut grad = model.zeros_like();
            model.backward_batch(&cache, &dout, &mut grad);
            if train.grad_clip > 0.0 {
                clip_grad_norm(&mut grad, train.grad_clip);
            }
            adam.step(&mut model, &grad, train.lr);
            // Warm-up keeps the average from clinging to the initial weights.
            ema.decay = train.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64));
            ema.update(&model);
            if train.log_every > 0 && step % train.log_every == 0 {
                report.losses.push(LossRecord { step, epoch, loss });
            }
            step += 1;
        }
    }
    if !model.all_finite() {
        return Err(Error::InvalidArgument("training diverged to non-finite weights".into()));
    }
    let out = if train.ema_decay > 0.0 { ema.shadow } else { model };
    Ok((out, report))
}
