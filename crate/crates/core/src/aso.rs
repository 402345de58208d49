//! Anti-segregation optimisation: an attention-overlap loss across views and
//! a single normalised gradient step on the denoised image.

use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionGrid, Condition, Denoiser, CONCEPT_TOKEN};
use crate::error::{Error, Result};
use crate::pipeline::GenerationTask;
use crate::real::Real;
use crate::schedule::InferenceSchedule;
use crate::tensor::Image;
use crate::views::ViewTransform;

/// Summed attention of one concept's tokens, in the canonical frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMap {
    pub resolution: usize,
    pub values: Vec<f64>,
    pub view_index: usize,
    pub timestep: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsoConfig {
    /// Target overlap ratio in `[0, 0.5]`.
    pub phi: f64,
    pub step_size: f64,
    /// Fraction of the earliest inference steps in which the update runs.
    pub active_fraction: f64,
}

impl Default for AsoConfig {
    fn default() -> Self {
        Self {
            phi: 0.45,
            step_size: 0.1,
            active_fraction: 0.5,
        }
    }
}

impl AsoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.phi) {
            return Err(Error::InvalidArgument(format!("phi must lie in [0, 0.5], got {}", self.phi)));
        }
        if !(self.step_size >= 0.0) {
            return Err(Error::InvalidArgument("ASO step size must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.active_fraction) {
            return Err(Error::InvalidArgument("active_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Whether the update runs after inference step `t` of `total` (steps
    /// count down from `total`).
    pub fn is_active(&self, t: usize, total: usize) -> bool {
        t >= 2 && (t as f64) > total as f64 * (1.0 - self.active_fraction)
    }
}

/// Pulls the concept's attention out of `grid` and maps it into the
/// canonical frame of view `v`.
pub fn concept_map<R: Real>(
    grid: &AttentionGrid<R>,
    tokens: &[usize],
    v: ViewTransform,
    view_index: usize,
    timestep: usize,
) -> Result<ConceptMap> {
    if tokens.is_empty() || tokens.iter().any(|&t| t >= grid.tokens) {
        return Err(Error::InvalidArgument(format!(
            "token indices {tokens:?} outside a {}-token grid",
            grid.tokens
        )));
    }
    let r = grid.resolution;
    let summed: Vec<f64> = grid
        .scores
        .chunks(grid.tokens)
        .map(|row| tokens.iter().map(|&t| row[t].as_f64()).sum())
        .collect();
    Ok(ConceptMap {
        resolution: r,
        values: v.invert().apply_to_plane(r, &summed)?,
        view_index,
        timestep,
    })
}

/// `sum_p min(a, b) / sum_p (a + b)`; lies in `[0, 0.5]` for nonnegative maps.
pub fn overlap_ratio(a: &ConceptMap, b: &ConceptMap) -> Result<f64> {
    ratio_parts(&a.values, &b.values).map(|(m, s)| m / s)
}

fn ratio_parts(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Shape("concept maps differ in resolution".into()));
    }
    let min: f64 = a.iter().zip(b).map(|(x, y)| x.min(*y)).sum();
    let total: f64 = a.iter().zip(b).map(|(x, y)| x + y).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateMaps);
    }
    Ok((min, total))
}

/// `1 / (N (N - 1)) * sum_{i<j} |phi - ratio_ij|`.
pub fn anti_seg_loss(maps: &[ConceptMap], phi: f64) -> Result<f64> {
    anti_seg_loss_with_grad(maps, phi).map(|l| l.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AntiSegLoss {
    pub loss: f64,
    /// `(i, j, ratio)` for every `i < j`.
    pub ratios: Vec<(usize, usize, f64)>,
    /// `d loss / d map_i`, canonical frame.
    pub grads: Vec<Vec<f64>>,
}

/// Loss and subgradient. At `a_p == b_p` the min splits evenly; at
/// `ratio == phi` the absolute value contributes zero.
pub fn anti_seg_loss_with_grad(maps: &[ConceptMap], phi: f64) -> Result<AntiSegLoss> {
    let n = maps.len();
    if n < 2 {
        return Err(Error::InvalidArgument("anti-segregation loss needs at least two maps".into()));
    }
    let prefactor = 1.0 / (n * (n - 1)) as f64;
    let mut loss = 0.0;
    let mut ratios = Vec::with_capacity(n * (n - 1) / 2);
    let mut grads = vec![vec![0.0; maps[0].values.len()]; n];
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&maps[i].values, &maps[j].values);
            let (min, total) = ratio_parts(a, b)?;
            let ratio = min / total;
            loss += (phi - ratio).abs();
            ratios.push((i, j, ratio));
            let outer = -prefactor * sign(phi - ratio);
            if outer == 0.0 {
                continue;
            }
            for p in 0..a.len() {
                let (dmin_a, dmin_b) = match a[p].partial_cmp(&b[p]) {
                    Some(std::cmp::Ordering::Less) => (1.0, 0.0),
                    Some(std::cmp::Ordering::Greater) => (0.0, 1.0),
                    _ => (0.5, 0.5),
                };
                grads[i][p] += outer * (dmin_a - ratio) / total;
                grads[j][p] += outer * (dmin_b - ratio) / total;
            }
        }
    }
    Ok(AntiSegLoss {
        loss: prefactor * loss,
        ratios,
        grads,
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Result of differentiating the anti-segregation loss through the
/// denoiser's attention.
#[derive(Debug, Clone)]
pub struct AsoGradient<R: Real> {
    pub loss: f64,
    pub ratios: Vec<(usize, usize, f64)>,
    pub grad: Image<R>,
}

impl<R: Real> Denoiser<R> {
    /// Gradient of the anti-segregation loss with respect to the canonical
    /// image `x`, probing each task's conditional attention at timestep `t`.
    pub fn attention_loss_gradient(
        &self,
        x: &Image<R>,
        t: usize,
        tasks: &[GenerationTask],
        phi: f64,
    ) -> Result<AsoGradient<R>> {
        if tasks.len() < 2 {
            return Err(Error::InvalidArgument("attention loss needs at least two tasks".into()));
        }
        let r = self.config.attention_resolution();
        let mut probes = Vec::with_capacity(tasks.len());
        let mut maps = Vec::with_capacity(tasks.len());
        for (i, task) in tasks.iter().enumerate() {
            let xv = task.view.apply(x)?;
            let (grid, probe) = self.attention_with_input_grad(&xv, t, task.concept)?;
            let tokens = self.concept_tokens(task.concept)?;
            maps.push(concept_map(&grid, &tokens, task.view, i, t)?);
            probes.push((probe, grid.tokens, tokens));
        }
        let loss = anti_seg_loss_with_grad(&maps, phi)?;
        let mut grad = Image::zeros(x.channels, x.height, x.width);
        for ((task, (probe, width, tokens)), g) in tasks.iter().zip(&probes).zip(&loss.grads) {
            let in_view = task.view.apply_to_plane(r, g)?;
            let mut dgrid = vec![R::zero(); r * r * width];
            for (p, &v) in in_view.iter().enumerate() {
                for &tok in tokens {
                    dgrid[p * width + tok] = R::from_f64_lossy(v);
                }
            }
            let dx = task.view.invert().apply(&probe.input_gradient(&dgrid))?;
            for (acc, v) in grad.data.iter_mut().zip(&dx.data) {
                *acc += *v;
            }
        }
        Ok(AsoGradient {
            loss: loss.loss,
            ratios: loss.ratios,
            grad,
        })
    }

    /// Canonical-frame concept maps for every task at timestep `t`.
    pub fn concept_maps(&self, x: &Image<R>, t: usize, tasks: &[GenerationTask]) -> Result<Vec<ConceptMap>> {
        tasks
            .iter()
            .enumerate()
            .map(|(i, task)| {
                let xv = task.view.apply(x)?;
                let (_, grid) = self.predict_noise(&xv, t, Condition::Concept(task.concept))?;
                concept_map(&grid, &[CONCEPT_TOKEN], task.view, i, t)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsoOutcome<R = f32> {
    pub x: Image<R>,
    pub loss: Option<f64>,
    pub ratios: Vec<(usize, usize, f64)>,
    pub update_norm: f64,
}

/// One look-ahead step: the loss is probed at `(x_next, t - 1)`, the state
/// the next reverse step will consume, and `x_next` moves against the
/// max-abs-normalised gradient.
pub fn aso_update<R: Real>(
    x_next: &Image<R>,
    tasks: &[GenerationTask],
    denoiser: &Denoiser<R>,
    t: usize,
    schedule: &InferenceSchedule,
    cfg: &AsoConfig,
) -> Result<AsoOutcome<R>> {
    cfg.validate()?;
    let unchanged = || AsoOutcome {
        x: x_next.clone(),
        loss: None,
        ratios: Vec::new(),
        update_norm: 0.0,
    };
    if !cfg.is_active(t, schedule.steps()) || cfg.step_size == 0.0 {
        return Ok(unchanged());
    }
    let probe_t = schedule.train_timestep(t - 1);
    let g = denoiser.attention_loss_gradient(x_next, probe_t, tasks, cfg.phi)?;
    let max = g.grad.max_abs();
    let mut x = x_next.clone();
    let mut norm = 0.0;
    if max > R::zero() {
        let scale = R::from_f64_lossy(cfg.step_size) / max;
        for (xv, gv) in x.data.iter_mut().zip(&g.grad.data) {
            let delta = scale * *gv;
            *xv -= delta;
            norm += delta.as_f64().powi(2);
        }
    }
    Ok(AsoOutcome {
        x,
        loss: Some(g.loss),
        ratios: g.ratios,
        update_norm: norm.sqrt(),
    })
}

/// Convenience for building maps directly from values (tests, tooling).
pub fn map_from_values(values: Vec<f64>, view_index: usize) -> Result<ConceptMap> {
    let r = (values.len() as f64).sqrt() as usize;
    if r * r != values.len() {
        return Err(Error::Shape(format!("{} values do not form a square map", values.len())));
    }
    Ok(ConceptMap {
        resolution: r,
        values,
        view_index,
        timestep: 0,
    })
}
