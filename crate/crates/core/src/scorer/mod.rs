//! Image and concept embedders used to measure task completion.
//!
//! The image encoder is four strided convolutions, global average pooling
//! and a linear projection; concepts are rows of a learned table. Both sides
//! are unit-normalised, so a completion score is a cosine.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::ShapeDataset;
use crate::denoiser::ConceptId;
use crate::error::{Error, Result};
use crate::nn::{
    cast_vec, prefixed, silu, silu_backward, softmax_in_place, uniform_init, Adam, AdamConfig, Conv2d, ConvCache,
    Linear, ParamRef, Parameterized,
};
use crate::real::Real;
use crate::schedule::DiffusionSchedule;
use crate::tensor::Image;

/// Which inputs the scorer saw during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Forward-noised images at uniformly random timesteps.
    NoiseAware,
    /// Clean images only.
    Vanilla,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::NoiseAware => "noise_aware",
            Regime::Vanilla => "vanilla",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise_aware" | "noise-aware" => Ok(Regime::NoiseAware),
            "vanilla" => Ok(Regime::Vanilla),
            _ => Err(Error::InvalidArgument(format!("unknown scorer regime '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub image_size: usize,
    pub channels: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub num_concepts: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            width: 16,
            embed_dim: 64,
            num_concepts: 10,
        }
    }
}

/// Cosine between a concept and a viewed image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionScore {
    pub value: f64,
    pub view_index: usize,
    pub timestep: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scorer<R = f32> {
    pub config: ScorerConfig,
    pub regime: Regime,
    pub conv1: Conv2d<R>,
    pub conv2: Conv2d<R>,
    pub conv3: Conv2d<R>,
    pub conv4: Conv2d<R>,
    pub proj: Linear<R>,
    /// `num_concepts x embed_dim`, normalised on use.
    pub concepts: Vec<R>,
}

pub type ScorerParams = Scorer<f32>;

struct ScorerCache<R> {
    batch: usize,
    caches: [ConvCache<R>; 4],
    pre: [Vec<R>; 4],
    pooled: Vec<R>,
    raw: Vec<R>,
    norms: Vec<R>,
    emb: Vec<R>,
}

/// `(u, |v|)` with `u = v / |v|`.
fn normalise_rows<R: Real>(v: &[R], dim: usize) -> (Vec<R>, Vec<R>) {
    let mut out = v.to_vec();
    let mut norms = Vec::with_capacity(v.len() / dim);
    for row in out.chunks_mut(dim) {
        let n = row.iter().map(|&x| x * x).sum::<R>().sqrt().max(R::from_f64_lossy(1e-12));
        row.iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    (out, norms)
}

/// Gradient through row normalisation: `(du - u (u . du)) / |v|`.
fn normalise_rows_backward<R: Real>(u: &[R], norms: &[R], du: &[R], dim: usize) -> Vec<R> {
    let mut dv = vec![R::zero(); u.len()];
    for (r, &n) in norms.iter().enumerate() {
        let s = r * dim..(r + 1) * dim;
        let dot: R = u[s.clone()].iter().zip(&du[s.clone()]).map(|(&a, &b)| a * b).sum();
        for i in s {
            dv[i] = (du[i] - u[i] * dot) / n;
        }
    }
    dv
}

impl<R: Real> Scorer<R> {
    pub fn new(config: ScorerConfig, regime: Regime, seed: u64) -> Result<Self> {
        if config.image_size < 8 || config.image_size % 8 != 0 || config.width == 0 || config.embed_dim == 0 {
            return Err(Error::InvalidArgument("scorer needs image_size a multiple of 8 and positive widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let conv1 = Conv2d::new(config.channels, w, 3, 1, 1, &mut rng);
        let conv2 = Conv2d::new(w, 2 * w, 3, 2, 1, &mut rng);
        let conv3 = Conv2d::new(2 * w, 2 * w, 3, 2, 1, &mut rng);
        let conv4 = Conv2d::new(2 * w, 4 * w, 3, 2, 1, &mut rng);
        let proj = Linear::new(4 * w, config.embed_dim, &mut rng);
        let concepts = uniform_init(config.num_concepts * config.embed_dim, 1, &mut rng);
        Ok(Self {
            config,
            regime,
            conv1,
            conv2,
            conv3,
            conv4,
            proj,
            concepts,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_grad();
        z
    }

    pub fn cast<S: Real>(&self) -> Scorer<S> {
        Scorer {
            config: self.config.clone(),
            regime: self.regime,
            conv1: self.conv1.cast(),
            conv2: self.conv2.cast(),
            conv3: self.conv3.cast(),
            conv4: self.conv4.cast(),
            proj: self.proj.cast(),
            concepts: cast_vec(&self.concepts),
        }
    }

    fn convs(&self) -> [&Conv2d<R>; 4] {
        [&self.conv1, &self.conv2, &self.conv3, &self.conv4]
    }

    fn forward(&self, x: &[R], batch: usize) -> ScorerCache<R> {
        let mut h = self.config.image_size;
        let mut act = x.to_vec();
        let mut caches = Vec::with_capacity(4);
        let mut pre = Vec::with_capacity(4);
        for conv in self.convs() {
            let (z, cache) = conv.forward(&act, batch, h, h);
            h = conv.out_size(h, h).0;
            act = silu(&z);
            caches.push(cache);
            pre.push(z);
        }
        let ch = self.conv4.out_ch;
        let hw = h * h;
        let pooled: Vec<R> = act
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<R>() / R::from_f64_lossy(hw as f64))
            .collect();
        debug_assert_eq!(pooled.len(), batch * ch);
        let raw = self.proj.forward(&pooled, batch);
        let (emb, norms) = normalise_rows(&raw, self.config.embed_dim);
        ScorerCache {
            batch,
            caches: caches.try_into().ok().expect("four convolutions"),
            pre: pre.try_into().ok().expect("four convolutions"),
            pooled,
            raw,
            norms,
            emb,
        }
    }

    fn backward(&self, cache: &ScorerCache<R>, demb: &[R], grad: &mut Scorer<R>) {
        let e = self.config.embed_dim;
        debug_assert_eq!(cache.raw.len(), cache.batch * e);
        let draw = normalise_rows_backward(&cache.emb, &cache.norms, demb, e);
        let dpooled = self.proj.backward(&cache.pooled, &draw, cache.batch, Some(&mut grad.proj));
        let s4 = self.config.image_size / 8;
        let hw = s4 * s4;
        let mut dact: Vec<R> = dpooled
            .iter()
            .flat_map(|&d| std::iter::repeat_n(d / R::from_f64_lossy(hw as f64), hw))
            .collect();
        let grads = [&mut grad.conv1, &mut grad.conv2, &mut grad.conv3, &mut grad.conv4];
        let convs = self.convs();
        for (i, g) in grads.into_iter().enumerate().rev() {
            let dz = silu_backward(&cache.pre[i], &dact);
            match convs[i].backward(&cache.caches[i], &dz, Some(g), i > 0) {
                Some(dx) => dact = dx,
                None => break,
            }
        }
    }

    fn check_image(&self, x: &Image<R>) -> Result<()> {
        let s = self.config.image_size;
        if x.shape() != (self.config.channels, s, s) {
            return Err(Error::Shape(format!(
                "scorer expects {}x{s}x{s}, got {:?}",
                self.config.channels,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Unit embeddings of several images, evaluated as one batch.
    pub fn embed_images(&self, xs: &[&Image<R>]) -> Result<Vec<Vec<R>>> {
        for x in xs {
            self.check_image(x)?;
        }
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let flat: Vec<R> = xs.iter().flat_map(|x| x.data.iter().copied()).collect();
        let cache = self.forward(&flat, xs.len());
        Ok(cache.emb.chunks(self.config.embed_dim).map(<[R]>::to_vec).collect())
    }

    pub fn embed_image(&self, x: &Image<R>) -> Result<Vec<R>> {
        Ok(self.embed_images(&[x])?.pop().expect("one embedding"))
    }

    pub fn embed_concept(&self, c: ConceptId) -> Result<Vec<R>> {
        let e = self.config.embed_dim;
        if c >= self.config.num_concepts {
            return Err(Error::UnknownConcept {
                id: c,
                size: self.config.num_concepts,
            });
        }
        Ok(normalise_rows(&self.concepts[c * e..(c + 1) * e], e).0)
    }

    /// `cos(concept c, image x)`.
    pub fn completion_score(&self, c: ConceptId, x: &Image<R>) -> Result<CompletionScore> {
        let scores = self.completion_scores(&[(c, x)], 0)?;
        Ok(scores[0])
    }

    /// Scores for several (concept, image) pairs; `view_index` is the
    /// position in the list.
    pub fn completion_scores(&self, pairs: &[(ConceptId, &Image<R>)], timestep: usize) -> Result<Vec<CompletionScore>> {
        let concepts = pairs.iter().map(|&(c, _)| self.embed_concept(c)).collect::<Result<Vec<_>>>()?;
        let images: Vec<&Image<R>> = pairs.iter().map(|&(_, x)| x).collect();
        let embs = self.embed_images(&images)?;
        Ok(concepts
            .iter()
            .zip(&embs)
            .enumerate()
            .map(|(i, (q, e))| CompletionScore {
                value: cosine(q, e),
                view_index: i,
                timestep,
            })
            .collect())
    }

    /// Contrastive loss over a labelled batch and its parameter gradient.
    ///
    /// Logits are cosines over `temperature`. The image side is a softmax
    /// over all concepts; the concept side is a softmax over the batch with
    /// the target spread evenly over same-label items. The two are averaged.
    pub fn loss_and_grad(&self, x: &[R], labels: &[ConceptId], temperature: f64) -> (f64, Scorer<R>) {
        let b = labels.len();
        let (k, e) = (self.config.num_concepts, self.config.embed_dim);
        let cache = self.forward(x, b);
        let (q, qnorms) = normalise_rows(&self.concepts, e);
        let inv_t = R::from_f64_lossy(1.0 / temperature);
        let mut logits = vec![R::zero(); b * k];
        for i in 0..b {
            for c in 0..k {
                let dot: R = cache.emb[i * e..(i + 1) * e]
                    .iter()
                    .zip(&q[c * e..(c + 1) * e])
                    .map(|(&a, &b)| a * b)
                    .sum();
                logits[i * k + c] = dot * inv_t;
            }
        }
        let half = R::from_f64_lossy(0.5);
        let mut dlogits = vec![R::zero(); b * k];
        let mut loss = 0.0;
        let bf = R::from_f64_lossy(b as f64);
        for i in 0..b {
            let mut p = logits[i * k..(i + 1) * k].to_vec();
            softmax_in_place(&mut p);
            loss -= 0.5 * p[labels[i]].as_f64().max(1e-300).ln() / b as f64;
            for c in 0..k {
                let target = if c == labels[i] { R::one() } else { R::zero() };
                dlogits[i * k + c] += half * (p[c] - target) / bf;
            }
        }
        let present: Vec<ConceptId> = (0..k).filter(|c| labels.contains(c)).collect();
        let pf = R::from_f64_lossy(present.len() as f64);
        for &c in &present {
            let mut r: Vec<R> = (0..b).map(|i| logits[i * k + c]).collect();
            softmax_in_place(&mut r);
            let count = labels.iter().filter(|&&l| l == c).count() as f64;
            for i in 0..b {
                let target = if labels[i] == c { 1.0 / count } else { 0.0 };
                if target > 0.0 {
                    loss -= 0.5 * target * r[i].as_f64().max(1e-300).ln() / present.len() as f64;
                }
                dlogits[i * k + c] += half * (r[i] - R::from_f64_lossy(target)) / pf;
            }
        }
        let mut demb = vec![R::zero(); b * e];
        let mut dq = vec![R::zero(); k * e];
        for i in 0..b {
            for c in 0..k {
                let g = dlogits[i * k + c] * inv_t;
                for d in 0..e {
                    demb[i * e + d] += g * q[c * e + d];
                    dq[c * e + d] += g * cache.emb[i * e + d];
                }
            }
        }
        let mut grad = self.zeros_like();
        self.backward(&cache, &demb, &mut grad);
        grad.concepts = normalise_rows_backward(&q, &qnorms, &dq, e);
        (loss, grad)
    }
}

pub fn cosine<R: Real>(a: &[R], b: &[R]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    let na: f64 = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    (dot / (na * nb).max(1e-300)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for ScorerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 3e-3,
            temperature: 0.07,
            seed: 0,
            log_every: 10,
        }
    }
}

/// Trains a scorer in the given regime and returns it with the logged
/// `(step, loss)` pairs.
pub fn train_scorer(
    dataset: &ShapeDataset,
    schedule: &DiffusionSchedule,
    regime: Regime,
    config: &ScorerConfig,
    train: &ScorerTrainConfig,
) -> Result<(ScorerParams, Vec<(usize, f64)>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.vocab.len() != config.num_concepts {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} concepts, scorer expects {}",
            dataset.vocab.len(),
            config.num_concepts
        )));
    }
    if train.batch_size == 0 || !(train.temperature > 0.0) {
        return Err(Error::InvalidArgument("batch_size and temperature must be positive".into()));
    }
    let mut model = Scorer::<f32>::new(config.clone(), regime, train.seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: train.lr,
            ..AdamConfig::default()
        },
        &model,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5c0_4e55);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    let (c, s) = (config.channels, config.image_size);
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch_size) {
            let mut xs = Vec::with_capacity(chunk.len() * c * s * s);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let x0 = &dataset.images[i];
                if x0.shape() != (c, s, s) {
                    return Err(Error::Shape(format!("dataset image {:?} vs scorer {c}x{s}x{s}", x0.shape())));
                }
                let x = match regime {
                    Regime::Vanilla => x0.clone(),
                    Regime::NoiseAware => {
                        let t = rng.random_range(0..=schedule.steps());
                        let eps = Image::<f32>::standard_normal(c, s, s, &mut rng);
                        schedule.add_noise(x0, &eps, t)?
                    }
                };
                xs.extend_from_slice(&x.data);
                labels.push(dataset.labels[i]);
            }
            let (loss, grad) = model.loss_and_grad(&xs, &labels, train.temperature);
            adam.step(&mut model, &grad, train.lr);
            if train.log_every > 0 && step % train.log_every == 0 {
                log.push((step, loss));
            }
            step += 1;
        }
    }
    if !model.all_finite() {
        return Err(Error::InvalidArgument("scorer training diverged".into()));
    }
    Ok((model, log))
}

pub const CHECKPOINT_KIND: &str = "scorer";

impl Scorer<f32> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(CHECKPOINT_KIND, &self.config, Some(self.regime.name()), &self.params())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, values) = checkpoint::decode(bytes)?;
        if header.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a scorer, found '{}'", header.kind)));
        }
        let regime: Regime = header
            .regime
            .as_deref()
            .ok_or_else(|| Error::Checkpoint("scorer header has no regime".into()))?
            .parse()?;
        let config: ScorerConfig = serde_json::from_value(header.config.clone())?;
        let mut model = Scorer::new(config, regime, 0)?;
        checkpoint::restore(&mut model, &header, &values)?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl<R: Real> Parameterized<R> for Scorer<R> {
    fn params(&self) -> Vec<ParamRef<'_, R>> {
        let mut out = Vec::new();
        out.extend(prefixed("conv1", self.conv1.params()));
        out.extend(prefixed("conv2", self.conv2.params()));
        out.extend(prefixed("conv3", self.conv3.params()));
        out.extend(prefixed("conv4", self.conv4.params()));
        out.extend(prefixed("proj", self.proj.params()));
        out.push(ParamRef {
            name: "concepts".into(),
            shape: vec![self.config.num_concepts, self.config.embed_dim],
            data: &self.concepts,
        });
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<R>> {
        let mut out = Vec::new();
        out.extend(self.conv1.params_mut());
        out.extend(self.conv2.params_mut());
        out.extend(self.conv3.params_mut());
        out.extend(self.conv4.params_mut());
        out.extend(self.proj.params_mut());
        out.push(&mut self.concepts);
        out
    }
}
