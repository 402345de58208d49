//! Conditional noise predictor with one cross-attention block.
//!
//! ```text
//! x ─ conv_in ─ down1 ─ down2 ─ attn(ctx) ─ mid ─ up1 ─ up2 ─ conv_out ─ eps
//!        └──────────│──────────────────────────────│─────┘
//!                   └──────────────────────────────┘
//! ```
//!
//! The context is two tokens: a learned start token and either a concept
//! embedding or the learned null embedding. Attention probabilities at the
//! `r x r` bottleneck are exposed as an [`AttentionGrid`].

mod train;

pub use train::{train_denoiser, DenoiserTrainConfig, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{
    cast_vec, concat_channels, prefixed, silu, silu_backward, split_channels, uniform_init, upsample2,
    upsample2_backward, AttentionCache, Conv2d, ConvCache, CrossAttention, Linear, ParamRef,
    Parameterized,
};
use crate::real::Real;
use crate::tensor::Image;

/// Token slot holding the concept (or null) embedding in every context.
pub const CONCEPT_TOKEN: usize = 1;
const CONTEXT_TOKENS: usize = 2;

pub type ConceptId = usize;

/// Names of the concepts a model was trained on; the id is the index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptVocab {
    pub names: Vec<String>,
}

impl ConceptVocab {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::InvalidArgument("concept names must be unique".into()));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ConceptId> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown concept '{name}'")))
    }

    pub fn name(&self, id: ConceptId) -> Result<&str> {
        self.names
            .get(id)
            .map(String::as_str)
            .ok_or(Error::UnknownConcept { id, size: self.len() })
    }
}

/// Spatial attention over context tokens: `r x r x L`, stored `[p][l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrid<R = f32> {
    pub resolution: usize,
    pub tokens: usize,
    pub scores: Vec<R>,
}

impl<R: Real> AttentionGrid<R> {
    /// Scores of one token as an `r x r` plane.
    pub fn token_plane(&self, token: usize) -> Vec<R> {
        self.scores
            .iter()
            .skip(token)
            .step_by(self.tokens)
            .copied()
            .collect()
    }

    pub fn max_row_error(&self) -> f64 {
        self.scores
            .chunks(self.tokens)
            .map(|row| (row.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    Concept(ConceptId),
    Null,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub base_channels: usize,
    pub mid_channels: usize,
    pub context_dim: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
    pub num_concepts: usize,
    /// Largest timestep the model accepts (the training schedule length).
    pub max_timestep: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            base_channels: 16,
            mid_channels: 32,
            context_dim: 32,
            heads: 2,
            time_dim: 32,
            time_hidden: 64,
            num_concepts: 10,
            max_timestep: 1000,
        }
    }
}

impl DenoiserConfig {
    pub fn attention_resolution(&self) -> usize {
        self.image_size / 4
    }

    fn validate(&self) -> Result<()> {
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return Err(Error::InvalidArgument("image_size must be a positive multiple of 4".into()));
        }
        if self.heads == 0 || self.mid_channels % self.heads != 0 {
            return Err(Error::InvalidArgument("mid_channels must split evenly over heads".into()));
        }
        if self.time_dim % 2 != 0 || self.num_concepts == 0 {
            return Err(Error::InvalidArgument("time_dim must be even and num_concepts positive".into()));
        }
        Ok(())
    }
}

/// Trainable parameters of the noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<R = f32> {
    pub config: DenoiserConfig,
    pub conv_in: Conv2d<R>,
    pub down1: Conv2d<R>,
    pub down2: Conv2d<R>,
    pub attn: CrossAttention<R>,
    pub mid: Conv2d<R>,
    pub up1: Conv2d<R>,
    pub up2: Conv2d<R>,
    pub conv_out: Conv2d<R>,
    pub time_mlp: Linear<R>,
    pub time_proj: Linear<R>,
    pub start_token: Vec<R>,
    /// `(num_concepts + 1) x context_dim`; the last row is the null embedding.
    pub concept_table: Vec<R>,
}

pub type DenoiserParams = Denoiser<f32>;

struct EncoderCache<R> {
    batch: usize,
    temb: Vec<R>,
    time_pre: Vec<R>,
    time_hidden: Vec<R>,
    tb: Vec<R>,
    z1: Vec<R>,
    a1: Vec<R>,
    c1: ConvCache<R>,
    z2: Vec<R>,
    a2: Vec<R>,
    c2: ConvCache<R>,
    z3: Vec<R>,
    c3: ConvCache<R>,
    ctx_rows: Vec<usize>,
    h: Vec<R>,
    attn: AttentionCache<R>,
}

struct DecoderCache<R> {
    cm: ConvCache<R>,
    z4: Vec<R>,
    cu1: ConvCache<R>,
    z5: Vec<R>,
    cu2: ConvCache<R>,
    z6: Vec<R>,
    co: ConvCache<R>,
}

/// Everything the full backward pass needs.
pub struct ForwardCache<R> {
    enc: EncoderCache<R>,
    dec: DecoderCache<R>,
}

fn add_channel_bias<R: Real>(z: &mut [R], bias: &[R], stride: usize, offset: usize, ch: usize, hw: usize) {
    let batch = bias.len() / stride;
    for b in 0..batch {
        for c in 0..ch {
            let v = bias[b * stride + offset + c];
            z[(b * ch + c) * hw..(b * ch + c + 1) * hw]
                .iter_mut()
                .for_each(|x| *x += v);
        }
    }
}

fn channel_bias_grad<R: Real>(dz: &[R], dbias: &mut [R], stride: usize, offset: usize, ch: usize, hw: usize) {
    let batch = dbias.len() / stride;
    for b in 0..batch {
        for c in 0..ch {
            dbias[b * stride + offset + c] += dz[(b * ch + c) * hw..(b * ch + c + 1) * hw]
                .iter()
                .copied()
                .sum::<R>();
        }
    }
}

/// Sinusoidal embedding of an integer timestep.
pub fn timestep_embedding<R: Real>(t: usize, dim: usize) -> Vec<R> {
    let half = dim / 2;
    let mut out = vec![R::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = R::from_f64_lossy(arg.sin());
        out[i + half] = R::from_f64_lossy(arg.cos());
    }
    out
}

impl<R: Real> Denoiser<R> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ch, c1, c2) = (config.channels, config.base_channels, config.mid_channels);
        let cd = config.context_dim;
        let conv_in = Conv2d::new(ch, c1, 3, 1, 1, &mut rng);
        let down1 = Conv2d::new(c1, c2, 3, 2, 1, &mut rng);
        let down2 = Conv2d::new(c2, c2, 3, 2, 1, &mut rng);
        let attn = CrossAttention::new(c2, cd, config.heads, &mut rng);
        let mid = Conv2d::new(c2, c2, 3, 1, 1, &mut rng);
        let up1 = Conv2d::new(2 * c2, c2, 3, 1, 1, &mut rng);
        let up2 = Conv2d::new(c2 + c1, c1, 3, 1, 1, &mut rng);
        let mut conv_out = Conv2d::new(c1, ch, 3, 1, 1, &mut rng);
        conv_out.weight.iter_mut().for_each(|w| *w *= R::from_f64_lossy(0.1));
        let time_mlp = Linear::new(config.time_dim, config.time_hidden, &mut rng);
        let time_proj = Linear::new(config.time_hidden, c1 + 3 * c2, &mut rng);
        let start_token = (0..cd)
            .map(|_| R::from_f64_lossy(rng.random_range(-1.0..1.0)))
            .collect();
        let concept_table = uniform_init((config.num_concepts + 1) * cd, 1, &mut rng);
        Ok(Self {
            config,
            conv_in,
            down1,
            down2,
            attn,
            mid,
            up1,
            up2,
            conv_out,
            time_mlp,
            time_proj,
            start_token,
            concept_table,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_grad();
        z
    }

    pub fn cast<S: Real>(&self) -> Denoiser<S> {
        Denoiser {
            config: self.config.clone(),
            conv_in: self.conv_in.cast(),
            down1: self.down1.cast(),
            down2: self.down2.cast(),
            attn: self.attn.cast(),
            mid: self.mid.cast(),
            up1: self.up1.cast(),
            up2: self.up2.cast(),
            conv_out: self.conv_out.cast(),
            time_mlp: self.time_mlp.cast(),
            time_proj: self.time_proj.cast(),
            start_token: cast_vec(&self.start_token),
            concept_table: cast_vec(&self.concept_table),
        }
    }

    /// Context token indices carrying concept `c`.
    pub fn concept_tokens(&self, c: ConceptId) -> Result<Vec<usize>> {
        self.check_condition(Condition::Concept(c))?;
        Ok(vec![CONCEPT_TOKEN])
    }

    fn check_condition(&self, cond: Condition) -> Result<()> {
        match cond {
            Condition::Concept(id) if id >= self.config.num_concepts => Err(Error::UnknownConcept {
                id,
                size: self.config.num_concepts,
            }),
            _ => Ok(()),
        }
    }

    fn check_input(&self, x: &Image<R>, t: usize) -> Result<()> {
        let s = self.config.image_size;
        if x.shape() != (self.config.channels, s, s) {
            return Err(Error::Shape(format!(
                "denoiser expects {}x{s}x{s}, got {:?}",
                self.config.channels,
                x.shape()
            )));
        }
        if t > self.config.max_timestep {
            return Err(Error::Timestep {
                t,
                min: 0,
                max: self.config.max_timestep,
            });
        }
        Ok(())
    }

    fn table_row(&self, cond: Condition) -> usize {
        match cond {
            Condition::Concept(c) => c,
            Condition::Null => self.config.num_concepts,
        }
    }

    fn encode(&self, x: &[R], ts: &[usize], conds: &[Condition]) -> EncoderCache<R> {
        let cfg = &self.config;
        let batch = ts.len();
        let (s, c1, c2) = (cfg.image_size, cfg.base_channels, cfg.mid_channels);
        let stride = c1 + 3 * c2;

        let temb: Vec<R> = ts
            .iter()
            .flat_map(|&t| timestep_embedding::<R>(t, cfg.time_dim))
            .collect();
        let time_pre = self.time_mlp.forward(&temb, batch);
        let time_hidden = silu(&time_pre);
        let tb = self.time_proj.forward(&time_hidden, batch);

        let (mut z1, cc1) = self.conv_in.forward(x, batch, s, s);
        add_channel_bias(&mut z1, &tb, stride, 0, c1, s * s);
        let a1 = silu(&z1);
        let (mut z2, cc2) = self.down1.forward(&a1, batch, s, s);
        let s2 = s / 2;
        add_channel_bias(&mut z2, &tb, stride, c1, c2, s2 * s2);
        let a2 = silu(&z2);
        let (mut z3, cc3) = self.down2.forward(&a2, batch, s2, s2);
        let s4 = s / 4;
        add_channel_bias(&mut z3, &tb, stride, c1 + c2, c2, s4 * s4);
        let a3 = silu(&z3);

        let cd = cfg.context_dim;
        let mut ctx = Vec::with_capacity(batch * CONTEXT_TOKENS * cd);
        let mut ctx_rows = Vec::with_capacity(batch);
        for &cond in conds {
            let row = self.table_row(cond);
            ctx.extend_from_slice(&self.start_token);
            ctx.extend_from_slice(&self.concept_table[row * cd..(row + 1) * cd]);
            ctx_rows.push(row);
        }
        let (h, attn) = self.attn.forward(&a3, &ctx, batch, s4 * s4);
        EncoderCache {
            batch,
            temb,
            time_pre,
            time_hidden,
            tb,
            z1,
            a1,
            c1: cc1,
            z2,
            a2,
            c2: cc2,
            z3,
            c3: cc3,
            ctx_rows,
            h,
            attn,
        }
    }

    fn decode(&self, enc: &EncoderCache<R>) -> (Vec<R>, DecoderCache<R>) {
        let cfg = &self.config;
        let batch = enc.batch;
        let (s, c1, c2) = (cfg.image_size, cfg.base_channels, cfg.mid_channels);
        let (s2, s4) = (s / 2, s / 4);
        let stride = c1 + 3 * c2;
        let tb = &enc.tb;

        let (z4, cm) = self.mid.forward(&enc.h, batch, s4, s4);
        let a4 = silu(&z4);
        let u1 = upsample2(&a4, batch * c2, s4, s4);
        let cat1 = concat_channels(&u1, c2, &enc.a2, c2, batch, s2 * s2);
        let (mut z5, cu1) = self.up1.forward(&cat1, batch, s2, s2);
        add_channel_bias(&mut z5, tb, stride, c1 + 2 * c2, c2, s2 * s2);
        let a5 = silu(&z5);
        let u2 = upsample2(&a5, batch * c2, s2, s2);
        let cat2 = concat_channels(&u2, c2, &enc.a1, c1, batch, s * s);
        let (z6, cu2) = self.up2.forward(&cat2, batch, s, s);
        let a6 = silu(&z6);
        let (out, co) = self.conv_out.forward(&a6, batch, s, s);
        (
            out,
            DecoderCache {
                cm,
                z4,
                cu1,
                z5,
                cu2,
                z6,
                co,
            },
        )
    }

    /// Batched forward on a flat `[batch][C][H][W]` buffer.
    pub fn forward_batch(&self, x: &[R], ts: &[usize], conds: &[Condition]) -> (Vec<R>, ForwardCache<R>) {
        assert_eq!(ts.len(), conds.len());
        let enc = self.encode(x, ts, conds);
        let (out, dec) = self.decode(&enc);
        (out, ForwardCache { enc, dec })
    }

    /// Head-averaged attention grid of batch item `b`.
    pub fn grid_of(&self, cache: &ForwardCache<R>, b: usize) -> AttentionGrid<R> {
        self.grid_from(&cache.enc, b)
    }

    fn grid_from(&self, enc: &EncoderCache<R>, b: usize) -> AttentionGrid<R> {
        AttentionGrid {
            resolution: self.config.attention_resolution(),
            tokens: CONTEXT_TOKENS,
            scores: enc.attn.grid(b, self.config.heads),
        }
    }

    /// Backward of an upstream gradient on the predicted noise. Accumulates
    /// parameter gradients into `grad`.
    pub fn backward_batch(&self, cache: &ForwardCache<R>, dout: &[R], grad: &mut Denoiser<R>) {
        let cfg = &self.config;
        let (enc, dec) = (&cache.enc, &cache.dec);
        let batch = enc.batch;
        let (s, c1, c2) = (cfg.image_size, cfg.base_channels, cfg.mid_channels);
        let (s2, s4) = (s / 2, s / 4);
        let stride = c1 + 3 * c2;
        let mut dtb = vec![R::zero(); batch * stride];

        let da6 = self
            .conv_out
            .backward(&dec.co, dout, Some(&mut grad.conv_out), true)
            .unwrap();
        let dz6 = silu_backward(&dec.z6, &da6);
        let dcat2 = self.up2.backward(&dec.cu2, &dz6, Some(&mut grad.up2), true).unwrap();
        let (du2, da1_skip) = split_channels(&dcat2, c2, c1, batch, s * s);
        let da5 = upsample2_backward(&du2, batch * c2, s2, s2);
        let dz5 = silu_backward(&dec.z5, &da5);
        channel_bias_grad(&dz5, &mut dtb, stride, c1 + 2 * c2, c2, s2 * s2);
        let dcat1 = self.up1.backward(&dec.cu1, &dz5, Some(&mut grad.up1), true).unwrap();
        let (du1, da2_skip) = split_channels(&dcat1, c2, c2, batch, s2 * s2);
        let da4 = upsample2_backward(&du1, batch * c2, s4, s4);
        let dz4 = silu_backward(&dec.z4, &da4);
        let dh = self.mid.backward(&dec.cm, &dz4, Some(&mut grad.mid), true).unwrap();

        let (da3, dctx) = self.attn.backward(&enc.attn, Some(&dh), None, Some(&mut grad.attn));
        self.context_backward(enc, &dctx, grad);

        let mut da2 = self.encoder_tail_backward(enc, &da3, &mut dtb, Some(&mut *grad));
        da2.iter_mut().zip(&da2_skip).for_each(|(a, b)| *a += *b);
        let dz2 = silu_backward(&enc.z2, &da2);
        channel_bias_grad(&dz2, &mut dtb, stride, c1, c2, s2 * s2);
        let mut da1 = self.down1.backward(&enc.c2, &dz2, Some(&mut grad.down1), true).unwrap();
        da1.iter_mut().zip(&da1_skip).for_each(|(a, b)| *a += *b);
        let dz1 = silu_backward(&enc.z1, &da1);
        channel_bias_grad(&dz1, &mut dtb, stride, 0, c1, s * s);
        self.conv_in.backward(&enc.c1, &dz1, Some(&mut grad.conv_in), false);

        let dth = self
            .time_proj
            .backward(&enc.time_hidden, &dtb, batch, Some(&mut grad.time_proj));
        let dtp = silu_backward(&enc.time_pre, &dth);
        self.time_mlp.backward(&enc.temb, &dtp, batch, Some(&mut grad.time_mlp));
    }

    /// From the gradient on `a3` back to `a2` (through `down2`).
    fn encoder_tail_backward(
        &self,
        enc: &EncoderCache<R>,
        da3: &[R],
        dtb: &mut [R],
        grad: Option<&mut Denoiser<R>>,
    ) -> Vec<R> {
        let cfg = &self.config;
        let (c1, c2, s4) = (cfg.base_channels, cfg.mid_channels, cfg.image_size / 4);
        let dz3 = silu_backward(&enc.z3, da3);
        channel_bias_grad(&dz3, dtb, c1 + 3 * c2, c1 + c2, c2, s4 * s4);
        self.down2
            .backward(&enc.c3, &dz3, grad.map(|g| &mut g.down2), true)
            .unwrap()
    }

    fn context_backward(&self, enc: &EncoderCache<R>, dctx: &[R], grad: &mut Denoiser<R>) {
        let cd = self.config.context_dim;
        for (b, &row) in enc.ctx_rows.iter().enumerate() {
            let base = b * CONTEXT_TOKENS * cd;
            for i in 0..cd {
                grad.start_token[i] += dctx[base + i];
                grad.concept_table[row * cd + i] += dctx[base + cd + i];
            }
        }
    }

    /// Predicts the noise in `x_t` and returns the attention grid.
    pub fn predict_noise(&self, x: &Image<R>, t: usize, cond: Condition) -> Result<(Image<R>, AttentionGrid<R>)> {
        let mut out = self.predict_many(&[x], &[t], &[cond])?;
        Ok(out.pop().expect("one prediction"))
    }

    /// Batched [`Self::predict_noise`].
    pub fn predict_many(
        &self,
        xs: &[&Image<R>],
        ts: &[usize],
        conds: &[Condition],
    ) -> Result<Vec<(Image<R>, AttentionGrid<R>)>> {
        if xs.len() != ts.len() || xs.len() != conds.len() {
            return Err(Error::Shape("batch inputs differ in length".into()));
        }
        for ((x, &t), &c) in xs.iter().zip(ts).zip(conds) {
            self.check_input(x, t)?;
            self.check_condition(c)?;
        }
        let flat: Vec<R> = xs.iter().flat_map(|x| x.data.iter().copied()).collect();
        let (out, cache) = self.forward_batch(&flat, ts, conds);
        let n = self.config.channels * self.config.image_size * self.config.image_size;
        Ok(out
            .chunks(n)
            .enumerate()
            .map(|(b, chunk)| {
                let img = Image {
                    data: chunk.to_vec(),
                    ..(*xs[b]).clone()
                };
                (img, self.grid_of(&cache, b))
            })
            .collect())
    }

    /// Classifier-free guidance: `eps_u + scale * (eps_c - eps_u)`, with the
    /// conditional branch's attention.
    pub fn cfg_predict(&self, x: &Image<R>, t: usize, c: ConceptId, guidance_scale: f64) -> Result<(Image<R>, AttentionGrid<R>)> {
        let mut out = self.cfg_predict_many(&[x], t, &[c], guidance_scale)?;
        Ok(out.pop().expect("one prediction"))
    }

    /// Guided predictions for several (image, concept) pairs at one timestep,
    /// evaluated as a single batch.
    pub fn cfg_predict_many(
        &self,
        xs: &[&Image<R>],
        t: usize,
        concepts: &[ConceptId],
        guidance_scale: f64,
    ) -> Result<Vec<(Image<R>, AttentionGrid<R>)>> {
        if !(guidance_scale >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "guidance scale must be >= 0, got {guidance_scale}"
            )));
        }
        if xs.len() != concepts.len() {
            return Err(Error::Shape("images and concepts differ in length".into()));
        }
        let n = xs.len();
        let inputs: Vec<&Image<R>> = xs.iter().chain(xs.iter()).copied().collect();
        let conds: Vec<Condition> = concepts
            .iter()
            .map(|&c| Condition::Concept(c))
            .chain(std::iter::repeat_n(Condition::Null, n))
            .collect();
        let mut preds = self.predict_many(&inputs, &vec![t; 2 * n], &conds)?;
        let uncond: Vec<_> = preds.split_off(n);
        let scale = R::from_f64_lossy(guidance_scale);
        Ok(preds
            .into_iter()
            .zip(uncond)
            .map(|((cond, grid), (unc, _))| {
                let data = unc
                    .data
                    .iter()
                    .zip(&cond.data)
                    .map(|(&u, &c)| u + scale * (c - u))
                    .collect();
                (Image { data, ..cond }, grid)
            })
            .collect())
    }

    /// Conditional attention grid for `x`, plus a probe that maps a gradient
    /// on the grid (`[p][l]`) back to a gradient on `x`.
    pub fn attention_with_input_grad(
        &self,
        x: &Image<R>,
        t: usize,
        c: ConceptId,
    ) -> Result<(AttentionGrid<R>, AttentionProbe<'_, R>)> {
        self.check_input(x, t)?;
        self.check_condition(Condition::Concept(c))?;
        let enc = self.encode(&x.data, &[t], &[Condition::Concept(c)]);
        let grid = self.grid_from(&enc, 0);
        Ok((
            grid,
            AttentionProbe {
                model: self,
                enc,
                shape: x.shape(),
            },
        ))
    }
}

/// A recorded encoder pass that can be differentiated from the attention
/// grid back to the input image.
pub struct AttentionProbe<'a, R> {
    model: &'a Denoiser<R>,
    enc: EncoderCache<R>,
    shape: (usize, usize, usize),
}

impl<R: Real> AttentionProbe<'_, R> {
    pub fn input_gradient(&self, dgrid: &[R]) -> Image<R> {
        let m = self.model;
        let cfg = &m.config;
        let enc = &self.enc;
        let (c1, c2, s) = (cfg.base_channels, cfg.mid_channels, cfg.image_size);
        let stride = c1 + 3 * c2;
        // Time-bias gradients are discarded; only dx is wanted.
        let mut dtb = vec![R::zero(); stride];
        let (da3, _) = m.attn.backward(&enc.attn, None, Some(dgrid), None);
        let da2 = m.encoder_tail_backward(enc, &da3, &mut dtb, None);
        let dz2 = silu_backward(&enc.z2, &da2);
        let da1 = m.down1.backward(&enc.c2, &dz2, None, true).unwrap();
        let dz1 = silu_backward(&enc.z1, &da1);
        let dx = m.conv_in.backward(&enc.c1, &dz1, None, true).unwrap();
        let (ch, h, w) = self.shape;
        debug_assert_eq!(dx.len(), ch * s * s);
        Image {
            channels: ch,
            height: h,
            width: w,
            data: dx,
        }
    }
}

pub const CHECKPOINT_KIND: &str = "denoiser";

impl Denoiser<f32> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(CHECKPOINT_KIND, &self.config, None, &self.params())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, values) = checkpoint::decode(bytes)?;
        if header.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a denoiser, found '{}'", header.kind)));
        }
        let config: DenoiserConfig = serde_json::from_value(header.config.clone())?;
        let mut model = Denoiser::new(config, 0)?;
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

impl<R: Real> Parameterized<R> for Denoiser<R> {
    fn params(&self) -> Vec<ParamRef<'_, R>> {
        let cd = self.config.context_dim;
        let mut out = Vec::new();
        out.extend(prefixed("conv_in", self.conv_in.params()));
        out.extend(prefixed("down1", self.down1.params()));
        out.extend(prefixed("down2", self.down2.params()));
        out.extend(prefixed("attn", self.attn.params()));
        out.extend(prefixed("mid", self.mid.params()));
        out.extend(prefixed("up1", self.up1.params()));
        out.extend(prefixed("up2", self.up2.params()));
        out.extend(prefixed("conv_out", self.conv_out.params()));
        out.extend(prefixed("time_mlp", self.time_mlp.params()));
        out.extend(prefixed("time_proj", self.time_proj.params()));
        out.push(ParamRef {
            name: "start_token".into(),
            shape: vec![cd],
            data: &self.start_token,
        });
        out.push(ParamRef {
            name: "concept_table".into(),
            shape: vec![self.config.num_concepts + 1, cd],
            data: &self.concept_table,
        });
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<R>> {
        let mut out = Vec::new();
        out.extend(self.conv_in.params_mut());
        out.extend(self.down1.params_mut());
        out.extend(self.down2.params_mut());
        out.extend(self.attn.params_mut());
        out.extend(self.mid.params_mut());
        out.extend(self.up1.params_mut());
        out.extend(self.up2.params_mut());
        out.extend(self.conv_out.params_mut());
        out.extend(self.time_mlp.params_mut());
        out.extend(self.time_proj.params_mut());
        out.push(&mut self.start_token);
        out.push(&mut self.concept_table);
        out
    }
}
