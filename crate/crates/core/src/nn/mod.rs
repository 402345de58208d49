//! Minimal layer library with hand-written reverse-mode gradients.
//!
//! Activations are batch-major, channel-major buffers (`[b][c][h][w]`).
//! Every layer returns a cache from `forward` that its `backward` consumes.

mod act;
mod attention;
mod conv;
mod linear;
mod optim;

pub use act::{concat_channels, silu, silu_backward, split_channels, upsample2, upsample2_backward};
pub use attention::{AttentionCache, CrossAttention};
pub use conv::{Conv2d, ConvCache};
pub use linear::Linear;
pub use optim::{clip_grad_norm, Adam, AdamConfig, Ema};

use rand::Rng;

use crate::real::Real;

/// Borrowed view of one parameter tensor.
#[derive(Debug)]
pub struct ParamRef<'a, R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [R],
}

/// Models expose their tensors in a fixed declaration order; checkpoints,
/// optimizers and casts all walk this order.
pub trait Parameterized<R: Real> {
    fn params(&self) -> Vec<ParamRef<'_, R>>;
    fn params_mut(&mut self) -> Vec<&mut Vec<R>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.iter_mut().for_each(|v| *v = R::zero());
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Flat copy of every parameter in declaration order.
    fn flatten(&self) -> Vec<R> {
        self.params()
            .iter()
            .flat_map(|p| p.data.iter().copied())
            .collect()
    }

    fn load_flat(&mut self, flat: &[R]) {
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "parameter count mismatch");
    }
}

pub(crate) fn prefixed<'a, R>(prefix: &str, inner: Vec<ParamRef<'a, R>>) -> Vec<ParamRef<'a, R>> {
    inner
        .into_iter()
        .map(|p| ParamRef {
            name: format!("{prefix}.{}", p.name),
            ..p
        })
        .collect()
}

/// PyTorch-style default initialisation: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn uniform_init<R: Real, G: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut G) -> Vec<R> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n)
        .map(|_| R::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect()
}

pub(crate) fn cast_vec<R: Real, S: Real>(v: &[R]) -> Vec<S> {
    v.iter().map(|x| S::from_f64_lossy(x.as_f64())).collect()
}

/// Numerically stable in-place softmax over a row.
pub(crate) fn softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().fold(R::neg_infinity(), |m, &v| m.max(v));
    let mut sum = R::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
