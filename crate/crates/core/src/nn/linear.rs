use rand::Rng;

use super::{cast_vec, uniform_init, ParamRef, Parameterized};
use crate::real::{matmul, Real};

/// Dense layer `y = x W^T + b` on row-major `[batch][features]` buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<R> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`
    pub weight: Vec<R>,
    pub bias: Vec<R>,
}

impl<R: Real> Linear<R> {
    pub fn new<G: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut G) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: uniform_init(in_dim * out_dim, in_dim, rng),
            bias: uniform_init(out_dim, in_dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: vec![R::zero(); self.weight.len()],
            bias: vec![R::zero(); self.bias.len()],
        }
    }

    pub fn cast<S: Real>(&self) -> Linear<S> {
        Linear {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }

    pub fn forward(&self, x: &[R], batch: usize) -> Vec<R> {
        assert_eq!(x.len(), batch * self.in_dim, "linear input shape");
        let mut y: Vec<R> = (0..batch).flat_map(|_| self.bias.iter().copied()).collect();
        matmul(batch, self.in_dim, self.out_dim, x, false, &self.weight, true, &mut y, true);
        y
    }

    /// Returns `dx`; accumulates into `grad` when given.
    pub fn backward(&self, x: &[R], dy: &[R], batch: usize, grad: Option<&mut Linear<R>>) -> Vec<R> {
        if let Some(g) = grad {
            matmul(self.out_dim, batch, self.in_dim, dy, true, x, false, &mut g.weight, true);
            for row in dy.chunks(self.out_dim) {
                for (gb, &d) in g.bias.iter_mut().zip(row) {
                    *gb += d;
                }
            }
        }
        let mut dx = vec![R::zero(); batch * self.in_dim];
        matmul(batch, self.out_dim, self.in_dim, dy, false, &self.weight, false, &mut dx, false);
        dx
    }
}

impl<R: Real> Parameterized<R> for Linear<R> {
    fn params(&self) -> Vec<ParamRef<'_, R>> {
        vec![
            ParamRef {
                name: "weight".into(),
                shape: vec![self.out_dim, self.in_dim],
                data: &self.weight,
            },
            ParamRef {
                name: "bias".into(),
                shape: vec![self.out_dim],
                data: &self.bias,
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<R>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
