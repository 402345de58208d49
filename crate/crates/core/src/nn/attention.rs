use rand::Rng;

use super::{cast_vec, softmax_in_place, uniform_init, ParamRef, Parameterized};
use crate::real::{matmul, Real};

/// Multi-head cross-attention from spatial queries to a short context of
/// token embeddings, with a residual connection.
///
/// Queries come from a `[dim][P]` feature map; keys and values from a
/// `[L][ctx_dim]` context. The head-averaged probabilities form the
/// `P x L` attention grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention<R> {
    pub dim: usize,
    pub ctx_dim: usize,
    pub heads: usize,
    pub wq: Vec<R>,
    pub wk: Vec<R>,
    pub wv: Vec<R>,
    pub wo: Vec<R>,
    pub bo: Vec<R>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<R> {
    batch: usize,
    positions: usize,
    tokens: usize,
    x: Vec<R>,
    ctx: Vec<R>,
    q: Vec<R>,
    k: Vec<R>,
    v: Vec<R>,
    /// `[batch][heads][P][L]`
    probs: Vec<R>,
    o: Vec<R>,
}

impl<R: Real> AttentionCache<R> {
    /// Head-averaged attention for batch item `b`, `P x L` row-major.
    pub fn grid(&self, b: usize, heads: usize) -> Vec<R> {
        let (p, l) = (self.positions, self.tokens);
        let mut out = vec![R::zero(); p * l];
        let inv = R::one() / R::from_usize(heads).unwrap();
        for h in 0..heads {
            let base = ((b * heads) + h) * p * l;
            for (o, &v) in out.iter_mut().zip(&self.probs[base..base + p * l]) {
                *o += v * inv;
            }
        }
        out
    }
}

impl<R: Real> CrossAttention<R> {
    pub fn new<G: Rng + ?Sized>(dim: usize, ctx_dim: usize, heads: usize, rng: &mut G) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must split evenly over heads");
        Self {
            dim,
            ctx_dim,
            heads,
            wq: uniform_init(dim * dim, dim, rng),
            wk: uniform_init(dim * ctx_dim, ctx_dim, rng),
            wv: uniform_init(dim * ctx_dim, ctx_dim, rng),
            wo: uniform_init(dim * dim, dim, rng),
            bo: uniform_init(dim, dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<R>| vec![R::zero(); v.len()];
        Self {
            dim: self.dim,
            ctx_dim: self.ctx_dim,
            heads: self.heads,
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            bo: z(&self.bo),
        }
    }

    pub fn cast<S: Real>(&self) -> CrossAttention<S> {
        CrossAttention {
            dim: self.dim,
            ctx_dim: self.ctx_dim,
            heads: self.heads,
            wq: cast_vec(&self.wq),
            wk: cast_vec(&self.wk),
            wv: cast_vec(&self.wv),
            wo: cast_vec(&self.wo),
            bo: cast_vec(&self.bo),
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn scale(&self) -> R {
        R::one() / R::from_usize(self.head_dim()).unwrap().sqrt()
    }

    /// `x` is `[batch][dim][P]`, `ctx` is `[batch][L][ctx_dim]`.
    pub fn forward(&self, x: &[R], ctx: &[R], batch: usize, positions: usize) -> (Vec<R>, AttentionCache<R>) {
        let (d, p, hd, nh) = (self.dim, positions, self.head_dim(), self.heads);
        assert_eq!(x.len(), batch * d * p, "attention query shape");
        assert_eq!(ctx.len() % (batch * self.ctx_dim), 0, "attention context shape");
        let l = ctx.len() / (batch * self.ctx_dim);
        let scale = self.scale();

        let mut q = vec![R::zero(); batch * p * d];
        let mut k = vec![R::zero(); batch * l * d];
        let mut v = vec![R::zero(); batch * l * d];
        let mut probs = vec![R::zero(); batch * nh * p * l];
        let mut o = vec![R::zero(); batch * p * d];
        let mut out = x.to_vec();
        let mut y = vec![R::zero(); p * d];

        for b in 0..batch {
            let xb = &x[b * d * p..(b + 1) * d * p];
            let cb = &ctx[b * l * self.ctx_dim..(b + 1) * l * self.ctx_dim];
            let qb = &mut q[b * p * d..(b + 1) * p * d];
            matmul(p, d, d, xb, true, &self.wq, true, qb, false);
            let kb = &mut k[b * l * d..(b + 1) * l * d];
            matmul(l, self.ctx_dim, d, cb, false, &self.wk, true, kb, false);
            let vb = &mut v[b * l * d..(b + 1) * l * d];
            matmul(l, self.ctx_dim, d, cb, false, &self.wv, true, vb, false);
            let qb = &q[b * p * d..(b + 1) * p * d];
            let kb = &k[b * l * d..(b + 1) * l * d];
            let vb = &v[b * l * d..(b + 1) * l * d];
            let ob = &mut o[b * p * d..(b + 1) * p * d];

            for h in 0..nh {
                let pr = &mut probs[((b * nh) + h) * p * l..((b * nh) + h + 1) * p * l];
                for i in 0..p {
                    let row = &mut pr[i * l..(i + 1) * l];
                    for (j, s) in row.iter_mut().enumerate() {
                        let mut acc = R::zero();
                        for c in h * hd..(h + 1) * hd {
                            acc += qb[i * d + c] * kb[j * d + c];
                        }
                        *s = acc * scale;
                    }
                    softmax_in_place(row);
                    for c in h * hd..(h + 1) * hd {
                        let mut acc = R::zero();
                        for j in 0..l {
                            acc += row[j] * vb[j * d + c];
                        }
                        ob[i * d + c] = acc;
                    }
                }
            }

            for row in y.chunks_mut(d) {
                row.copy_from_slice(&self.bo);
            }
            matmul(p, d, d, ob, false, &self.wo, true, &mut y, true);
            let outb = &mut out[b * d * p..(b + 1) * d * p];
            for c in 0..d {
                for i in 0..p {
                    outb[c * p + i] += y[i * d + c];
                }
            }
        }

        let cache = AttentionCache {
            batch,
            positions: p,
            tokens: l,
            x: x.to_vec(),
            ctx: ctx.to_vec(),
            q,
            k,
            v,
            probs,
            o,
        };
        (out, cache)
    }

    /// Backward pass. `dout` is the gradient of the residual output
    /// (`[batch][dim][P]`), `dgrid` an extra gradient on the head-averaged
    /// grids (`[batch][P][L]`). Returns `(dx, dctx)`.
    pub fn backward(
        &self,
        cache: &AttentionCache<R>,
        dout: Option<&[R]>,
        dgrid: Option<&[R]>,
        mut grad: Option<&mut CrossAttention<R>>,
    ) -> (Vec<R>, Vec<R>) {
        let (d, nh, hd) = (self.dim, self.heads, self.head_dim());
        let (batch, p, l, cd) = (cache.batch, cache.positions, cache.tokens, self.ctx_dim);
        let scale = self.scale();
        let inv_heads = R::one() / R::from_usize(nh).unwrap();

        let mut dx = match dout {
            Some(g) => g.to_vec(),
            None => vec![R::zero(); batch * d * p],
        };
        let mut dctx = vec![R::zero(); batch * l * cd];
        let mut dy = vec![R::zero(); p * d];
        let mut d_o = vec![R::zero(); p * d];
        let mut dq = vec![R::zero(); p * d];
        let mut dk = vec![R::zero(); l * d];
        let mut dv = vec![R::zero(); l * d];
        let mut dxt = vec![R::zero(); p * d];
        let mut dprob = vec![R::zero(); l];

        for b in 0..batch {
            let xb = &cache.x[b * d * p..(b + 1) * d * p];
            let cb = &cache.ctx[b * l * cd..(b + 1) * l * cd];
            let qb = &cache.q[b * p * d..(b + 1) * p * d];
            let kb = &cache.k[b * l * d..(b + 1) * l * d];
            let vb = &cache.v[b * l * d..(b + 1) * l * d];
            let ob = &cache.o[b * p * d..(b + 1) * p * d];

            d_o.iter_mut().for_each(|v| *v = R::zero());
            if let Some(g) = dout {
                let gb = &g[b * d * p..(b + 1) * d * p];
                for c in 0..d {
                    for i in 0..p {
                        dy[i * d + c] = gb[c * p + i];
                    }
                }
                if let Some(gr) = grad.as_deref_mut() {
                    matmul(d, p, d, &dy, true, ob, false, &mut gr.wo, true);
                    for row in dy.chunks(d) {
                        for (gb, &v) in gr.bo.iter_mut().zip(row) {
                            *gb += v;
                        }
                    }
                }
                matmul(p, d, d, &dy, false, &self.wo, false, &mut d_o, false);
            }

            dq.iter_mut().for_each(|v| *v = R::zero());
            dk.iter_mut().for_each(|v| *v = R::zero());
            dv.iter_mut().for_each(|v| *v = R::zero());
            for h in 0..nh {
                let pr = &cache.probs[((b * nh) + h) * p * l..((b * nh) + h + 1) * p * l];
                for i in 0..p {
                    let row = &pr[i * l..(i + 1) * l];
                    for j in 0..l {
                        let mut acc = R::zero();
                        for c in h * hd..(h + 1) * hd {
                            acc += d_o[i * d + c] * vb[j * d + c];
                            dv[j * d + c] += row[j] * d_o[i * d + c];
                        }
                        if let Some(gg) = dgrid {
                            acc += gg[(b * p + i) * l + j] * inv_heads;
                        }
                        dprob[j] = acc;
                    }
                    let dot: R = row.iter().zip(&dprob).map(|(&a, &g)| a * g).sum();
                    for j in 0..l {
                        let ds = row[j] * (dprob[j] - dot) * scale;
                        for c in h * hd..(h + 1) * hd {
                            dq[i * d + c] += ds * kb[j * d + c];
                            dk[j * d + c] += ds * qb[i * d + c];
                        }
                    }
                }
            }

            if let Some(gr) = grad.as_deref_mut() {
                matmul(d, p, d, &dq, true, xb, true, &mut gr.wq, true);
                matmul(d, l, cd, &dk, true, cb, false, &mut gr.wk, true);
                matmul(d, l, cd, &dv, true, cb, false, &mut gr.wv, true);
            }
            matmul(p, d, d, &dq, false, &self.wq, false, &mut dxt, false);
            let dxb = &mut dx[b * d * p..(b + 1) * d * p];
            for c in 0..d {
                for i in 0..p {
                    dxb[c * p + i] += dxt[i * d + c];
                }
            }
            let dcb = &mut dctx[b * l * cd..(b + 1) * l * cd];
            matmul(l, d, cd, &dk, false, &self.wk, false, dcb, false);
            matmul(l, d, cd, &dv, false, &self.wv, false, dcb, true);
        }
        (dx, dctx)
    }
}

impl<R: Real> Parameterized<R> for CrossAttention<R> {
    fn params(&self) -> Vec<ParamRef<'_, R>> {
        let (d, cd) = (self.dim, self.ctx_dim);
        vec![
            ParamRef { name: "wq".into(), shape: vec![d, d], data: &self.wq },
            ParamRef { name: "wk".into(), shape: vec![d, cd], data: &self.wk },
            ParamRef { name: "wv".into(), shape: vec![d, cd], data: &self.wv },
            ParamRef { name: "wo".into(), shape: vec![d, d], data: &self.wo },
            ParamRef { name: "bo".into(), shape: vec![d], data: &self.bo },
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<R>> {
        vec![&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.bo]
    }
}
