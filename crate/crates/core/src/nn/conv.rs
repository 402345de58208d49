use rand::Rng;

use super::{cast_vec, uniform_init, ParamRef, Parameterized};
use crate::real::{matmul, Real};

/// 2-D convolution with square kernels, lowered to GEMM through im2col.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<R> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out_ch x (in_ch * kernel * kernel)`
    pub weight: Vec<R>,
    pub bias: Vec<R>,
}

#[derive(Debug, Clone)]
pub struct ConvCache<R> {
    cols: Vec<R>,
    batch: usize,
    h_in: usize,
    w_in: usize,
}

impl<R: Real> Conv2d<R> {
    pub fn new<G: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut G,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            weight: uniform_init(out_ch * fan_in, fan_in, rng),
            bias: uniform_init(out_ch, fan_in, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: vec![R::zero(); self.weight.len()],
            bias: vec![R::zero(); self.bias.len()],
            ..*self
        }
    }

    pub fn cast<S: Real>(&self) -> Conv2d<S> {
        Conv2d {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            weight: cast_vec(&self.weight),
            bias: cast_vec(&self.bias),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[R], h: usize, w: usize, cols: &mut [R]) {
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        for c in 0..self.in_ch {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.iter_mut().for_each(|v| *v = R::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            *v = if ix < 0 || ix >= w as isize {
                                R::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[R], h: usize, w: usize, dx: &mut [R]) {
        let (ho, wo) = self.out_size(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        for c in 0..self.in_ch {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// `x` is `[batch][in_ch][h][w]`; returns `[batch][out_ch][ho][wo]`.
    pub fn forward(&self, x: &[R], batch: usize, h: usize, w: usize) -> (Vec<R>, ConvCache<R>) {
        assert_eq!(x.len(), batch * self.in_ch * h * w, "conv input shape");
        let (ho, wo) = self.out_size(h, w);
        let (kk, hw) = (self.patch_len(), ho * wo);
        let mut cols = vec![R::zero(); batch * kk * hw];
        let mut out = vec![R::zero(); batch * self.out_ch * hw];
        for b in 0..batch {
            let col = &mut cols[b * kk * hw..(b + 1) * kk * hw];
            self.im2col(&x[b * self.in_ch * h * w..(b + 1) * self.in_ch * h * w], h, w, col);
            let dst = &mut out[b * self.out_ch * hw..(b + 1) * self.out_ch * hw];
            for (o, chunk) in dst.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias[o]);
            }
            matmul(self.out_ch, kk, hw, &self.weight, false, col, false, dst, true);
        }
        let cache = ConvCache {
            cols,
            batch,
            h_in: h,
            w_in: w,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients into `grad` (if given) and returns the
    /// input gradient when `want_dx`.
    pub fn backward(
        &self,
        cache: &ConvCache<R>,
        dout: &[R],
        grad: Option<&mut Conv2d<R>>,
        want_dx: bool,
    ) -> Option<Vec<R>> {
        let (h, w, batch) = (cache.h_in, cache.w_in, cache.batch);
        let (ho, wo) = self.out_size(h, w);
        let (kk, hw) = (self.patch_len(), ho * wo);
        assert_eq!(dout.len(), batch * self.out_ch * hw, "conv grad shape");
        if let Some(g) = grad {
            for b in 0..batch {
                let d = &dout[b * self.out_ch * hw..(b + 1) * self.out_ch * hw];
                let col = &cache.cols[b * kk * hw..(b + 1) * kk * hw];
                matmul(self.out_ch, hw, kk, d, false, col, true, &mut g.weight, true);
                for (o, chunk) in d.chunks(hw).enumerate() {
                    g.bias[o] += chunk.iter().copied().sum::<R>();
                }
            }
        }
        if !want_dx {
            return None;
        }
        let mut dx = vec![R::zero(); batch * self.in_ch * h * w];
        let mut dcol = vec![R::zero(); kk * hw];
        for b in 0..batch {
            let d = &dout[b * self.out_ch * hw..(b + 1) * self.out_ch * hw];
            matmul(kk, self.out_ch, hw, &self.weight, true, d, false, &mut dcol, false);
            self.col2im(&dcol, h, w, &mut dx[b * self.in_ch * h * w..(b + 1) * self.in_ch * h * w]);
        }
        Some(dx)
    }
}

impl<R: Real> Parameterized<R> for Conv2d<R> {
    fn params(&self) -> Vec<ParamRef<'_, R>> {
        vec![
            ParamRef {
                name: "weight".into(),
                shape: vec![self.out_ch, self.in_ch, self.kernel, self.kernel],
                data: &self.weight,
            },
            ParamRef {
                name: "bias".into(),
                shape: vec![self.out_ch],
                data: &self.bias,
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<R>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
