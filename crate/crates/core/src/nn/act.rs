use crate::real::Real;

fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

pub fn silu<R: Real>(x: &[R]) -> Vec<R> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient of SiLU given its *input* `x`.
pub fn silu_backward<R: Real>(x: &[R], dy: &[R]) -> Vec<R> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (R::one() + v * (R::one() - s))
        })
        .collect()
}

/// Nearest-neighbour 2x upsampling of `[b][c][h][w]`.
pub fn upsample2<R: Real>(x: &[R], planes: usize, h: usize, w: usize) -> Vec<R> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![R::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<R: Real>(dy: &[R], planes: usize, h: usize, w: usize) -> Vec<R> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![R::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    dx
}

/// Concatenates `[b][ca][hw]` and `[b][cb][hw]` along channels.
pub fn concat_channels<R: Real>(a: &[R], ca: usize, b: &[R], cb: usize, batch: usize, hw: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(batch * (ca + cb) * hw);
    for i in 0..batch {
        out.extend_from_slice(&a[i * ca * hw..(i + 1) * ca * hw]);
        out.extend_from_slice(&b[i * cb * hw..(i + 1) * cb * hw]);
    }
    out
}

/// Inverse of [`concat_channels`].
pub fn split_channels<R: Real>(x: &[R], ca: usize, cb: usize, batch: usize, hw: usize) -> (Vec<R>, Vec<R>) {
    let mut a = Vec::with_capacity(batch * ca * hw);
    let mut b = Vec::with_capacity(batch * cb * hw);
    let stride = (ca + cb) * hw;
    for i in 0..batch {
        let item = &x[i * stride..(i + 1) * stride];
        a.extend_from_slice(&item[..ca * hw]);
        b.extend_from_slice(&item[ca * hw..]);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::*;

    #[test]
    fn silu_gradient_matches_finite_differences() {
        let x: Vec<f64> = (0..9).map(|i| i as f64 - 4.3).collect();
        let w = probe_weights(9, 0.1);
        let analytic = silu_backward(&x, &w);
        let numeric = central_diff(
            &mut |x| silu(x).iter().zip(&w).map(|(a, b)| a * b).sum(),
            &x,
            1e-6,
        );
        assert!(rel_error(&analytic, &numeric) < 1e-7);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x: Vec<f64> = (0..2 * 3 * 2).map(|i| i as f64 * 0.5).collect();
        let dy: Vec<f64> = (0..2 * 6 * 4).map(|i| (i as f64).cos()).collect();
        let up = upsample2(&x, 2, 3, 2);
        let lhs: f64 = up.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let dx = upsample2_backward(&dy, 2, 3, 2);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let a: Vec<f32> = (0..2 * 2 * 3).map(|i| i as f32).collect();
        let b: Vec<f32> = (0..2 * 3).map(|i| -(i as f32)).collect();
        let cat = concat_channels(&a, 2, &b, 1, 2, 3);
        assert_eq!(&cat[..6], &a[..6]);
        let (a2, b2) = split_channels(&cat, 2, 1, 2, 3);
        assert_eq!((a2, b2), (a, b));
    }
}
