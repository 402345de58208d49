use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// A `C x H x W` grid of reals in channel-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image<R = f32> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<R>,
}

/// Clean images and noisy intermediates `x_t`.
pub type ImageTensor = Image<f32>;
/// A per-view noise prediction; same layout as the image it belongs to.
pub type NoiseVector = Image<f32>;

impl<R: Real> Image<R> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![R::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn standard_normal<G: Rng + ?Sized>(
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut G,
    ) -> Self
    where
        StandardNormal: rand_distr::Distribution<R>,
    {
        let data = (0..channels * height * width)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<S: Real>(&self) -> Image<S> {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|v| S::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> R {
        self.data.iter().fold(R::zero(), |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum()
    }

    /// Sample mean and (population) variance, accumulated in `f64`.
    pub fn mean_var(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        (mean, var)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Image::<f32>::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(Image::<f32>::from_vec(1, 2, 2, vec![0.0; 4]).is_ok());
    }

    #[test]
    fn cast_round_trips_f32_through_f64() {
        let img = Image::<f32>::from_vec(1, 1, 3, vec![0.1, -2.5, 1e-7]).unwrap();
        assert_eq!(img.cast::<f64>().cast::<f32>(), img);
    }
}
