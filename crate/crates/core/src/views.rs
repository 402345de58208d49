//! Orthogonal pixel permutations under which anagram views are defined.
//!
//! Every transform is a member of the dihedral group of the square. A view
//! `v` maps the canonical frame to the view frame; `invert(v)` maps back.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoiser::AttentionGrid;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewTransform {
    Identity,
    #[serde(rename = "flip_v")]
    FlipVertical,
    #[serde(rename = "flip_h")]
    FlipHorizontal,
    #[serde(rename = "rot90cw")]
    Rot90Cw,
    #[serde(rename = "rot90ccw")]
    Rot90Ccw,
    #[serde(rename = "rot180")]
    Rot180,
    /// Reflection across the main diagonal. Needed for closure: a vertical
    /// flip composed with a quarter turn lands here.
    Transpose,
    /// Reflection across the anti-diagonal.
    AntiTranspose,
}

/// Integer matrix acting on centred pixel coordinates `(u, v)` with `v`
/// pointing down: a pixel at `p` in the input lands at `M p` in the output.
type Mat2 = [[i64; 2]; 2];

impl ViewTransform {
    pub const ALL: [ViewTransform; 8] = [
        ViewTransform::Identity,
        ViewTransform::FlipVertical,
        ViewTransform::FlipHorizontal,
        ViewTransform::Rot90Cw,
        ViewTransform::Rot90Ccw,
        ViewTransform::Rot180,
        ViewTransform::Transpose,
        ViewTransform::AntiTranspose,
    ];

    /// The six views exposed for anagram prompts.
    pub const PRIMARY: [ViewTransform; 6] = [
        ViewTransform::Identity,
        ViewTransform::FlipVertical,
        ViewTransform::FlipHorizontal,
        ViewTransform::Rot90Cw,
        ViewTransform::Rot90Ccw,
        ViewTransform::Rot180,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ViewTransform::Identity => "identity",
            ViewTransform::FlipVertical => "flip_v",
            ViewTransform::FlipHorizontal => "flip_h",
            ViewTransform::Rot90Cw => "rot90cw",
            ViewTransform::Rot90Ccw => "rot90ccw",
            ViewTransform::Rot180 => "rot180",
            ViewTransform::Transpose => "transpose",
            ViewTransform::AntiTranspose => "anti_transpose",
        }
    }

    fn matrix(self) -> Mat2 {
        match self {
            ViewTransform::Identity => [[1, 0], [0, 1]],
            ViewTransform::FlipVertical => [[1, 0], [0, -1]],
            ViewTransform::FlipHorizontal => [[-1, 0], [0, 1]],
            ViewTransform::Rot90Cw => [[0, -1], [1, 0]],
            ViewTransform::Rot90Ccw => [[0, 1], [-1, 0]],
            ViewTransform::Rot180 => [[-1, 0], [0, -1]],
            ViewTransform::Transpose => [[0, 1], [1, 0]],
            ViewTransform::AntiTranspose => [[0, -1], [-1, 0]],
        }
    }

    fn from_matrix(m: Mat2) -> Self {
        *Self::ALL
            .iter()
            .find(|v| v.matrix() == m)
            .expect("dihedral group is closed")
    }

    /// Swaps the two spatial axes (rotations and diagonal reflections).
    pub fn swaps_axes(self) -> bool {
        self.matrix()[0][0] == 0
    }

    pub fn invert(self) -> Self {
        // Orthogonal: the inverse is the transpose.
        let m = self.matrix();
        Self::from_matrix([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
    }

    /// `compose(a, b)` applies `b` first, then `a`.
    pub fn compose(self, b: ViewTransform) -> Self {
        let (x, y) = (self.matrix(), b.matrix());
        let mut m = [[0; 2]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = x[i][0] * y[0][j] + x[i][1] * y[1][j];
            }
        }
        Self::from_matrix(m)
    }

    /// Source index table: `out[i] = in[table[i]]` on an `h x w` plane.
    fn source_table(self, height: usize, width: usize) -> Result<Vec<usize>> {
        if self.swaps_axes() && height != width {
            return Err(Error::Shape(format!(
                "view {} needs a square grid, got {height}x{width}",
                self.name()
            )));
        }
        let inv = self.invert().matrix();
        let (h, w) = (height as i64, width as i64);
        let mut table = Vec::with_capacity(height * width);
        for y in 0..h {
            for x in 0..w {
                // Doubled centred coordinates keep half-pixel centres integral.
                let (u, v) = (2 * x - (w - 1), 2 * y - (h - 1));
                let su = inv[0][0] * u + inv[0][1] * v;
                let sv = inv[1][0] * u + inv[1][1] * v;
                let sx = (su + (w - 1)) / 2;
                let sy = (sv + (h - 1)) / 2;
                table.push((sy * w + sx) as usize);
            }
        }
        Ok(table)
    }

    /// Permutes every channel plane of `x`.
    pub fn apply<R: Real>(self, x: &Image<R>) -> Result<Image<R>> {
        if self == ViewTransform::Identity {
            return Ok(x.clone());
        }
        let table = self.source_table(x.height, x.width)?;
        let plane = x.height * x.width;
        let mut data = Vec::with_capacity(x.data.len());
        for c in 0..x.channels {
            let src = &x.data[c * plane..(c + 1) * plane];
            data.extend(table.iter().map(|&i| src[i]));
        }
        Ok(Image {
            channels: x.channels,
            height: x.height,
            width: x.width,
            data,
        })
    }

    /// Same permutation on the spatial axes of an attention grid; the token
    /// axis is untouched.
    pub fn apply_to_grid<R: Real>(self, grid: &AttentionGrid<R>) -> Result<AttentionGrid<R>> {
        if self == ViewTransform::Identity {
            return Ok(grid.clone());
        }
        let r = grid.resolution;
        let table = self.source_table(r, r)?;
        let l = grid.tokens;
        let mut scores = Vec::with_capacity(grid.scores.len());
        for &src in &table {
            scores.extend_from_slice(&grid.scores[src * l..(src + 1) * l]);
        }
        Ok(AttentionGrid {
            resolution: r,
            tokens: l,
            scores,
        })
    }

    /// Permutes a single `size x size` plane stored row-major.
    pub fn apply_to_plane<T: Copy>(self, size: usize, plane: &[T]) -> Result<Vec<T>> {
        if plane.len() != size * size {
            return Err(Error::Shape(format!(
                "plane of {} values is not {size}x{size}",
                plane.len()
            )));
        }
        let table = self.source_table(size, size)?;
        Ok(table.iter().map(|&i| plane[i]).collect())
    }
}

impl fmt::Display for ViewTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ViewTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown view '{s}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid2() -> Image<f32> {
        Image::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn rot90cw_on_two_by_two() {
        let out = ViewTransform::Rot90Cw.apply(&grid2()).unwrap();
        assert_eq!(out.data, vec![3.0, 1.0, 4.0, 2.0]);
    }

    #[test]
    fn flips_on_two_by_two() {
        let v = ViewTransform::FlipVertical.apply(&grid2()).unwrap();
        assert_eq!(v.data, vec![3.0, 4.0, 1.0, 2.0]);
        let h = ViewTransform::FlipHorizontal.apply(&grid2()).unwrap();
        assert_eq!(h.data, vec![2.0, 1.0, 4.0, 3.0]);
        let t = ViewTransform::Transpose.apply(&grid2()).unwrap();
        assert_eq!(t.data, vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn named_inverses_and_compositions() {
        use ViewTransform::*;
        assert_eq!(Rot90Cw.invert(), Rot90Ccw);
        assert_eq!(FlipVertical.invert(), FlipVertical);
        assert_eq!(Identity.invert(), Identity);
        assert_eq!(Rot90Cw.compose(Rot90Cw), Rot180);
        assert_eq!(FlipVertical.compose(FlipVertical), Identity);
        assert_eq!(Rot90Cw.compose(Rot90Ccw), Identity);
        assert_eq!(FlipVertical.compose(FlipHorizontal), Rot180);
    }

    #[test]
    fn rotation_of_non_square_is_rejected() {
        let x = Image::<f32>::zeros(1, 2, 3);
        assert!(matches!(
            ViewTransform::Rot90Cw.apply(&x),
            Err(Error::Shape(_))
        ));
        assert!(ViewTransform::FlipVertical.apply(&x).is_ok());
        assert!(ViewTransform::Rot180.apply(&x).is_ok());
    }

    #[test]
    fn names_round_trip() {
        for v in ViewTransform::ALL {
            assert_eq!(v.name().parse::<ViewTransform>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("flip".parse::<ViewTransform>().is_err());
    }

    #[test]
    fn grid_round_trip_preserves_token_axis() {
        let grid = AttentionGrid {
            resolution: 3,
            tokens: 2,
            scores: (0..18).map(|i| i as f32).collect(),
        };
        for v in ViewTransform::ALL {
            let there = v.apply_to_grid(&v.invert().apply_to_grid(&grid).unwrap()).unwrap();
            assert_eq!(there, grid);
            let moved = v.apply_to_grid(&grid).unwrap();
            let sum: f32 = moved.scores.iter().sum();
            assert_eq!(sum, grid.scores.iter().sum::<f32>());
            // Token pairs move together.
            for p in 0..9 {
                assert_eq!(moved.scores[2 * p + 1] - moved.scores[2 * p], 1.0);
            }
        }
    }

    fn view() -> impl Strategy<Value = ViewTransform> {
        prop::sample::select(ViewTransform::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn apply_is_a_norm_preserving_permutation(
            v in view(),
            c in 1usize..3,
            n in 1usize..7,
            seed in any::<u64>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Image::<f32>::standard_normal(c, n, n, &mut rng);
            let y = v.apply(&x).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
            let mut a = x.data.clone();
            let mut b = y.data.clone();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            // Same multiset, so a fixed summation order gives the same norm bit for bit.
            let norm = |v: &[f32]| v.iter().map(|&e| (e as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert_eq!(norm(&a), norm(&b));
            prop_assert!((y.l2_norm() - x.l2_norm()).abs() <= 1e-12 * x.l2_norm().max(1.0));
            prop_assert_eq!(a, b);
            prop_assert_eq!(v.invert().apply(&y).unwrap(), x);
        }

        #[test]
        fn compose_agrees_with_sequential_application(a in view(), b in view(), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Image::<f32>::standard_normal(1, 5, 5, &mut rng);
            let lhs = a.compose(b).apply(&x).unwrap();
            let rhs = a.apply(&b.apply(&x).unwrap()).unwrap();
            prop_assert_eq!(lhs, rhs);
        }
    }
}
