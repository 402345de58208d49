//! Combining per-view noise predictions: completion-score weighting and
//! variance rectification of the weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::scorer::CompletionScore;
use crate::tensor::Image;
use crate::views::ViewTransform;

/// Scores below this are raised to it before the negative power.
pub const SCORE_FLOOR: f64 = 0.05;
/// Lower bound on the variance radicand before the square root.
pub const RADICAND_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub alpha: Vec<f64>,
}

impl WeightVector {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("weight vector needs at least one entry".into()));
        }
        Ok(Self {
            alpha: vec![1.0 / n as f64; n],
        })
    }

    /// Normalises nonnegative raw weights to sum to one.
    pub fn normalised(raw: Vec<f64>) -> Result<Self> {
        let total: f64 = raw.iter().sum();
        if raw.is_empty() || raw.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || !(total > 0.0) {
            return Err(Error::InvalidArgument(format!("cannot normalise weights {raw:?}")));
        }
        Ok(Self {
            alpha: raw.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// Exponent applied to the scores at step `t` of `total`: `-2 + t / total`.
pub fn weight_exponent(t: usize, total: usize) -> f64 {
    -2.0 + t as f64 / total as f64
}

/// `alpha_i ∝ max(CS_i, floor)^(-2 + t/T)`: views that lag behind get more
/// weight, strongly near the end of sampling and less so early on.
pub fn completion_weights(scores: &[CompletionScore], t: usize, total: usize) -> Result<WeightVector> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no completion scores".into()));
    }
    if total == 0 || t > total {
        return Err(Error::Timestep { t, min: 0, max: total });
    }
    let p = weight_exponent(t, total);
    WeightVector::normalised(scores.iter().map(|s| s.value.max(SCORE_FLOOR).powf(p)).collect())
}

fn check_views<R: Real>(eps: &[Image<R>], views: &[ViewTransform]) -> Result<()> {
    if eps.is_empty() || eps.len() != views.len() {
        return Err(Error::Shape(format!("{} noise vectors for {} views", eps.len(), views.len())));
    }
    for e in &eps[1..] {
        eps[0].ensure_same_shape(e, "noise vectors")?;
    }
    Ok(())
}

/// Back-transforms every prediction into the canonical frame.
pub fn canonical_noises<R: Real>(eps: &[Image<R>], views: &[ViewTransform]) -> Result<Vec<Image<R>>> {
    check_views(eps, views)?;
    eps.iter().zip(views).map(|(e, v)| v.invert().apply(e)).collect()
}

/// `sum_i alpha_i * invert(v_i)(eps_i)`.
pub fn combine_noise<R: Real>(eps: &[Image<R>], views: &[ViewTransform], alpha: &WeightVector) -> Result<Image<R>> {
    check_views(eps, views)?;
    if alpha.len() != eps.len() {
        return Err(Error::Shape(format!("{} weights for {} noise vectors", alpha.len(), eps.len())));
    }
    combine_canonical(&canonical_noises(eps, views)?, alpha)
}

pub(crate) fn combine_canonical<R: Real>(canonical: &[Image<R>], alpha: &WeightVector) -> Result<Image<R>> {
    let (c, h, w) = canonical[0].shape();
    let mut out = Image::<R>::zeros(c, h, w);
    for (e, &a) in canonical.iter().zip(&alpha.alpha) {
        let a = R::from_f64_lossy(a);
        for (o, &v) in out.data.iter_mut().zip(&e.data) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// Symmetric `N x N` matrix with unit diagonal, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    pub n: usize,
    pub rho: Vec<f64>,
}

impl CorrelationEstimate {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rho[i * self.n + j]
    }

    /// From prescribed off-diagonal values, `pairs[(i, j)]` for `i < j` in
    /// row-major order.
    pub fn from_pairs(n: usize, pairs: &[f64]) -> Result<Self> {
        if pairs.len() != n * n.saturating_sub(1) / 2 {
            return Err(Error::Shape(format!("{} pair values for n = {n}", pairs.len())));
        }
        let mut rho = vec![0.0; n * n];
        let mut it = pairs.iter();
        for i in 0..n {
            rho[i * n + i] = 1.0;
            for j in i + 1..n {
                let v = *it.next().expect("counted above");
                rho[i * n + j] = v;
                rho[j * n + i] = v;
            }
        }
        Ok(Self { n, rho })
    }

    /// Off-diagonal entries `(i, j, rho_ij)` with `i < j`.
    pub fn pairs(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n)
            .flat_map(|i| (i + 1..self.n).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, self.get(i, j)))
            .collect()
    }
}

/// `rho_ij = sum_p e_i[p] e_j[p] / (C H W)` on canonical-frame noises; the
/// diagonal is set to one.
pub fn estimate_correlation<R: Real>(eps: &[Image<R>], views: &[ViewTransform]) -> Result<CorrelationEstimate> {
    if eps.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two noise vectors".into()));
    }
    Ok(correlation_of_canonical(&canonical_noises(eps, views)?))
}

pub(crate) fn correlation_of_canonical<R: Real>(canonical: &[Image<R>]) -> CorrelationEstimate {
    let n = canonical.len();
    let count = canonical[0].len() as f64;
    let pairs: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| canonical[i].dot(&canonical[j]) / count)
        .collect();
    CorrelationEstimate::from_pairs(n, &pairs).expect("pair count matches")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rectification {
    pub c: f64,
    pub radicand: f64,
    /// The radicand fell below the floor and was raised to it.
    pub clamped: bool,
}

/// `c = 1 / sqrt(sum alpha_i^2 + sum_{i<j} 2 alpha_i alpha_j rho_ij)`, the
/// factor that restores unit variance to the weighted sum.
pub fn rectification_factor(alpha: &WeightVector, rho: &CorrelationEstimate) -> Result<Rectification> {
    let n = alpha.len();
    if rho.n != n {
        return Err(Error::Shape(format!("{n} weights against a {}x{} correlation", rho.n, rho.n)));
    }
    let a = &alpha.alpha;
    let mut radicand: f64 = a.iter().map(|x| x * x).sum();
    for (i, j, r) in rho.pairs() {
        radicand += 2.0 * a[i] * a[j] * r;
    }
    let clamped = !(radicand >= RADICAND_FLOOR);
    let used = if clamped { RADICAND_FLOOR } else { radicand };
    Ok(Rectification {
        c: 1.0 / used.sqrt(),
        radicand,
        clamped,
    })
}

pub fn rectify<R: Real>(eps: &Image<R>, c: f64) -> Result<Image<R>> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidArgument(format!("rectification factor must be positive, got {c}")));
    }
    let c = R::from_f64_lossy(c);
    Ok(eps.map(|v| c * v))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn scores(values: &[f64]) -> Vec<CompletionScore> {
        values
            .iter()
            .enumerate()
            .map(|(i, &value)| CompletionScore {
                value,
                view_index: i,
                timestep: 0,
            })
            .collect()
    }

    fn normal(seed: u64, n: usize) -> Image<f64> {
        Image::standard_normal(1, n, n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn weights_hand_cases() {
        let w = completion_weights(&scores(&[0.3, 0.3, 0.3]), 7, 30).unwrap();
        assert!(w.alpha.iter().all(|a| (a - 1.0 / 3.0).abs() < 1e-15));
        let start = completion_weights(&scores(&[0.4, 0.2]), 0, 30).unwrap();
        assert!((start.alpha[0] - 0.2).abs() < 1e-12 && (start.alpha[1] - 0.8).abs() < 1e-12);
        let end = completion_weights(&scores(&[0.4, 0.2]), 30, 30).unwrap();
        assert!((end.alpha[0] - 1.0 / 3.0).abs() < 1e-12 && (end.alpha[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(weight_exponent(0, 30), -2.0);
        assert_eq!(weight_exponent(30, 30), -1.0);
        assert_eq!(weight_exponent(15, 30), -1.5);
    }

    #[test]
    fn weights_clamp_low_and_negative_scores() {
        let w = completion_weights(&scores(&[-0.7, 0.01, 0.05]), 0, 30).unwrap();
        assert!(w.alpha.iter().all(|a| (a - 1.0 / 3.0).abs() < 1e-12));
        assert!(completion_weights(&[], 0, 30).is_err());
        assert!(completion_weights(&scores(&[0.5]), 31, 30).is_err());
    }

    #[test]
    fn combine_hand_cases() {
        let e = normal(1, 4).cast::<f32>();
        let one = combine_noise(&[e.clone()], &[ViewTransform::Identity], &WeightVector::uniform(1).unwrap()).unwrap();
        assert_eq!(one, e);
        let same = combine_noise(
            &[e.clone(), e.clone(), e.clone()],
            &[ViewTransform::Identity; 3],
            &WeightVector::normalised(vec![0.5, 0.25, 0.25]).unwrap(),
        )
        .unwrap();
        assert_eq!(same, e);

        let (a, b) = (normal(2, 4), normal(3, 4));
        let views = [ViewTransform::Identity, ViewTransform::Rot90Cw];
        let mean = combine_noise(&[a.clone(), b.clone()], &views, &WeightVector::uniform(2).unwrap()).unwrap();
        // b was predicted in the rotated frame: pixel (r, c) of the canonical
        // image sits at (c, n-1-r) there.
        for r in 0..4 {
            for c in 0..4 {
                let want = 0.5 * a.data[r * 4 + c] + 0.5 * b.data[c * 4 + (3 - r)];
                assert!((mean.data[r * 4 + c] - want).abs() < 1e-15);
            }
        }
        assert!(combine_noise(&[a.clone()], &views, &WeightVector::uniform(2).unwrap()).is_err());
        assert!(combine_noise(&[a.clone(), normal(4, 3)], &views, &WeightVector::uniform(2).unwrap()).is_err());
        assert!(combine_noise(&[a.clone(), b], &views, &WeightVector::uniform(3).unwrap()).is_err());
    }

    #[test]
    fn uniform_halves_are_the_exact_mean() {
        let (a, b) = (normal(5, 16).cast::<f32>(), normal(6, 16).cast::<f32>());
        let views = [ViewTransform::Identity, ViewTransform::Identity];
        let out = combine_noise(&[a.clone(), b.clone()], &views, &WeightVector::uniform(2).unwrap()).unwrap();
        for i in 0..a.len() {
            assert_eq!(out.data[i], (a.data[i] + b.data[i]) * 0.5);
        }
    }

    #[test]
    fn correlation_estimator_cases() {
        let n = 317; // 100 489 elements
        let a = normal(7, n);
        let views = [ViewTransform::Identity, ViewTransform::Identity];
        let same = estimate_correlation(&[a.clone(), a.clone()], &views).unwrap();
        assert!((same.get(0, 1) - 1.0).abs() < 0.02);
        assert_eq!(same.get(0, 0), 1.0);
        let neg = estimate_correlation(&[a.clone(), a.map(|v| -v)], &views).unwrap();
        assert!((neg.get(0, 1) + 1.0).abs() < 0.02);
        let indep = estimate_correlation(&[a.clone(), normal(8, n)], &views).unwrap();
        assert!(indep.get(0, 1).abs() <= 3.0 / ((n * n) as f64).sqrt());
        // A view prediction equal to the viewed canonical noise is fully correlated.
        let flip = ViewTransform::FlipHorizontal;
        let aligned = estimate_correlation(&[a.clone(), flip.apply(&a).unwrap()], &[ViewTransform::Identity, flip]).unwrap();
        assert_eq!(aligned.get(0, 1), same.get(0, 1));
        assert!(estimate_correlation(&[a], &views[..1]).is_err());
    }

    #[test]
    fn rectification_hand_cases() {
        let one = rectification_factor(&WeightVector::uniform(1).unwrap(), &CorrelationEstimate::from_pairs(1, &[]).unwrap()).unwrap();
        assert_eq!(one.c, 1.0);
        let half = WeightVector::uniform(2).unwrap();
        let full = rectification_factor(&half, &CorrelationEstimate::from_pairs(2, &[1.0]).unwrap()).unwrap();
        assert!((full.c - 1.0).abs() < 1e-15);
        let indep = rectification_factor(&half, &CorrelationEstimate::from_pairs(2, &[0.0]).unwrap()).unwrap();
        assert!((indep.c - 2f64.sqrt()).abs() < 1e-12);
        let opposite = rectification_factor(&half, &CorrelationEstimate::from_pairs(2, &[-1.0]).unwrap()).unwrap();
        assert!(opposite.clamped);
        assert!((opposite.c - 100.0).abs() < 1e-9);
        assert!(rectification_factor(&half, &CorrelationEstimate::from_pairs(3, &[0.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn rectify_scales_and_rejects_nonpositive() {
        let e = normal(9, 4);
        assert_eq!(rectify(&e, 1.0).unwrap(), e);
        let doubled = rectify(&e, 2.0).unwrap();
        assert!(doubled.data.iter().zip(&e.data).all(|(d, v)| *d == 2.0 * v));
        for c in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(rectify(&e, c).is_err());
        }
    }

    #[test]
    fn rectified_independent_average_has_unit_variance() {
        let n = 1000; // 10^6 elements
        let (a, b) = (normal(10, n), normal(11, n));
        let views = [ViewTransform::Identity, ViewTransform::Identity];
        let alpha = WeightVector::uniform(2).unwrap();
        let rho = estimate_correlation(&[a.clone(), b.clone()], &views).unwrap();
        let c = rectification_factor(&alpha, &rho).unwrap().c;
        let out = rectify(&combine_noise(&[a, b], &views, &alpha).unwrap(), c).unwrap();
        let (mean, var) = out.mean_var();
        assert!(mean.abs() < 0.01 && (var - 1.0).abs() < 0.02, "mean {mean} var {var}");
    }

    fn score_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, 1..6)
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(s in score_vec(), t in 0usize..=30) {
            let w = completion_weights(&scores(&s), t, 30).unwrap();
            prop_assert!((w.alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(w.alpha.iter().all(|&a| a > 0.0));
        }

        #[test]
        fn lower_score_gets_higher_weight(s in prop::collection::vec(0.05f64..1.0, 2..6), t in 0usize..=30) {
            let w = completion_weights(&scores(&s), t, 30).unwrap();
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if s[i] < s[j] {
                        prop_assert!(w.alpha[i] > w.alpha[j]);
                    }
                }
            }
        }

        #[test]
        fn exponent_is_linear_in_t(t in 0usize..=1000) {
            let want = -2.0 + t as f64 / 1000.0;
            prop_assert!((weight_exponent(t, 1000) - want).abs() < 1e-15);
            let w = completion_weights(&scores(&[0.5, 0.25]), t, 1000).unwrap();
            let ratio = w.alpha[1] / w.alpha[0];
            prop_assert!((ratio - 2f64.powf(-want)).abs() < 1e-9 * ratio);
        }

        #[test]
        fn uncorrelated_factor_matches_weight_norm(raw in prop::collection::vec(0.01f64..1.0, 1..6)) {
            let w = WeightVector::normalised(raw).unwrap();
            let n = w.len();
            let rho = CorrelationEstimate::from_pairs(n, &vec![0.0; n * (n - 1) / 2]).unwrap();
            let c = rectification_factor(&w, &rho).unwrap().c;
            let norm = w.alpha.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!((c * norm - 1.0).abs() < 1e-12);
        }
    }
}
