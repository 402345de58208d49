//! Monte Carlo checks of the combination formulas on synthetic Gaussian
//! noise with prescribed correlation. Needs no trained models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::combine::{
    combine_noise, completion_weights, estimate_correlation, rectification_factor, rectify, weight_exponent,
    CorrelationEstimate, WeightVector,
};
use crate::error::Result;
use crate::scorer::CompletionScore;
use crate::tensor::Image;
use crate::views::ViewTransform;

pub const PRESCRIBED_RHOS: [f64; 5] = [-0.5, 0.0, 0.5, 0.9, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    pub seed: u64,
    /// Side of the square sample used for variance restoration.
    pub variance_side: usize,
    pub trials: usize,
    /// Side of each correlation-estimator sample.
    pub trial_side: usize,
    /// Fraction of trials that must land within `3 / sqrt(CHW)`.
    pub coverage: f64,
    pub weight_draws: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variance_side: 1000,
            trials: 1000,
            trial_side: 32,
            coverage: 0.95,
            weight_draws: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: String,
    pub name: String,
    pub value: f64,
    pub tolerance: String,
    pub passed: bool,
}

impl CheckResult {
    fn new(suite: &str, name: String, value: f64, tolerance: impl Into<String>, passed: bool) -> Self {
        Self {
            suite: suite.into(),
            name,
            value,
            tolerance: tolerance.into(),
            passed,
        }
    }
}

/// Lower Cholesky factor of the `n x n` equicorrelation matrix. Singular
/// cases (`rho = 1`, or `rho = -1/(n-1)`) get zero columns.
fn equicorrelation_factor(n: usize, rho: f64) -> Vec<Vec<f64>> {
    let a = |i: usize, j: usize| if i == j { 1.0 } else { rho };
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][i] = (a(i, i) - s).max(0.0).sqrt();
            } else {
                l[i][j] = if l[j][j] > 1e-12 { (a(i, j) - s) / l[j][j] } else { 0.0 };
            }
        }
    }
    l
}

/// `n` unit-variance square samples with pairwise correlation `rho`, in the
/// canonical frame.
pub fn correlated_noise(n: usize, rho: f64, side: usize, rng: &mut impl Rng) -> Vec<Image<f32>> {
    let l = equicorrelation_factor(n, rho);
    let len = side * side;
    let mut out = vec![vec![0.0f32; len]; n];
    let mut z = vec![0.0f64; n];
    for p in 0..len {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        for i in 0..n {
            out[i][p] = (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>() as f32;
        }
    }
    out.into_iter()
        .map(|d| Image::from_vec(1, side, side, d).expect("length matches"))
        .collect()
}

fn moments(x: &Image<f32>) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Rectified combinations of pairs and triples must have mean within 0.01
/// of 0 and variance within 0.02 of 1. Each case is checked twice: with
/// the prescribed correlation and with the estimate from the samples.
pub fn variance_restoration(cfg: &StatsConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a12_0001);
    let views = [ViewTransform::Identity, ViewTransform::FlipVertical, ViewTransform::Rot90Cw];
    let mut out = Vec::new();
    for n in [2usize, 3] {
        for rho in PRESCRIBED_RHOS {
            let canonical = correlated_noise(n, rho, cfg.variance_side, &mut rng);
            let eps = canonical
                .iter()
                .zip(&views)
                .map(|(e, v)| v.apply(e))
                .collect::<Result<Vec<_>>>()?;
            let alpha = WeightVector::normalised((0..n).map(|_| rng.random_range(0.05..1.0)).collect())?;
            let combined = combine_noise(&eps, &views[..n], &alpha)?;
            let prescribed = CorrelationEstimate::from_pairs(n, &vec![rho; n * (n - 1) / 2])?;
            let estimated = estimate_correlation(&eps, &views[..n])?;
            for (route, r) in [("prescribed", prescribed), ("estimated", estimated)] {
                let c = rectification_factor(&alpha, &r)?.c;
                let (mean, var) = moments(&rectify(&combined, c)?);
                let label = format!("n={n} rho={rho} {route}");
                out.push(CheckResult::new(
                    "variance",
                    format!("{label} variance"),
                    var,
                    "|var - 1| <= 0.02",
                    (var - 1.0).abs() <= 0.02,
                ));
                out.push(CheckResult::new(
                    "variance",
                    format!("{label} mean"),
                    mean,
                    "|mean| <= 0.01",
                    mean.abs() <= 0.01,
                ));
            }
        }
    }
    Ok(out)
}

/// For each prescribed correlation, the fraction of trials whose estimate
/// lies within `3 / sqrt(CHW)` of the truth.
pub fn correlation_estimator(cfg: &StatsConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a12_0002);
    let views = [ViewTransform::Identity, ViewTransform::Rot180];
    let tol = 3.0 / ((cfg.trial_side * cfg.trial_side) as f64).sqrt();
    PRESCRIBED_RHOS
        .iter()
        .map(|&rho| {
            let mut hits = 0usize;
            for _ in 0..cfg.trials {
                let canonical = correlated_noise(2, rho, cfg.trial_side, &mut rng);
                let eps = [views[0].apply(&canonical[0])?, views[1].apply(&canonical[1])?];
                if (estimate_correlation(&eps, &views)?.get(0, 1) - rho).abs() <= tol {
                    hits += 1;
                }
            }
            let frac = hits as f64 / cfg.trials as f64;
            Ok(CheckResult::new(
                "correlation",
                format!("rho={rho} within {tol:.4}"),
                frac,
                format!(">= {}", cfg.coverage),
                frac >= cfg.coverage,
            ))
        })
        .collect()
}

fn scores(values: &[f64]) -> Vec<CompletionScore> {
    values
        .iter()
        .map(|&value| CompletionScore {
            value,
            view_index: 0,
            timestep: 0,
        })
        .collect()
}

/// Exponent endpoints, normalisation and the lower-score-gets-more-weight
/// ordering on random score vectors above the floor.
pub fn exponent_schedule(cfg: &StatsConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a12_0003);
    let total = 30;
    let mut out = vec![
        CheckResult::new(
            "schedule",
            "exponent at t=0".into(),
            weight_exponent(0, total),
            "== -2",
            weight_exponent(0, total) == -2.0,
        ),
        CheckResult::new(
            "schedule",
            "exponent at t=T".into(),
            weight_exponent(total, total),
            "== -1",
            weight_exponent(total, total) == -1.0,
        ),
    ];
    let mut worst_sum = 0.0f64;
    let mut order_violations = 0usize;
    for _ in 0..cfg.weight_draws {
        let n = rng.random_range(2..=4);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(0.06..1.0)).collect();
        let t = rng.random_range(0..=total);
        let w = completion_weights(&scores(&values), t, total)?;
        worst_sum = worst_sum.max((w.alpha.iter().sum::<f64>() - 1.0).abs());
        for i in 0..n {
            for j in 0..n {
                if values[i] < values[j] && w.alpha[i] <= w.alpha[j] {
                    order_violations += 1;
                }
            }
        }
    }
    out.push(CheckResult::new(
        "schedule",
        "max |sum alpha - 1|".into(),
        worst_sum,
        "<= 1e-6",
        worst_sum <= 1e-6,
    ));
    out.push(CheckResult::new(
        "schedule",
        "lower score, higher weight violations".into(),
        order_violations as f64,
        "== 0",
        order_violations == 0,
    ));
    Ok(out)
}

pub fn run_suite(cfg: &StatsConfig) -> Result<Vec<CheckResult>> {
    let mut out = variance_restoration(cfg)?;
    out.extend(correlation_estimator(cfg)?);
    out.extend(exponent_schedule(cfg)?);
    Ok(out)
}
