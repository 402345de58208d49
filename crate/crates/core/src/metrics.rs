//! Anagram metrics over the prompt-by-view score matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::GenerationTask;
use crate::scorer::{cosine, Scorer};
use crate::tensor::ImageTensor;

pub const DEFAULT_TAU: f64 = 0.01;

/// `S[i][j] = cos(concept of task i, image seen through view j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub n: usize,
    pub s: Vec<f64>,
    pub tasks: Vec<GenerationTask>,
}

impl ScoreMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, tasks: Vec<GenerationTask>) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) || tasks.len() != n {
            return Err(Error::Shape("score matrix must be square and match the task list".into()));
        }
        Ok(Self {
            n,
            s: rows.into_iter().flatten().collect(),
            tasks,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s[i * self.n + j]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }
}

pub fn score_matrix(eval: &Scorer, image: &ImageTensor, tasks: &[GenerationTask]) -> Result<ScoreMatrix> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks to score".into()));
    }
    let viewed = tasks.iter().map(|t| t.view.apply(image)).collect::<Result<Vec<_>>>()?;
    let embs = eval.embed_images(&viewed.iter().collect::<Vec<_>>())?;
    let rows = tasks
        .iter()
        .map(|t| {
            let q = eval.embed_concept(t.concept)?;
            Ok(embs.iter().map(|e| cosine(&q, e)).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    ScoreMatrix::from_rows(rows, tasks.to_vec())
}

/// Smallest diagonal entry: the view that is least recognisable.
pub fn worst_alignment(s: &ScoreMatrix) -> f64 {
    s.diagonal().into_iter().fold(f64::INFINITY, f64::min)
}

pub fn average_alignment(s: &ScoreMatrix) -> f64 {
    s.diagonal().iter().sum::<f64>() / s.n as f64
}

/// Mean of the traces of the row-wise and column-wise softmax of `S / tau`,
/// divided by `N`.
pub fn concealment(s: &ScoreMatrix, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let n = s.n;
    let logit = |i: usize, j: usize| s.get(i, j) / tau;
    let mut trace = 0.0;
    for i in 0..n {
        let row_max = (0..n).map(|j| logit(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let row_sum: f64 = (0..n).map(|j| (logit(i, j) - row_max).exp()).sum();
        trace += (logit(i, i) - row_max).exp() / row_sum;
        let col_max = (0..n).map(|k| logit(k, i)).fold(f64::NEG_INFINITY, f64::max);
        let col_sum: f64 = (0..n).map(|k| (logit(k, i) - col_max).exp()).sum();
        trace += (logit(i, i) - col_max).exp() / col_sum;
    }
    Ok(trace / (2 * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub a_min: f64,
    pub concealment: f64,
    pub a_avg: f64,
}

pub fn summarize(s: &ScoreMatrix, tau: f64) -> Result<MetricSummary> {
    Ok(MetricSummary {
        a_min: worst_alignment(s),
        concealment: concealment(s, tau)?,
        a_avg: average_alignment(s),
    })
}

/// Column-wise mean of several summaries.
pub fn mean_summary(rows: &[MetricSummary]) -> Option<MetricSummary> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some(MetricSummary {
        a_min: rows.iter().map(|r| r.a_min).sum::<f64>() / n,
        concealment: rows.iter().map(|r| r.concealment).sum::<f64>() / n,
        a_avg: rows.iter().map(|r| r.a_avg).sum::<f64>() / n,
    })
}
