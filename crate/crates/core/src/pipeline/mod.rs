//! The anagram sampler: per step, predict noise under every view, weight and
//! combine the predictions, optionally rectify their variance, take the
//! ancestral step and optionally nudge the result toward shared attention.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aso::{aso_update, AsoConfig};
use crate::combine::{
    canonical_noises, combine_canonical, completion_weights, correlation_of_canonical, rectification_factor, rectify,
    WeightVector,
};
use crate::denoiser::{ConceptId, Denoiser};
use crate::error::{Error, Result};
use crate::metrics::{mean_summary, score_matrix, summarize, MetricSummary};
use crate::schedule::{DiffusionSchedule, InferenceSchedule, DEFAULT_INFERENCE_STEPS};
use crate::scorer::{Regime, Scorer};
use crate::tensor::{Image, ImageTensor};
use crate::views::ViewTransform;

/// One (concept, view) pair of an anagram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationTask {
    pub concept: ConceptId,
    pub view: ViewTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Toggles {
    pub aso: bool,
    pub nvb: bool,
    pub nvr: bool,
}

impl Toggles {
    pub const BASELINE: Toggles = Toggles {
        aso: false,
        nvb: false,
        nvr: false,
    };
    pub const FULL: Toggles = Toggles {
        aso: true,
        nvb: true,
        nvr: true,
    };

    /// All eight combinations, baseline first and full last.
    pub fn grid() -> Vec<Toggles> {
        (0..8u8)
            .map(|bits| Toggles {
                aso: bits & 4 != 0,
                nvb: bits & 2 != 0,
                nvr: bits & 1 != 0,
            })
            .collect()
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = [(self.aso, "aso"), (self.nvb, "nvb"), (self.nvr, "nvr")]
            .into_iter()
            .filter_map(|(b, n)| b.then_some(n))
            .collect();
        if on.is_empty() {
            "baseline".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub tasks: Vec<GenerationTask>,
    pub seed: u64,
    pub steps: usize,
    pub guidance_scale: f64,
    pub toggles: Toggles,
    pub aso: AsoConfig,
    /// Regime the pipeline scorer is required to have.
    pub scorer_regime: Regime,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            seed: 0,
            steps: DEFAULT_INFERENCE_STEPS,
            guidance_scale: 3.0,
            toggles: Toggles::FULL,
            aso: AsoConfig::default(),
            scorer_regime: Regime::NoiseAware,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::InvalidArgument("a run needs at least one task".into()));
        }
        for (i, a) in self.tasks.iter().enumerate() {
            if self.tasks[i + 1..].iter().any(|b| b.view == a.view) {
                return Err(Error::InvalidArgument(format!("view {} used by more than one task", a.view)));
            }
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::InvalidArgument("guidance scale must be >= 0".into()));
        }
        self.aso.validate()
    }

    pub fn views(&self) -> Vec<ViewTransform> {
        self.tasks.iter().map(|t| t.view).collect()
    }
}

/// Everything measured during one inference step. Quantities that were not
/// computed are `None` and serialise as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Inference step, counting down from `steps` to 1.
    pub step: usize,
    /// Training timestep the denoiser saw.
    pub t: usize,
    pub alpha_bar: f64,
    pub scores: Option<Vec<f64>>,
    pub alpha: Vec<f64>,
    /// `rho_ij` for `i < j`, row-major.
    pub rho: Vec<f64>,
    /// Cosine between canonical-frame noises, same pair order as `rho`.
    pub noise_cosine: Vec<f64>,
    pub c: Option<f64>,
    pub radicand: Option<f64>,
    pub clamped: Option<bool>,
    pub overlap: Option<Vec<f64>>,
    pub aso_loss: Option<f64>,
    pub update_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub tasks: Vec<GenerationTask>,
    pub records: Vec<StepRecord>,
    pub final_image: ImageTensor,
}

const NULL: &str = "null";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| NULL.to_string(), |v| v.to_string())
}

fn pair_names(prefix: &str, n: usize) -> Vec<String> {
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| format!("{prefix}_{i}_{j}")))
        .collect()
}

impl RunTrace {
    /// Header: `step, t, alpha_bar, cs_i.., alpha_i.., rho_i_j.., cos_i_j..,
    /// c, radicand, clamped, overlap_i_j.., aso_loss, update_norm`.
    pub fn csv_header(n: usize) -> Vec<String> {
        let mut h: Vec<String> = vec!["step".into(), "t".into(), "alpha_bar".into()];
        h.extend((0..n).map(|i| format!("cs_{i}")));
        h.extend((0..n).map(|i| format!("alpha_{i}")));
        h.extend(pair_names("rho", n));
        h.extend(pair_names("cos", n));
        h.extend(["c", "radicand", "clamped"].map(String::from));
        h.extend(pair_names("overlap", n));
        h.extend(["aso_loss", "update_norm"].map(String::from));
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.tasks.len();
        let pairs = n * n.saturating_sub(1) / 2;
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        w.write_record(Self::csv_header(n)).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![r.step.to_string(), r.t.to_string(), r.alpha_bar.to_string()];
            match &r.scores {
                Some(s) => row.extend(s.iter().map(f64::to_string)),
                None => row.extend(std::iter::repeat_n(NULL.to_string(), n)),
            }
            row.extend(r.alpha.iter().map(f64::to_string));
            row.extend(r.rho.iter().map(f64::to_string));
            row.extend(r.noise_cosine.iter().map(f64::to_string));
            row.extend([opt(r.c), opt(r.radicand), opt(r.clamped)]);
            match &r.overlap {
                Some(o) => row.extend(o.iter().map(f64::to_string)),
                None => row.extend(std::iter::repeat_n(NULL.to_string(), pairs)),
            }
            row.extend([opt(r.aso_loss), opt(r.update_norm)]);
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("trace csv", e))
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

fn noise_cosines(canonical: &[ImageTensor]) -> Vec<f64> {
    let n = canonical.len();
    let norms: Vec<f64> = canonical.iter().map(Image::l2_norm).collect();
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| canonical[i].dot(&canonical[j]) / (norms[i] * norms[j]).max(1e-300))
        .collect()
}

/// Runs the full reverse process. `scorer` is the pipeline scorer: required
/// when balancing is on, and used to record completion scores whenever
/// present.
pub fn generate(
    cfg: &RunConfig,
    denoiser: &Denoiser,
    scorer: Option<&Scorer>,
    schedule: &DiffusionSchedule,
) -> Result<(ImageTensor, RunTrace)> {
    generate_observed(cfg, denoiser, scorer, schedule, |_, _| {})
}

/// [`generate`], calling `observe(k, x_k)` on the initial noise (`k = steps`)
/// and after every step.
pub fn generate_observed(
    cfg: &RunConfig,
    denoiser: &Denoiser,
    scorer: Option<&Scorer>,
    schedule: &DiffusionSchedule,
    mut observe: impl FnMut(usize, &ImageTensor),
) -> Result<(ImageTensor, RunTrace)> {
    cfg.validate()?;
    if let Some(s) = scorer {
        if s.regime != cfg.scorer_regime {
            return Err(Error::InvalidArgument(format!(
                "run expects a {} pipeline scorer, got {}",
                cfg.scorer_regime, s.regime
            )));
        }
    } else if cfg.toggles.nvb {
        return Err(Error::InvalidArgument("noise balancing needs a pipeline scorer".into()));
    }
    let dc = &denoiser.config;
    if schedule.steps() != dc.max_timestep {
        return Err(Error::Shape(format!(
            "schedule has {} steps, denoiser was built for {}",
            schedule.steps(),
            dc.max_timestep
        )));
    }
    for t in &cfg.tasks {
        denoiser.concept_tokens(t.concept)?;
        if let Some(s) = scorer {
            s.embed_concept(t.concept)?;
        }
    }
    let inference = InferenceSchedule::respace(schedule, cfg.steps)?;
    let views = cfg.views();
    let concepts: Vec<ConceptId> = cfg.tasks.iter().map(|t| t.concept).collect();
    let n = cfg.tasks.len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, s) = (dc.channels, dc.image_size);
    let mut x = ImageTensor::standard_normal(c, s, s, &mut rng);
    observe(cfg.steps, &x);
    let mut records = Vec::with_capacity(cfg.steps);
    for k in (1..=cfg.steps).rev() {
        let t = inference.train_timestep(k);
        let viewed = views.iter().map(|v| v.apply(&x)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImageTensor> = viewed.iter().collect();
        let eps: Vec<ImageTensor> = denoiser
            .cfg_predict_many(&refs, t, &concepts, cfg.guidance_scale)?
            .into_iter()
            .map(|(e, _)| e)
            .collect();

        let scores = match scorer {
            Some(sc) => {
                let pairs: Vec<(ConceptId, &ImageTensor)> = concepts.iter().copied().zip(refs.iter().copied()).collect();
                Some(sc.completion_scores(&pairs, t)?)
            }
            None => None,
        };
        let alpha = match (&scores, cfg.toggles.nvb) {
            (Some(sc), true) => completion_weights(sc, k, cfg.steps)?,
            _ => WeightVector::uniform(n)?,
        };

        let canonical = canonical_noises(&eps, &views)?;
        let mut combined = combine_canonical(&canonical, &alpha)?;
        let rho = correlation_of_canonical(&canonical);
        let rect = if cfg.toggles.nvr {
            let r = rectification_factor(&alpha, &rho)?;
            combined = rectify(&combined, r.c)?;
            Some(r)
        } else {
            None
        };

        let z = (k > 1).then(|| ImageTensor::standard_normal(c, s, s, &mut rng));
        let stepped = inference.schedule.reverse_step(&x, &combined, k, z.as_ref())?;
        let mut record = StepRecord {
            step: k,
            t,
            alpha_bar: inference.schedule.alpha_bar(k)?,
            scores: scores.map(|v| v.iter().map(|s| s.value).collect()),
            alpha: alpha.alpha,
            rho: rho.pairs().into_iter().map(|(_, _, r)| r).collect(),
            noise_cosine: noise_cosines(&canonical),
            c: rect.map(|r| r.c),
            radicand: rect.map(|r| r.radicand),
            clamped: rect.map(|r| r.clamped),
            overlap: None,
            aso_loss: None,
            update_norm: None,
        };
        x = if cfg.toggles.aso && n >= 2 {
            let out = aso_update(&stepped, &cfg.tasks, denoiser, k, &inference, &cfg.aso)?;
            if out.loss.is_some() {
                record.overlap = Some(out.ratios.iter().map(|r| r.2).collect());
                record.aso_loss = out.loss;
                record.update_norm = Some(out.update_norm);
            }
            out.x
        } else {
            stepped
        };
        if !x.is_finite() {
            return Err(Error::InvalidArgument(format!("sampling produced non-finite values at step {k}")));
        }
        observe(k - 1, &x);
        records.push(record);
    }
    let trace = RunTrace {
        tasks: cfg.tasks.clone(),
        records,
        final_image: x.clone(),
    };
    Ok((x, trace))
}

/// One benchmark item: a task list and its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkCase {
    pub tasks: Vec<GenerationTask>,
    pub seed: u64,
}

/// Two-view cases (identity and vertical flip) cycling over every unordered
/// pair of distinct classes, one seed per case.
pub fn toy_benchmark(num_classes: usize, runs: usize, base_seed: u64) -> Vec<BenchmarkCase> {
    let pairs: Vec<(ConceptId, ConceptId)> = (0..num_classes)
        .flat_map(|a| (a + 1..num_classes).map(move |b| (a, b)))
        .collect();
    if pairs.is_empty() {
        return Vec::new();
    }
    (0..runs)
        .map(|i| {
            let (a, b) = pairs[i % pairs.len()];
            // Alternate which class takes the upright view on repeat passes.
            let (a, b) = if (i / pairs.len()) % 2 == 0 { (a, b) } else { (b, a) };
            BenchmarkCase {
                tasks: vec![
                    GenerationTask {
                        concept: a,
                        view: ViewTransform::Identity,
                    },
                    GenerationTask {
                        concept: b,
                        view: ViewTransform::FlipVertical,
                    },
                ],
                seed: base_seed + i as u64,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub case: usize,
    pub seed: u64,
    pub summary: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub runs: Vec<RunMetrics>,
    pub mean: MetricSummary,
}

/// Models shared by every run of a benchmark.
#[derive(Debug, Clone, Copy)]
pub struct BenchmarkModels<'a> {
    pub denoiser: &'a Denoiser,
    pub pipeline_scorer: Option<&'a Scorer>,
    /// Held-out scorer used only for the metrics.
    pub eval_scorer: &'a Scorer,
    pub schedule: &'a DiffusionSchedule,
}

/// Generates every case under every toggle combination and scores the
/// results. `template` supplies everything but the tasks, seed and toggles;
/// `tau` is the concealment temperature.
pub fn run_ablation(
    grid: &[Toggles],
    cases: &[BenchmarkCase],
    template: &RunConfig,
    models: &BenchmarkModels<'_>,
    tau: f64,
) -> Result<Vec<AblationRow>> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one case".into()));
    }
    grid.iter()
        .map(|&toggles| {
            let runs = cases
                .iter()
                .enumerate()
                .map(|(i, case)| {
                    let cfg = RunConfig {
                        tasks: case.tasks.clone(),
                        seed: case.seed,
                        toggles,
                        ..template.clone()
                    };
                    let (img, _) = generate(&cfg, models.denoiser, models.pipeline_scorer, models.schedule)?;
                    let summary = summarize(&score_matrix(models.eval_scorer, &img, &case.tasks)?, tau)?;
                    Ok(RunMetrics {
                        case: i,
                        seed: case.seed,
                        summary,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mean = mean_summary(&runs.iter().map(|r| r.summary).collect::<Vec<_>>()).expect("non-empty");
            Ok(AblationRow { toggles, runs, mean })
        })
        .collect()
}
