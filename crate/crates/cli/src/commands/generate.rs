use std::path::{Path, PathBuf};

use amtl_core::aso::AsoConfig;
use amtl_core::data::shape_vocab;
use amtl_core::io::{write_png, write_raw};
use amtl_core::pipeline::generate;
use amtl_core::schedule::DEFAULT_INFERENCE_STEPS;
use amtl_core::{ConceptId, GenerationTask, Regime, RunConfig, Toggles, ViewTransform};
use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use super::{load_denoiser, load_scorer, schedule_for};
use crate::commands::train::{default_checkpoint, parse_regime, TrainKind};
use crate::config::{self, RESOLVED_CONFIG};

pub const IMAGE_PNG: &str = "image.png";
pub const IMAGE_RAW: &str = "image.raw";
pub const TRACE_CSV: &str = "trace.csv";

/// Sampler settings shared by every command that generates images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub steps: usize,
    pub guidance: f64,
    pub aso: AsoConfig,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_INFERENCE_STEPS,
            guidance: 3.0,
            aso: AsoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SamplingArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    pub guidance: Option<f64>,
    /// Target attention overlap ratio, in [0, 0.5].
    #[arg(long)]
    pub phi: Option<f64>,
    #[arg(long)]
    pub aso_step_size: Option<f64>,
    /// Fraction of the schedule, counted from the start, during which the
    /// attention update runs.
    #[arg(long)]
    pub active_fraction: Option<f64>,
}

impl SamplingArgs {
    pub fn apply(self, c: &mut SamplingConfig) {
        config::set(&mut c.steps, self.steps);
        config::set(&mut c.guidance, self.guidance);
        config::set(&mut c.aso.phi, self.phi);
        config::set(&mut c.aso.step_size, self.aso_step_size);
        config::set(&mut c.aso.active_fraction, self.active_fraction);
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(crate::usage("--steps must be at least 1"));
        }
        self.aso.validate().map_err(|e| crate::usage(e.to_string()))
    }

    /// A run template; tasks, seed and toggles are filled in per run.
    pub fn template(&self, scorer_regime: Regime) -> RunConfig {
        RunConfig {
            steps: self.steps,
            guidance_scale: self.guidance,
            aso: self.aso,
            scorer_regime,
            ..RunConfig::default()
        }
    }
}

/// Concept by class name or numeric id.
pub fn resolve_concept(s: &str) -> Result<ConceptId> {
    let vocab = shape_vocab();
    if let Ok(id) = s.parse::<usize>() {
        vocab.name(id)?;
        return Ok(id);
    }
    Ok(vocab.id(s)?)
}

pub fn parse_view(s: &str) -> Result<ViewTransform, String> {
    s.parse().map_err(|e: amtl_core::Error| e.to_string())
}

fn toggle(on: bool, off: bool) -> Option<bool> {
    match (on, off) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
    /// Pipeline scorer, needed for balancing or `--record-scores`.
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated class names or ids, one per view.
    #[arg(long, value_delimiter = ',')]
    pub concepts: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_view)]
    pub views: Option<Vec<ViewTransform>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, overrides_with = "no_aso")]
    pub aso: bool,
    #[arg(long)]
    pub no_aso: bool,
    #[arg(long, overrides_with = "no_nvb")]
    pub nvb: bool,
    #[arg(long)]
    pub no_nvb: bool,
    #[arg(long, overrides_with = "no_nvr")]
    pub nvr: bool,
    #[arg(long)]
    pub no_nvr: bool,
    #[arg(long, value_parser = parse_regime)]
    pub scorer_regime: Option<Regime>,
    /// Record completion scores in the trace even without balancing.
    #[arg(long)]
    pub record_scores: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub denoiser: PathBuf,
    pub scorer: PathBuf,
    /// Empty means a directory named after the run under the data root.
    pub out: PathBuf,
    pub concepts: Vec<String>,
    pub views: Vec<ViewTransform>,
    pub seed: u64,
    pub sampling: SamplingConfig,
    pub toggles: Toggles,
    pub scorer_regime: Regime,
    pub record_scores: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            denoiser: default_checkpoint(TrainKind::Denoiser, Regime::NoiseAware),
            scorer: default_checkpoint(TrainKind::Scorer, Regime::NoiseAware),
            out: PathBuf::new(),
            concepts: vec!["circle".into(), "triangle".into()],
            views: vec![ViewTransform::Identity, ViewTransform::FlipVertical],
            seed: 0,
            sampling: SamplingConfig::default(),
            toggles: Toggles::FULL,
            scorer_regime: Regime::NoiseAware,
            record_scores: false,
        }
    }
}

impl GenerateArgs {
    pub fn resolve(self) -> Result<GenerateConfig> {
        let mut c = config::overlay(GenerateConfig::default(), self.config.as_deref())?;
        config::set(&mut c.denoiser, self.denoiser);
        config::set(&mut c.scorer, self.scorer);
        config::set(&mut c.out, self.out);
        config::set(&mut c.concepts, self.concepts);
        config::set(&mut c.views, self.views);
        config::set(&mut c.seed, self.seed);
        self.sampling.apply(&mut c.sampling);
        config::set(&mut c.toggles.aso, toggle(self.aso, self.no_aso));
        config::set(&mut c.toggles.nvb, toggle(self.nvb, self.no_nvb));
        config::set(&mut c.toggles.nvr, toggle(self.nvr, self.no_nvr));
        config::set(&mut c.scorer_regime, self.scorer_regime);
        config::set(&mut c.record_scores, self.record_scores);
        if c.scorer_regime != Regime::NoiseAware && c.scorer == GenerateConfig::default().scorer {
            c.scorer = default_checkpoint(TrainKind::Scorer, c.scorer_regime);
        }
        if c.out.as_os_str().is_empty() {
            c.out = config::data_root().join("runs").join(c.run_name());
        }
        Ok(c)
    }
}

impl GenerateConfig {
    pub fn run_name(&self) -> String {
        let views: Vec<&str> = self.views.iter().map(|v| v.name()).collect();
        format!(
            "{}_{}_seed{}_{}",
            self.concepts.join("-"),
            views.join("-"),
            self.seed,
            self.toggles.label()
        )
    }

    pub fn tasks(&self) -> Result<Vec<GenerationTask>> {
        if self.concepts.len() != self.views.len() {
            return Err(crate::usage(format!(
                "{} concepts but {} views; give one view per concept",
                self.concepts.len(),
                self.views.len()
            )));
        }
        if self.concepts.is_empty() {
            return Err(crate::usage("at least one concept is required"));
        }
        self.concepts
            .iter()
            .zip(&self.views)
            .map(|(c, &view)| {
                Ok(GenerationTask {
                    concept: resolve_concept(c).map_err(|e| crate::usage(e.to_string()))?,
                    view,
                })
            })
            .collect()
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        self.sampling.validate()?;
        Ok(RunConfig {
            tasks: self.tasks()?,
            seed: self.seed,
            toggles: self.toggles,
            ..self.sampling.template(self.scorer_regime)
        })
    }
}

pub fn run(args: GenerateArgs) -> Result<()> {
    let cfg = args.resolve()?;
    generate_to_dir(&cfg)
}

pub fn generate_to_dir(cfg: &GenerateConfig) -> Result<()> {
    let run = cfg.run_config()?;
    let denoiser = load_denoiser(&cfg.denoiser)?;
    let scorer = if cfg.toggles.nvb || cfg.record_scores {
        Some(load_scorer(&cfg.scorer)?)
    } else {
        None
    };
    let schedule = schedule_for(&denoiser)?;
    let (image, trace) = generate(&run, &denoiser, scorer.as_ref(), &schedule)?;
    write_outputs(&cfg.out, &image, &trace)?;
    config::write_resolved(&cfg.out.join(RESOLVED_CONFIG), cfg)?;
    eprintln!("wrote {}", cfg.out.display());
    Ok(())
}

fn write_outputs(dir: &Path, image: &amtl_core::ImageTensor, trace: &amtl_core::RunTrace) -> Result<()> {
    config::ensure_dir(dir)?;
    write_png(&dir.join(IMAGE_PNG), image)?;
    write_raw(&dir.join(IMAGE_RAW), image)?;
    let path = dir.join(TRACE_CSV);
    let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    trace.write_csv(std::io::BufWriter::new(file))?;
    Ok(())
}
