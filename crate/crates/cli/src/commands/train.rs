use std::path::{Path, PathBuf};

use amtl_core::data::ShapeDataset;
use amtl_core::denoiser::{train_denoiser, DenoiserTrainConfig};
use amtl_core::schedule::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TRAIN_STEPS};
use amtl_core::scorer::{train_scorer, ScorerTrainConfig};
use amtl_core::{DenoiserConfig, DiffusionSchedule, Regime, ScorerConfig};
use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainKind {
    Denoiser,
    /// Pipeline scorer; `--regime` picks noise-aware (default) or vanilla.
    Scorer,
    /// Held-out vanilla scorer used only for metrics.
    EvalScorer,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub kind: TrainKind,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_regime)]
    pub regime: Option<Regime>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Denoiser channel width at full resolution.
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub mid_channels: Option<usize>,
    /// Scorer channel width.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
}

pub(crate) fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse().map_err(|e: amtl_core::Error| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserJob {
    pub data: PathBuf,
    pub out: PathBuf,
    pub model: DenoiserConfig,
    pub train: DenoiserTrainConfig,
}

impl Default for DenoiserJob {
    fn default() -> Self {
        Self {
            data: config::data_root().join("dataset"),
            out: default_checkpoint(TrainKind::Denoiser, Regime::NoiseAware),
            model: DenoiserConfig::default(),
            train: DenoiserTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerJob {
    pub data: PathBuf,
    pub out: PathBuf,
    pub regime: Regime,
    pub model: ScorerConfig,
    pub train: ScorerTrainConfig,
}

impl Default for ScorerJob {
    fn default() -> Self {
        Self {
            data: config::data_root().join("dataset"),
            out: default_checkpoint(TrainKind::Scorer, Regime::NoiseAware),
            regime: Regime::NoiseAware,
            model: ScorerConfig::default(),
            train: ScorerTrainConfig::default(),
        }
    }
}

impl ScorerJob {
    /// A vanilla scorer with its own seed and a narrower network, so the
    /// metrics never share weights with anything the sampler reads.
    pub fn eval_default() -> Self {
        Self {
            out: default_checkpoint(TrainKind::EvalScorer, Regime::Vanilla),
            regime: Regime::Vanilla,
            model: ScorerConfig {
                width: 12,
                embed_dim: 48,
                ..ScorerConfig::default()
            },
            train: ScorerTrainConfig {
                seed: 1,
                ..ScorerTrainConfig::default()
            },
            ..Self::default()
        }
    }
}

pub fn default_checkpoint(kind: TrainKind, regime: Regime) -> PathBuf {
    let dir = config::models_dir();
    match kind {
        TrainKind::Denoiser => dir.join("denoiser.ckpt"),
        TrainKind::Scorer => dir.join(format!("scorer-{}.ckpt", regime.name())),
        TrainKind::EvalScorer => dir.join("eval-scorer.ckpt"),
    }
}

fn load_dataset(dir: &Path) -> Result<ShapeDataset> {
    ShapeDataset::load(dir).with_context(|| format!("loading dataset {} (run `amtl gen-data` first)", dir.display()))
}

fn write_loss_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: TrainArgs) -> Result<()> {
    match args.kind {
        TrainKind::Denoiser => {
            if args.regime.is_some() || args.width.is_some() || args.embed_dim.is_some() {
                return Err(crate::usage("--regime, --width and --embed-dim apply to scorers only"));
            }
            let mut job = config::overlay(DenoiserJob::default(), args.config.as_deref())?;
            config::set(&mut job.data, args.data);
            config::set(&mut job.out, args.out);
            config::set(&mut job.train.epochs, args.epochs);
            config::set(&mut job.train.batch_size, args.batch_size);
            config::set(&mut job.train.lr, args.lr);
            config::set(&mut job.train.seed, args.seed);
            config::set(&mut job.train.log_every, args.log_every);
            config::set(&mut job.model.base_channels, args.base_channels);
            config::set(&mut job.model.mid_channels, args.mid_channels);
            train_denoiser_job(&job)
        }
        TrainKind::Scorer | TrainKind::EvalScorer => {
            if args.base_channels.is_some() || args.mid_channels.is_some() {
                return Err(crate::usage("--base-channels and --mid-channels apply to the denoiser only"));
            }
            let eval = args.kind == TrainKind::EvalScorer;
            let defaults = if eval {
                ScorerJob::eval_default()
            } else {
                let regime = args.regime.unwrap_or(Regime::NoiseAware);
                ScorerJob {
                    out: default_checkpoint(TrainKind::Scorer, regime),
                    ..ScorerJob::default()
                }
            };
            let mut job = config::overlay(defaults, args.config.as_deref())?;
            config::set(&mut job.data, args.data);
            config::set(&mut job.out, args.out);
            config::set(&mut job.regime, args.regime);
            config::set(&mut job.train.epochs, args.epochs);
            config::set(&mut job.train.batch_size, args.batch_size);
            config::set(&mut job.train.lr, args.lr);
            config::set(&mut job.train.seed, args.seed);
            config::set(&mut job.train.log_every, args.log_every);
            config::set(&mut job.model.width, args.width);
            config::set(&mut job.model.embed_dim, args.embed_dim);
            if eval && job.regime != Regime::Vanilla {
                return Err(crate::usage("the evaluation scorer is always vanilla"));
            }
            train_scorer_job(&job)
        }
    }
}

pub fn train_denoiser_job(job: &DenoiserJob) -> Result<()> {
    let ds = load_dataset(&job.data)?;
    let schedule = DiffusionSchedule::linear(job.model.max_timestep, DEFAULT_BETA_START, DEFAULT_BETA_END)?;
    eprintln!("training denoiser on {} images for {} epochs", ds.len(), job.train.epochs);
    let (model, report) = train_denoiser(&ds, &job.model, &schedule, &job.train)?;
    model.save(&job.out)?;
    write_loss_csv(
        &config::sibling(&job.out, "losses.csv"),
        &["step", "epoch", "loss"],
        report
            .losses
            .iter()
            .map(|r| vec![r.step.to_string(), r.epoch.to_string(), r.loss.to_string()]),
    )?;
    config::write_resolved(&config::sibling(&job.out, "config.json"), job)?;
    eprintln!("saved {}", job.out.display());
    Ok(())
}

pub fn train_scorer_job(job: &ScorerJob) -> Result<()> {
    let ds = load_dataset(&job.data)?;
    let schedule = DiffusionSchedule::linear(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)?;
    eprintln!("training {} scorer on {} images for {} epochs", job.regime, ds.len(), job.train.epochs);
    let (model, log) = train_scorer(&ds, &schedule, job.regime, &job.model, &job.train)?;
    model.save(&job.out)?;
    write_loss_csv(
        &config::sibling(&job.out, "losses.csv"),
        &["step", "loss"],
        log.iter().map(|(s, l)| vec![s.to_string(), l.to_string()]),
    )?;
    config::write_resolved(&config::sibling(&job.out, "config.json"), job)?;
    eprintln!("saved {}", job.out.display());
    Ok(())
}
