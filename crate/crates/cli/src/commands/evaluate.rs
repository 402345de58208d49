use std::fs;
use std::path::{Path, PathBuf};

use amtl_core::io::read_raw;
use amtl_core::metrics::{mean_summary, score_matrix, summarize, MetricSummary, DEFAULT_TAU};
use amtl_core::pipeline::{generate, run_ablation, toy_benchmark, AblationRow, BenchmarkModels, Toggles};
use amtl_core::{Regime, RunConfig};
use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use super::generate::{GenerateConfig, SamplingArgs, SamplingConfig, IMAGE_RAW};
use super::{load_denoiser, load_scorer, schedule_for};
use crate::commands::train::{default_checkpoint, parse_regime, TrainKind};
use crate::config::{self, RESOLVED_CONFIG};

pub const REPORT_HEADER: [&str; 6] = ["run_id", "seed", "toggles", "a_min", "concealment", "a_avg"];

fn metric_fields(m: &MetricSummary) -> [String; 3] {
    [m.a_min.to_string(), m.concealment.to_string(), m.a_avg.to_string()]
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        config::ensure_dir(parent)?;
    }
    csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directories from `generate`, or directories containing them.
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub eval_scorer: Option<PathBuf>,
    /// Report CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Softmax temperature of the concealment score.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub runs: Vec<PathBuf>,
    pub eval_scorer: PathBuf,
    pub out: PathBuf,
    pub tau: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            runs: Vec::new(),
            eval_scorer: default_checkpoint(TrainKind::EvalScorer, Regime::Vanilla),
            out: config::data_root().join("reports").join("evaluate.csv"),
            tau: DEFAULT_TAU,
        }
    }
}

/// Run directories under `path`: itself if it holds an image, else its
/// immediate subdirectories that do, in name order.
fn collect_runs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.join(IMAGE_RAW).is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(IMAGE_RAW).is_file())
        .collect();
    found.sort();
    if found.is_empty() {
        anyhow::bail!("no generated images under {}", path.display());
    }
    Ok(found)
}

pub fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let mut cfg = config::overlay(EvaluateConfig::default(), args.config.as_deref())?;
    if !args.runs.is_empty() {
        cfg.runs = args.runs;
    }
    config::set(&mut cfg.eval_scorer, args.eval_scorer);
    config::set(&mut cfg.out, args.out);
    config::set(&mut cfg.tau, args.tau);
    if cfg.runs.is_empty() {
        return Err(crate::usage("give at least one run directory"));
    }
    if !(cfg.tau > 0.0) {
        return Err(crate::usage("--tau must be positive"));
    }
    evaluate_runs(&cfg)
}

pub fn evaluate_runs(cfg: &EvaluateConfig) -> Result<()> {
    let eval = load_scorer(&cfg.eval_scorer).context("the evaluation scorer is required")?;
    if eval.regime != Regime::Vanilla {
        anyhow::bail!("evaluation scorer must be vanilla, got {}", eval.regime);
    }
    let mut dirs = Vec::new();
    for p in &cfg.runs {
        dirs.extend(collect_runs(p)?);
    }
    let mut w = csv_writer(&cfg.out)?;
    w.write_record(REPORT_HEADER)?;
    let mut all = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let run: GenerateConfig = config::overlay(GenerateConfig::default(), Some(&dir.join(RESOLVED_CONFIG)))?;
        let image = read_raw(&dir.join(IMAGE_RAW))?;
        let m = summarize(&score_matrix(&eval, &image, &run.tasks()?)?, cfg.tau)?;
        let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut row = vec![id, run.seed.to_string(), run.toggles.label()];
        row.extend(metric_fields(&m));
        w.write_record(&row)?;
        all.push(m);
    }
    let mean = mean_summary(&all).expect("at least one run");
    let mut row = vec!["mean".to_string(), String::new(), String::new()];
    row.extend(metric_fields(&mean));
    w.write_record(&row)?;
    w.flush()?;
    config::write_resolved(&config::sibling(&cfg.out, "config.json"), cfg)?;
    eprintln!(
        "{} runs: A_min {:.4}  C {:.4}  A_avg {:.4}",
        all.len(),
        mean.a_min,
        mean.concealment,
        mean.a_avg
    );
    Ok(())
}

/// Settings shared by the benchmark sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub denoiser: PathBuf,
    pub scorer: PathBuf,
    pub eval_scorer: PathBuf,
    pub out: PathBuf,
    pub runs: usize,
    pub base_seed: u64,
    pub tau: f64,
    pub sampling: SamplingConfig,
    pub scorer_regime: Regime,
}

impl BenchmarkConfig {
    fn with_out(out: PathBuf) -> Self {
        Self {
            denoiser: default_checkpoint(TrainKind::Denoiser, Regime::NoiseAware),
            scorer: default_checkpoint(TrainKind::Scorer, Regime::NoiseAware),
            eval_scorer: default_checkpoint(TrainKind::EvalScorer, Regime::Vanilla),
            out,
            runs: 20,
            base_seed: 1000,
            tau: DEFAULT_TAU,
            sampling: SamplingConfig::default(),
            scorer_regime: Regime::NoiseAware,
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
    #[arg(long)]
    pub scorer: Option<PathBuf>,
    #[arg(long)]
    pub eval_scorer: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of benchmark cases (class pairs cycled with fresh seeds).
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub base_seed: Option<u64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_parser = parse_regime)]
    pub scorer_regime: Option<Regime>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

impl BenchmarkArgs {
    fn apply(self, c: &mut BenchmarkConfig) -> Result<()> {
        config::set(&mut c.denoiser, self.denoiser);
        config::set(&mut c.scorer, self.scorer);
        config::set(&mut c.eval_scorer, self.eval_scorer);
        config::set(&mut c.out, self.out);
        config::set(&mut c.runs, self.runs);
        config::set(&mut c.base_seed, self.base_seed);
        config::set(&mut c.tau, self.tau);
        config::set(&mut c.scorer_regime, self.scorer_regime);
        self.sampling.apply(&mut c.sampling);
        if c.runs == 0 {
            return Err(crate::usage("--runs must be at least 1"));
        }
        c.sampling.validate()
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated overlap targets, each in [0, 0.5].
    #[arg(long, value_delimiter = ',')]
    pub phi_grid: Option<Vec<f64>>,
    #[command(flatten)]
    pub common: BenchmarkArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub phi_grid: Vec<f64>,
    #[serde(flatten)]
    pub common: BenchmarkConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            phi_grid: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.45, 0.5],
            common: BenchmarkConfig::with_out(config::data_root().join("sweep-phi")),
        }
    }
}

pub fn run_sweep(args: SweepArgs) -> Result<()> {
    let mut cfg = config::overlay(SweepConfig::default(), args.common.config.as_deref())?;
    config::set(&mut cfg.phi_grid, args.phi_grid);
    args.common.apply(&mut cfg.common)?;
    if cfg.phi_grid.is_empty() {
        return Err(crate::usage("--phi-grid is empty"));
    }
    if let Some(bad) = cfg.phi_grid.iter().find(|p| !(0.0..=0.5).contains(*p)) {
        return Err(crate::usage(format!("phi {bad} outside [0, 0.5]")));
    }
    sweep_phi(&cfg)
}

pub fn sweep_phi(cfg: &SweepConfig) -> Result<()> {
    let c = &cfg.common;
    let denoiser = load_denoiser(&c.denoiser)?;
    let eval = load_scorer(&c.eval_scorer)?;
    let schedule = schedule_for(&denoiser)?;
    let cases = toy_benchmark(denoiser.config.num_concepts, c.runs, c.base_seed);
    config::ensure_dir(&c.out)?;
    let mut agg = csv_writer(&c.out.join("phi_sweep.csv"))?;
    agg.write_record(["phi", "runs", "a_min", "concealment", "a_avg"])?;
    let mut per_run = csv_writer(&c.out.join("phi_sweep_runs.csv"))?;
    per_run.write_record(["phi", "case", "seed", "a_min", "concealment", "a_avg"])?;
    let aso_only = Toggles {
        aso: true,
        ..Toggles::BASELINE
    };
    for &phi in &cfg.phi_grid {
        let mut template = c.sampling.template(c.scorer_regime);
        template.aso.phi = phi;
        let mut rows = Vec::with_capacity(cases.len());
        for (i, case) in cases.iter().enumerate() {
            let run = RunConfig {
                tasks: case.tasks.clone(),
                seed: case.seed,
                toggles: aso_only,
                ..template.clone()
            };
            let (img, _) = generate(&run, &denoiser, None, &schedule)?;
            let m = summarize(&score_matrix(&eval, &img, &case.tasks)?, c.tau)?;
            let mut row = vec![phi.to_string(), i.to_string(), case.seed.to_string()];
            row.extend(metric_fields(&m));
            per_run.write_record(&row)?;
            rows.push(m);
        }
        let mean = mean_summary(&rows).expect("runs >= 1");
        let mut row = vec![phi.to_string(), rows.len().to_string()];
        row.extend(metric_fields(&mean));
        agg.write_record(&row)?;
        eprintln!("phi {phi}: A_min {:.4}  C {:.4}  A_avg {:.4}", mean.a_min, mean.concealment, mean.a_avg);
    }
    agg.flush()?;
    per_run.flush()?;
    config::write_resolved(&c.out.join(RESOLVED_CONFIG), cfg)
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub common: BenchmarkArgs,
}

pub fn run_ablation_cmd(args: AblationArgs) -> Result<()> {
    let defaults = BenchmarkConfig::with_out(config::data_root().join("ablation"));
    let mut cfg = config::overlay(defaults, args.common.config.as_deref())?;
    args.common.apply(&mut cfg)?;
    ablation(&cfg).map(|_| ())
}

pub fn ablation(c: &BenchmarkConfig) -> Result<Vec<AblationRow>> {
    let denoiser = load_denoiser(&c.denoiser)?;
    let scorer = load_scorer(&c.scorer)?;
    let eval = load_scorer(&c.eval_scorer)?;
    let schedule = schedule_for(&denoiser)?;
    let cases = toy_benchmark(denoiser.config.num_concepts, c.runs, c.base_seed);
    let template = c.sampling.template(c.scorer_regime);
    let models = BenchmarkModels {
        denoiser: &denoiser,
        pipeline_scorer: Some(&scorer),
        eval_scorer: &eval,
        schedule: &schedule,
    };
    let rows = run_ablation(&Toggles::grid(), &cases, &template, &models, c.tau)?;
    config::ensure_dir(&c.out)?;
    let mut agg = csv_writer(&c.out.join("ablation.csv"))?;
    agg.write_record(["toggles", "aso", "nvb", "nvr", "runs", "a_min", "concealment", "a_avg"])?;
    let mut per_run = csv_writer(&c.out.join("ablation_runs.csv"))?;
    per_run.write_record(["toggles", "case", "seed", "a_min", "concealment", "a_avg"])?;
    for r in &rows {
        let t = r.toggles;
        let mut row = vec![
            t.label(),
            t.aso.to_string(),
            t.nvb.to_string(),
            t.nvr.to_string(),
            r.runs.len().to_string(),
        ];
        row.extend(metric_fields(&r.mean));
        agg.write_record(&row)?;
        for m in &r.runs {
            let mut row = vec![t.label(), m.case.to_string(), m.seed.to_string()];
            row.extend(metric_fields(&m.summary));
            per_run.write_record(&row)?;
        }
        eprintln!(
            "{:12} A_min {:.4}  C {:.4}  A_avg {:.4}",
            t.label(),
            r.mean.a_min,
            r.mean.concealment,
            r.mean.a_avg
        );
    }
    agg.flush()?;
    per_run.flush()?;
    config::write_resolved(&c.out.join(RESOLVED_CONFIG), c)?;
    Ok(rows)
}
