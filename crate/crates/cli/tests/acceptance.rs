//! Acceptance gate: every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line. Trained models are cached under the cargo target
//! temp directory and reused while their configuration is unchanged.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use amtl_core::aso::{anti_seg_loss, map_from_values};
use amtl_core::data::make_dataset;
use amtl_core::denoiser::{train_denoiser, DenoiserTrainConfig};
use amtl_core::metrics::DEFAULT_TAU;
use amtl_core::pipeline::{
    generate, generate_observed, run_ablation, toy_benchmark, BenchmarkModels, RunTrace, Toggles,
};
use amtl_core::schedule::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TRAIN_STEPS};
use amtl_core::scorer::{train_scorer, ScorerTrainConfig};
use amtl_core::stats::{correlation_estimator, exponent_schedule, variance_restoration, StatsConfig};
use amtl_core::{
    Denoiser, DenoiserConfig, DiffusionSchedule, GenerationTask, Image, ImageTensor, Regime, RunConfig, Scorer,
    ScorerConfig, ViewTransform,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- models

const DENOISER_DATA_PER_CLASS: usize = 200;
const DENOISER_EPOCHS: usize = 60;
const SCORER_DATA_PER_CLASS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FixtureSpec {
    denoiser_data: (usize, u64),
    denoiser: DenoiserConfig,
    denoiser_train: DenoiserTrainConfig,
    scorer_data: (usize, u64),
    scorer: ScorerConfig,
    scorer_train: ScorerTrainConfig,
    eval_data: (usize, u64),
    eval: ScorerConfig,
    eval_train: ScorerTrainConfig,
}

impl FixtureSpec {
    fn new() -> Self {
        Self {
            denoiser_data: (DENOISER_DATA_PER_CLASS, 0),
            denoiser: DenoiserConfig::default(),
            denoiser_train: DenoiserTrainConfig {
                epochs: DENOISER_EPOCHS,
                ..DenoiserTrainConfig::default()
            },
            scorer_data: (SCORER_DATA_PER_CLASS, 0),
            scorer: ScorerConfig::default(),
            scorer_train: ScorerTrainConfig::default(),
            eval_data: (SCORER_DATA_PER_CLASS, 1),
            eval: ScorerConfig {
                width: 12,
                embed_dim: 48,
                ..ScorerConfig::default()
            },
            eval_train: ScorerTrainConfig {
                seed: 1,
                ..ScorerTrainConfig::default()
            },
        }
    }
}

struct Fixture {
    dir: PathBuf,
    denoiser: Denoiser,
    noise_aware: Scorer,
    vanilla: Scorer,
    eval: Scorer,
    schedule: DiffusionSchedule,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn fixture() -> Fixture {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-models");
    fs::create_dir_all(&dir).unwrap();
    let spec = FixtureSpec::new();
    let spec_path = dir.join("spec.json");
    let cached = fs::read(&spec_path)
        .ok()
        .and_then(|b| serde_json::from_slice::<FixtureSpec>(&b).ok())
        .is_some_and(|s| s == spec);
    let schedule = DiffusionSchedule::linear(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
    let names = ["denoiser.ckpt", "scorer-noise_aware.ckpt", "scorer-vanilla.ckpt", "eval-scorer.ckpt"];
    if cached && names.iter().all(|n| dir.join(n).is_file()) {
        eprintln!("reusing cached models in {}", dir.display());
    } else {
        let _ = fs::remove_file(&spec_path);
        let t0 = Instant::now();
        let data = make_dataset(spec.denoiser_data.0, spec.denoiser_data.1).unwrap();
        let (d, _) = train_denoiser(&data, &spec.denoiser, &schedule, &spec.denoiser_train).unwrap();
        d.save(&dir.join(names[0])).unwrap();
        eprintln!("trained denoiser in {:.0?}", t0.elapsed());
        let sdata = make_dataset(spec.scorer_data.0, spec.scorer_data.1).unwrap();
        for (regime, name) in [(Regime::NoiseAware, names[1]), (Regime::Vanilla, names[2])] {
            let (s, _) = train_scorer(&sdata, &schedule, regime, &spec.scorer, &spec.scorer_train).unwrap();
            s.save(&dir.join(name)).unwrap();
        }
        let edata = make_dataset(spec.eval_data.0, spec.eval_data.1).unwrap();
        let (e, _) = train_scorer(&edata, &schedule, Regime::Vanilla, &spec.eval, &spec.eval_train).unwrap();
        e.save(&dir.join(names[3])).unwrap();
        fs::write(&spec_path, serde_json::to_vec_pretty(&spec).unwrap()).unwrap();
        eprintln!("trained all models in {:.0?}", t0.elapsed());
    }
    Fixture {
        denoiser: Denoiser::load(&dir.join(names[0])).unwrap(),
        noise_aware: Scorer::load(&dir.join(names[1])).unwrap(),
        vanilla: Scorer::load(&dir.join(names[2])).unwrap(),
        eval: Scorer::load(&dir.join(names[3])).unwrap(),
        dir,
        schedule,
    }
}

// ------------------------------------------------------------ criteria

fn variance_criterion() -> Outcome {
    let t0 = Instant::now();
    let rows = variance_restoration(&StatsConfig::default()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let failed: Vec<String> = rows.iter().filter(|r| !r.passed).map(|r| format!("{} = {}", r.name, r.value)).collect();
    let worst_var = rows
        .iter()
        .filter(|r| r.name.ends_with("variance"))
        .map(|r| (r.value - 1.0).abs())
        .fold(0.0, f64::max);
    let worst_mean = rows
        .iter()
        .filter(|r| r.name.ends_with("mean"))
        .map(|r| r.value.abs())
        .fold(0.0, f64::max);
    outcome(
        failed.is_empty() && secs < 10.0,
        format!(
            "{} checks over 1e6 elements, max |var-1| {worst_var:.4} (tol 0.02), max |mean| {worst_mean:.4} (tol 0.01), {secs:.1}s (limit 10s){}",
            rows.len(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

fn correlation_criterion() -> Outcome {
    let t0 = Instant::now();
    let rows = correlation_estimator(&StatsConfig::default()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let fracs: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.value)).collect();
    outcome(
        rows.iter().all(|r| r.passed) && secs < 30.0,
        format!(
            "coverage within 3/sqrt(CHW) per rho [-0.5, 0, 0.5, 0.9, 1]: [{}] (need 0.95), 1000 trials each, {secs:.1}s (limit 30s)",
            fracs.join(", ")
        ),
    )
}

/// Multi-prompt DDPM sampling written from scratch against the training
/// schedule: average the guided predictions in the canonical frame, then take
/// the ancestral step over the strided interval.
fn plain_averaging_sampler(
    d: &Denoiser,
    schedule: &DiffusionSchedule,
    tasks: &[GenerationTask],
    seed: u64,
    steps: usize,
    guidance: f64,
) -> Vec<ImageTensor> {
    let total = schedule.steps();
    let tau = |k: usize| ((k * total) as f64 / steps as f64).round() as usize;
    let size = d.config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Image::standard_normal(1, size, size, &mut rng);
    let mut path = vec![x.clone()];
    for k in (1..=steps).rev() {
        let t = tau(k);
        let mut sum = vec![0.0f32; x.len()];
        for task in tasks {
            let viewed = task.view.apply(&x).unwrap();
            let (e, _) = d.cfg_predict(&viewed, t, task.concept, guidance).unwrap();
            let back = task.view.invert().apply(&e).unwrap();
            sum.iter_mut().zip(&back.data).for_each(|(s, v)| *s += v);
        }
        let inv_n = 1.0 / tasks.len() as f32;
        let ab = schedule.alpha_bar(t).unwrap();
        let beta = 1.0 - ab / schedule.alpha_bar(tau(k - 1)).unwrap();
        let scale = (1.0 / (1.0 - beta).sqrt()) as f32;
        let coef = (beta / (1.0 - ab).sqrt()) as f32;
        let sigma = beta.sqrt() as f32;
        let z = (k > 1).then(|| Image::<f32>::standard_normal(1, size, size, &mut rng));
        for (i, xv) in x.data.iter_mut().enumerate() {
            let mut next = scale * (*xv - coef * (sum[i] * inv_n));
            if let Some(z) = &z {
                next += sigma * z.data[i];
            }
            *xv = next;
        }
        path.push(x.clone());
    }
    path
}

fn baseline_equivalence_criterion(f: &Fixture) -> Outcome {
    let cases = [
        (3, ViewTransform::Identity, 6, ViewTransform::FlipVertical, 11),
        (0, ViewTransform::Identity, 9, ViewTransform::Rot90Cw, 12),
        (4, ViewTransform::FlipHorizontal, 1, ViewTransform::Rot180, 13),
    ];
    let mut compared = 0usize;
    let mut mismatches = 0usize;
    for (a, va, b, vb, seed) in cases {
        let tasks = vec![
            GenerationTask { concept: a, view: va },
            GenerationTask { concept: b, view: vb },
        ];
        let cfg = RunConfig {
            tasks: tasks.clone(),
            seed,
            toggles: Toggles::BASELINE,
            ..RunConfig::default()
        };
        let mut path = Vec::new();
        generate_observed(&cfg, &f.denoiser, None, &f.schedule, |_, x| path.push(x.clone())).unwrap();
        let oracle = plain_averaging_sampler(&f.denoiser, &f.schedule, &tasks, seed, cfg.steps, cfg.guidance_scale);
        if path.len() != oracle.len() {
            mismatches += 1;
            continue;
        }
        for (p, o) in path.iter().zip(&oracle) {
            compared += p.len();
            mismatches += p.data.iter().zip(&o.data).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
        }
    }
    outcome(
        mismatches == 0,
        format!("3 two-view runs x 31 states, {compared} values compared bitwise, {mismatches} differ"),
    )
}

fn aso_gradient_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let configs = 24;
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..configs {
        let heads = rng.random_range(1..=2);
        let cfg = DenoiserConfig {
            image_size: [8, 12][rng.random_range(0..2)],
            channels: 1,
            base_channels: rng.random_range(2..=3),
            mid_channels: 2 * heads,
            context_dim: rng.random_range(3..=5),
            heads,
            time_dim: 4,
            time_hidden: rng.random_range(4..=6),
            num_concepts: 4,
            max_timestep: 1000,
        };
        let d = Denoiser::<f64>::new(cfg.clone(), 1000 + i).unwrap();
        let n = rng.random_range(2..=3);
        let mut views = ViewTransform::PRIMARY.to_vec();
        views.shuffle(&mut rng);
        let tasks: Vec<GenerationTask> = (0..n)
            .map(|k| GenerationTask {
                concept: rng.random_range(0..4),
                view: views[k],
            })
            .collect();
        let t = rng.random_range(1..=1000);
        let phi = rng.random_range(0.0..=0.5);
        let s = cfg.image_size;
        let x: Image<f64> = Image::standard_normal(1, s, s, &mut rng);
        let g = d.attention_loss_gradient(&x, t, &tasks, phi).unwrap();
        let h = 1e-6;
        let mut probe = x.clone();
        let mut numeric = Vec::with_capacity(x.len());
        for p in 0..x.len() {
            let orig = probe.data[p];
            let eval = |v: f64, probe: &mut Image<f64>| {
                probe.data[p] = v;
                anti_seg_loss(&d.concept_maps(probe, t, &tasks).unwrap(), phi).unwrap()
            };
            let up = eval(orig + h, &mut probe);
            let down = eval(orig - h, &mut probe);
            probe.data[p] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let diff: f64 = g.grad.data.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = g.grad.l2_norm().max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt()).max(1e-12);
        let rel = diff / scale;
        worst = worst.max(rel);
        if rel > 1e-3 {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("{configs} random tiny configs, worst relative error {worst:.2e} (tol 1e-3)"),
    )
}

fn closed_form_loss_criterion() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in 2..=6usize {
        let pairs = (n * (n - 1) / 2) as f64;
        let norm = (n * (n - 1)) as f64;
        for phi in [0.0, 0.2, 0.45, 0.5] {
            let base = vec![0.1, 0.4, 0.2, 0.3];
            let identical: Vec<_> = (0..n).map(|i| map_from_values(base.clone(), i).unwrap()).collect();
            let got = anti_seg_loss(&identical, phi).unwrap();
            worst = worst.max((got - (phi - 0.5).abs() * pairs / norm).abs());
            // Each map owns its own cells of a 4x4 grid.
            let disjoint: Vec<_> = (0..n)
                .map(|i| {
                    let mut v = vec![0.0; 16];
                    v[i] = 1.0 + i as f64;
                    v[i + 8] = 0.5;
                    map_from_values(v, i).unwrap()
                })
                .collect();
            let got = anti_seg_loss(&disjoint, phi).unwrap();
            worst = worst.max((got - phi * pairs / norm).abs());
            cases += 2;
        }
    }
    outcome(worst <= 1e-6, format!("{cases} identical/disjoint cases for N=2..6, max error {worst:.1e} (tol 1e-6)"))
}

fn weight_schedule_criterion() -> Outcome {
    let rows = exponent_schedule(&StatsConfig::default()).unwrap();
    let detail: Vec<String> = rows
        .iter()
        .map(|r| format!("{} = {} ({})", r.name, r.value, r.tolerance))
        .collect();
    outcome(rows.iter().all(|r| r.passed), detail.join("; "))
}

fn view_group_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x: ImageTensor = Image::standard_normal(1, 32, 32, &mut rng);
    let mut composition_ok = 0;
    for a in ViewTransform::PRIMARY {
        for b in ViewTransform::PRIMARY {
            let direct = a.compose(b).apply(&x).unwrap();
            let chained = a.apply(&b.apply(&x).unwrap()).unwrap();
            if direct == chained {
                composition_ok += 1;
            }
        }
    }
    let mut inverse_ok = 0;
    let mut norm_ok = 0;
    let sorted_bits = |img: &ImageTensor| {
        let mut v: Vec<u32> = img.data.iter().map(|f| f.to_bits()).collect();
        v.sort_unstable();
        v
    };
    let reference = sorted_bits(&x);
    for v in ViewTransform::PRIMARY {
        let y = v.apply(&x).unwrap();
        if v.invert().apply(&y).unwrap() == x && v.compose(v.invert()) == ViewTransform::Identity {
            inverse_ok += 1;
        }
        if sorted_bits(&y) == reference {
            norm_ok += 1;
        }
    }
    outcome(
        composition_ok == 36 && inverse_ok == 6 && norm_ok == 6,
        format!("compositions exact {composition_ok}/36, inverses exact {inverse_ok}/6, norm-preserving permutations {norm_ok}/6"),
    )
}

const BENCHMARK_RUNS: usize = 45;

fn ablation_criterion(f: &Fixture) -> Outcome {
    let t0 = Instant::now();
    let cases = toy_benchmark(10, BENCHMARK_RUNS, 5000);
    let models = BenchmarkModels {
        denoiser: &f.denoiser,
        pipeline_scorer: Some(&f.noise_aware),
        eval_scorer: &f.eval,
        schedule: &f.schedule,
    };
    let rows = run_ablation(&Toggles::grid(), &cases, &RunConfig::default(), &models, DEFAULT_TAU).unwrap();
    for r in &rows {
        eprintln!(
            "    {:12} A_min {:+.4}  C {:.4}  A_avg {:+.4}",
            r.toggles.label(),
            r.mean.a_min,
            r.mean.concealment,
            r.mean.a_avg
        );
    }
    let base = rows.iter().find(|r| r.toggles == Toggles::BASELINE).unwrap().mean;
    let full = rows.iter().find(|r| r.toggles == Toggles::FULL).unwrap().mean;
    let best_avg = rows.iter().map(|r| r.mean.a_avg).fold(f64::MIN, f64::max);
    let best_label = rows
        .iter()
        .find(|r| r.mean.a_avg == best_avg)
        .map(|r| r.toggles.label())
        .unwrap();
    let min_ok = full.a_min > base.a_min;
    let avg_ok = full.a_avg > base.a_avg;
    let best_ok = full.a_avg >= best_avg;
    outcome(
        min_ok && avg_ok && best_ok,
        format!(
            "{BENCHMARK_RUNS} two-view runs x 8 combos, 30 steps: A_min full {:+.4} vs baseline {:+.4} [{}]; A_avg full {:+.4} vs baseline {:+.4} [{}]; best A_avg {best_label} {:+.4} [{}]; {:.0}s",
            full.a_min,
            base.a_min,
            if min_ok { "ok" } else { "not better" },
            full.a_avg,
            base.a_avg,
            if avg_ok { "ok" } else { "not better" },
            best_avg,
            if best_ok { "full is best" } else { "full is not best" },
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn baseline_traces(f: &Fixture, scorer: &Scorer, runs: usize) -> Vec<RunTrace> {
    toy_benchmark(10, runs, 9000)
        .into_iter()
        .map(|case| {
            let cfg = RunConfig {
                tasks: case.tasks,
                seed: case.seed,
                toggles: Toggles::BASELINE,
                scorer_regime: scorer.regime,
                ..RunConfig::default()
            };
            generate(&cfg, &f.denoiser, Some(scorer), &f.schedule).unwrap().1
        })
        .collect()
}

fn mean_abs_step_delta(traces: &[RunTrace]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for tr in traces {
        for w in tr.records.windows(2) {
            let (a, b) = (w[0].scores.as_ref().unwrap(), w[1].scores.as_ref().unwrap());
            for (x, y) in a.iter().zip(b) {
                total += (x - y).abs();
                count += 1;
            }
        }
    }
    total / count as f64
}

fn smoothness_criterion(na: &[RunTrace], vanilla: &[RunTrace]) -> Outcome {
    let same_images = na.iter().zip(vanilla).all(|(a, b)| a.final_image == b.final_image);
    let (d_na, d_v) = (mean_abs_step_delta(na), mean_abs_step_delta(vanilla));
    outcome(
        same_images && d_na < d_v,
        format!(
            "{} identical baseline runs: mean |dCS| per step noise-aware {d_na:.4} vs vanilla {d_v:.4}",
            na.len()
        ),
    )
}

fn correlation_trace_criterion(traces: &[RunTrace]) -> Outcome {
    let steps = traces[0].records.len();
    let late = |field: fn(&amtl_core::pipeline::StepRecord) -> f64| {
        let vals: Vec<f64> = traces
            .iter()
            .flat_map(|t| t.records.iter().filter(|r| r.step <= steps / 2).map(field))
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let cos = late(|r| r.noise_cosine[0]);
    let rho = late(|r| r.rho[0]);
    let early_cos = traces
        .iter()
        .flat_map(|t| t.records.iter().filter(|r| r.step > steps / 2).map(|r| r.noise_cosine[0]))
        .sum::<f64>()
        / (traces.len() * (steps - steps / 2)) as f64;
    outcome(
        cos > 0.5 && rho > 0.5,
        format!(
            "{} two-view baseline runs, late half mean cosine {cos:.3}, mean rho {rho:.3} (need > 0.5); early half cosine {early_cos:.3}",
            traces.len()
        ),
    )
}

fn amtl(args: &[&str], root: &Path) -> bool {
    let out = Command::new(env!("CARGO_BIN_EXE_amtl"))
        .args(args)
        .env("AMTL_DATA_DIR", root)
        .output()
        .unwrap();
    if !out.status.success() {
        eprintln!("amtl {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.success()
}

fn replay_config(from: &Path, to: &Path, out: &Path) {
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(from).unwrap()).unwrap();
    v["out"] = serde_json::json!(out);
    fs::write(to, v.to_string()).unwrap();
}

fn determinism_criterion(f: &Fixture) -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let p = |n: &str| r.join(n).to_str().unwrap().to_string();
    let den = f.path("denoiser.ckpt");
    let sc = f.path("scorer-noise_aware.ckpt");
    let ev = f.path("eval-scorer.ckpt");
    let (den, sc, ev) = (den.to_str().unwrap(), sc.to_str().unwrap(), ev.to_str().unwrap());
    let mut ok = true;
    let mut compared = Vec::new();

    let gen = |out: &str| {
        vec![
            "generate", "--denoiser", den, "--scorer", sc, "--concepts", "star,crescent", "--views", "identity,flip_v",
            "--seed", "21", "--out",
        ]
        .into_iter()
        .map(String::from)
        .chain([out.to_string()])
        .collect::<Vec<_>>()
    };
    for out in ["gen-a", "gen-b"] {
        ok &= amtl(&gen(&p(out)).iter().map(String::as_str).collect::<Vec<_>>(), r);
    }
    replay_config(&r.join("gen-a/config.json"), &r.join("gen-replay.json"), &r.join("gen-c"));
    ok &= amtl(&["generate", "--config", &p("gen-replay.json")], r);
    for f in ["trace.csv", "image.raw"] {
        compared.push((format!("gen-a/{f}"), format!("gen-b/{f}")));
        compared.push((format!("gen-a/{f}"), format!("gen-c/{f}")));
    }

    for out in ["abl-a", "abl-b"] {
        ok &= amtl(
            &[
                "ablation", "--denoiser", den, "--scorer", sc, "--eval-scorer", ev, "--runs", "2", "--steps", "10",
                "--out", &p(out),
            ],
            r,
        );
    }
    replay_config(&r.join("abl-a/config.json"), &r.join("abl-replay.json"), &r.join("abl-c"));
    ok &= amtl(&["ablation", "--config", &p("abl-replay.json")], r);
    for f in ["ablation.csv", "ablation_runs.csv"] {
        compared.push((format!("abl-a/{f}"), format!("abl-b/{f}")));
        compared.push((format!("abl-a/{f}"), format!("abl-c/{f}")));
    }

    for out in ["sweep-a", "sweep-b"] {
        ok &= amtl(
            &[
                "sweep-phi", "--denoiser", den, "--eval-scorer", ev, "--phi-grid", "0.2,0.45", "--runs", "2",
                "--steps", "10", "--out", &p(out),
            ],
            r,
        );
    }
    compared.push(("sweep-a/phi_sweep.csv".into(), "sweep-b/phi_sweep.csv".into()));

    for out in ["eval-a.csv", "eval-b.csv"] {
        ok &= amtl(&["evaluate", &p("gen-a"), "--eval-scorer", ev, "--out", &p(out)], r);
    }
    compared.push(("eval-a.csv".into(), "eval-b.csv".into()));

    for out in ["bench-a.csv", "bench-b.csv"] {
        ok &= amtl(&["bench", "--out", &p(out)], r);
    }
    compared.push(("bench-a.csv".into(), "bench-b.csv".into()));

    let differing: Vec<String> = compared
        .iter()
        .filter(|(a, b)| fs::read(r.join(a)).ok().is_none() || fs::read(r.join(a)).ok() != fs::read(r.join(b)).ok())
        .map(|(a, b)| format!("{a} vs {b}"))
        .collect();
    outcome(
        ok && differing.is_empty(),
        format!(
            "{} artifact pairs from generate/ablation/sweep-phi/evaluate/bench re-runs and config replays; {}",
            compared.len(),
            if differing.is_empty() { "all byte-identical".to_string() } else { format!("differ: {}", differing.join(", ")) }
        ),
    )
}

fn main() -> ExitCode {
    let names = [
        "variance restoration",
        "correlation estimator",
        "baseline equivalence",
        "ASO gradient",
        "closed-form loss cases",
        "weight schedule",
        "view group",
        "ablation ordering",
        "noise-aware smoothness",
        "noise correlation",
        "determinism",
    ];
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |id: usize, o: Outcome| {
        println!("criterion {id:>2} {} {}: {}", if o.passed { "PASS" } else { "FAIL" }, names[id - 1], o.detail);
        results.push((id, o));
    };
    report(1, variance_criterion());
    report(2, correlation_criterion());
    report(4, aso_gradient_criterion());
    report(5, closed_form_loss_criterion());
    report(6, weight_schedule_criterion());
    report(7, view_group_criterion());
    let f = fixture();
    report(3, baseline_equivalence_criterion(&f));
    report(8, ablation_criterion(&f));
    let na = baseline_traces(&f, &f.noise_aware, 12);
    let vanilla = baseline_traces(&f, &f.vanilla, 12);
    report(9, smoothness_criterion(&na, &vanilla));
    report(10, correlation_trace_criterion(&na));
    report(11, determinism_criterion(&f));

    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.passed).map(|(id, _)| *id).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
