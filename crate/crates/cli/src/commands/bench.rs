use std::path::PathBuf;

use amtl_core::stats::{run_suite, CheckResult, StatsConfig};
use anyhow::Result;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config;

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the table as CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Side of the square sample for the variance checks.
    #[arg(long)]
    pub variance_side: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub trial_side: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub out: Option<PathBuf>,
    pub stats: StatsConfig,
}

pub fn run(args: BenchArgs) -> Result<()> {
    let mut cfg = config::overlay(BenchConfig::default(), args.config.as_deref())?;
    config::set(&mut cfg.stats.seed, args.seed);
    config::set(&mut cfg.stats.variance_side, args.variance_side);
    config::set(&mut cfg.stats.trials, args.trials);
    config::set(&mut cfg.stats.trial_side, args.trial_side);
    if args.out.is_some() {
        cfg.out = args.out;
    }
    if cfg.stats.variance_side == 0 || cfg.stats.trials == 0 || cfg.stats.trial_side == 0 {
        return Err(crate::usage("sample sizes and trial counts must be positive"));
    }
    let results = run_suite(&cfg.stats)?;
    print_table(&results);
    if let Some(out) = &cfg.out {
        write_csv(out, &results)?;
        config::write_resolved(&config::sibling(out, "config.json"), &cfg)?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        anyhow::bail!("{failed} of {} checks failed", results.len());
    }
    Ok(())
}

fn print_table(results: &[CheckResult]) {
    println!("{:<6} {:<12} {:<44} {:>14}  tolerance", "status", "suite", "check", "value");
    for r in results {
        println!(
            "{:<6} {:<12} {:<44} {:>14.6}  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.suite,
            r.name,
            r.value,
            r.tolerance
        );
    }
}

fn write_csv(path: &std::path::Path, results: &[CheckResult]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        config::ensure_dir(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["suite", "check", "value", "tolerance", "passed"])?;
    for r in results {
        w.write_record([&r.suite, &r.name, &r.value.to_string(), &r.tolerance, &r.passed.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
