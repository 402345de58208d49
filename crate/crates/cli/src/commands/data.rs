use std::path::PathBuf;

use amtl_core::data::make_dataset;
use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config::{self, RESOLVED_CONFIG};

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// TOML or JSON file with any of the fields below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub out: PathBuf,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            out: config::data_root().join("dataset"),
            per_class: 100,
            seed: 0,
        }
    }
}

impl GenDataArgs {
    pub fn resolve(self) -> Result<GenDataConfig> {
        let mut c = config::overlay(GenDataConfig::default(), self.config.as_deref())?;
        config::set(&mut c.out, self.out);
        config::set(&mut c.per_class, self.per_class);
        config::set(&mut c.seed, self.seed);
        Ok(c)
    }
}

pub fn run(args: GenDataArgs) -> Result<()> {
    let cfg = args.resolve()?;
    if cfg.per_class == 0 {
        return Err(crate::usage("--per-class must be at least 1"));
    }
    let ds = make_dataset(cfg.per_class, cfg.seed)?;
    ds.dump(&cfg.out)
        .with_context(|| format!("writing dataset to {}", cfg.out.display()))?;
    config::write_resolved(&cfg.out.join(RESOLVED_CONFIG), &cfg)?;
    eprintln!("wrote {} images to {}", ds.len(), cfg.out.display());
    Ok(())
}
