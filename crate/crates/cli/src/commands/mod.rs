pub mod bench;
pub mod data;
pub mod evaluate;
pub mod generate;
pub mod train;

use std::path::Path;

use amtl_core::schedule::{DEFAULT_BETA_END, DEFAULT_BETA_START};
use amtl_core::{Denoiser, DiffusionSchedule, Scorer};
use anyhow::{Context, Result};

pub(crate) fn load_denoiser(path: &Path) -> Result<Denoiser> {
    Denoiser::load(path).with_context(|| format!("loading denoiser {}", path.display()))
}

pub(crate) fn load_scorer(path: &Path) -> Result<Scorer> {
    Scorer::load(path).with_context(|| format!("loading scorer {}", path.display()))
}

/// The training schedule matching a denoiser.
pub(crate) fn schedule_for(d: &Denoiser) -> Result<DiffusionSchedule> {
    Ok(DiffusionSchedule::linear(d.config.max_timestep, DEFAULT_BETA_START, DEFAULT_BETA_END)?)
}
