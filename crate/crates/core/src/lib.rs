//! Visual anagrams from a small from-scratch diffusion model: one image,
//! several concepts, each visible under its own orthogonal view.
//!
//! A sampling run ([`pipeline::generate`]) predicts noise under every view,
//! balances the predictions by how complete each concept already looks,
//! rescales their weighted sum back to unit variance, and nudges the
//! intermediate image so the concepts' attention maps overlap.

pub mod aso;
pub mod checkpoint;
pub mod combine;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod real;
pub mod schedule;
pub mod scorer;
pub mod stats;
pub mod tensor;
pub mod views;

pub use denoiser::{ConceptId, Denoiser, DenoiserConfig};
pub use error::{Error, Result};
pub use pipeline::{generate, GenerationTask, RunConfig, RunTrace, Toggles};
pub use schedule::DiffusionSchedule;
pub use scorer::{Regime, Scorer, ScorerConfig};
pub use tensor::{Image, ImageTensor};
pub use views::ViewTransform;
