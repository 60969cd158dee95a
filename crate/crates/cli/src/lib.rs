//! Cohort-level driver for the `hac-refine` command.

pub mod config;
pub mod error;
pub mod stages;

pub use config::{OutputPolicy, PhantomCohort, PipelineConfig};
pub use error::CliError;
pub use stages::{Runner, Stage, StageOutcome};

/// Environment variable that replaces the phantom seed.
pub const SEED_ENV: &str = "HAC_REFINE_SEED";

/// Applies `HAC_REFINE_SEED` when it holds an unsigned integer.
pub fn apply_seed_override(cfg: &mut PipelineConfig, value: Option<&str>) -> Result<(), CliError> {
    if let Some(v) = value {
        cfg.phantom.spec.seed =
            v.trim().parse().map_err(|_| CliError::Config(format!("{SEED_ENV}={v} is not a seed")))?;
    }
    Ok(())
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/pipeline.md")]
pub struct PipelineChapter;
