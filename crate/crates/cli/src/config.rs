use std::path::{Path, PathBuf};

use hac_refine::hybrid::HybridParams;
use hac_refine::phantom::PhantomSpec;
use hac_refine::uncertainty::UncertaintyParams;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// What `refine` writes per case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputPolicy {
    /// Only the final mask.
    #[default]
    RefinedOnly,
    /// The final mask and the binarized ensemble next to it.
    Both,
}

/// Settings for `phantom`: a cohort of synthetic cases around one base spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomCohort {
    pub cases: usize,
    /// Largest member shift in mm; case `k` of `n` uses `jitter_mm * (k + 1) / n`.
    pub jitter_mm: f64,
    /// Padding around the lesion in the generated bounding-box table, in mm.
    pub bbox_margin_mm: f64,
    /// Base case; its member perturbations are replaced per case.
    pub spec: PhantomSpec,
}

impl Default for PhantomCohort {
    fn default() -> Self {
        Self { cases: 4, jitter_mm: 2.0, bbox_margin_mm: 8.0, spec: PhantomSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Raw cases, one directory each.
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Optional world-space crop table; cases must all be listed when set.
    #[serde(default)]
    pub bbox_csv: Option<PathBuf>,
    #[serde(default = "default_spacing")]
    pub target_spacing: [f64; 3],
    #[serde(default)]
    pub uncertainty: UncertaintyParams,
    #[serde(default)]
    pub hybrid: HybridParams,
    #[serde(default)]
    pub output_policy: OutputPolicy,
    /// Worker count; defaults to the available parallelism.
    #[serde(default)]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub phantom: PhantomCohort,
}

fn default_spacing() -> [f64; 3] {
    [1.0; 3]
}

impl PipelineConfig {
    pub fn new(input_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            input_dir: input_dir.into(),
            output_dir: output_dir.into(),
            bbox_csv: None,
            target_spacing: default_spacing(),
            uncertainty: UncertaintyParams::default(),
            hybrid: HybridParams::default(),
            output_policy: OutputPolicy::default(),
            jobs: None,
            phantom: PhantomCohort::default(),
        }
    }

    /// Parses and validates a JSON document. Relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for p in [&mut cfg.input_dir, &mut cfg.output_dir].into_iter().chain(cfg.bbox_csv.as_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: hac_refine::Error| CliError::Config(e.to_string());
        if self.target_spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(CliError::Config(format!("target spacing {:?} must be positive", self.target_spacing)));
        }
        self.uncertainty.validate().map_err(bad)?;
        self.hybrid.validate().map_err(bad)?;
        if self.jobs == Some(0) {
            return Err(CliError::Config("jobs must be at least 1".into()));
        }
        if self.phantom.cases == 0 {
            return Err(CliError::Config("phantom cohort needs at least one case".into()));
        }
        if !(self.phantom.jitter_mm >= 0.0 && self.phantom.bbox_margin_mm >= 0.0) {
            return Err(CliError::Config("phantom jitter and margin must be nonnegative".into()));
        }
        self.phantom.spec.validate().map_err(bad)?;
        Ok(())
    }
}
