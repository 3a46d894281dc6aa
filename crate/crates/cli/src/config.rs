//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use egfs_core::egfs::{RegionExpander, SamplingMode};
use egfs_core::pose_solver::RansacConfig;
use egfs_core::regressor::TrainConfig;
use egfs_core::synth::SceneConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

/// File name of the resolved configuration written next to outputs.
pub const RESOLVED_NAME: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into the scene, training and RANSAC sections.
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// `random`, `egfs` or `quantile:<q>`.
    pub mode: String,
    /// `grow`, `grow:<tol>`, `oracle` or `file:<dir>`.
    pub expander: String,
    /// Keep only above-median-confidence correspondences before RANSAC.
    pub confidence_filter: bool,
    /// Prompt percentages for `train --tau-sweep`.
    pub tau_sweep: Vec<f64>,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub ransac: RansacConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: None,
            out: None,
            checkpoint: None,
            mode: "egfs".into(),
            expander: "grow".into(),
            confidence_filter: true,
            tau_sweep: vec![5.0, 10.0, 15.0, 20.0],
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
            ransac: RansacConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub mode: Option<String>,
    pub expander: Option<String>,
    pub tau: Option<f64>,
    pub epochs: Option<usize>,
    pub no_confidence: bool,
    pub no_filter: bool,
}

/// A validated configuration with parsed mode and expander.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub mode: SamplingMode,
    pub expander: RegionExpander,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if o.dataset.is_some() {
            self.dataset.clone_from(&o.dataset);
        }
        if o.out.is_some() {
            self.out.clone_from(&o.out);
        }
        if o.checkpoint.is_some() {
            self.checkpoint.clone_from(&o.checkpoint);
        }
        if let Some(m) = &o.mode {
            self.mode.clone_from(m);
        }
        if let Some(e) = &o.expander {
            self.expander.clone_from(e);
        }
        if let Some(t) = o.tau {
            self.train.tau_prompt_pct = t;
        }
        if let Some(e) = o.epochs {
            self.train.epochs_total = e;
        }
        if o.no_confidence {
            self.train.use_confidence = false;
        }
        if o.no_filter {
            self.confidence_filter = false;
        }
        self.scene.seed = self.seed;
        self.train.seed = self.seed;
        self.ransac.seed = self.seed;
        self
    }

    pub fn resolve(self) -> Result<Resolved, UsageError> {
        let mode = self.mode.parse().map_err(UsageError)?;
        let expander = self.expander.parse().map_err(UsageError)?;
        self.scene.validate().map_err(|e| UsageError(e.to_string()))?;
        self.train.validate().map_err(|e| UsageError(e.to_string()))?;
        if !(self.ransac.inlier_threshold_px > 0.0) || self.ransac.max_hypotheses == 0 || self.ransac.min_inliers < 3 {
            return Err(UsageError("ransac needs inlier_threshold_px > 0, max_hypotheses > 0, min_inliers >= 3".into()));
        }
        if let Some(t) = self.tau_sweep.iter().find(|t| !(**t > 0.0 && **t <= 100.0)) {
            return Err(UsageError(format!("tau_sweep values must be in (0, 100], got {t}")));
        }
        Ok(Resolved { config: self, mode, expander })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

impl Resolved {
    pub fn dataset(&self) -> Result<&Path, UsageError> {
        self.config.dataset.as_deref().ok_or_else(|| UsageError("no dataset given (--dataset or `dataset` in the config)".into()))
    }

    pub fn out(&self) -> Result<&Path, UsageError> {
        self.config.out.as_deref().ok_or_else(|| UsageError("no output directory given (--out or `out` in the config)".into()))
    }

    /// The configured checkpoint, or `<out>/checkpoint.bin`; must exist.
    pub fn checkpoint(&self) -> Result<PathBuf, UsageError> {
        let path = match &self.config.checkpoint {
            Some(p) => p.clone(),
            None => self.out()?.join(crate::commands::CHECKPOINT_NAME),
        };
        if !path.is_file() {
            return Err(UsageError(format!("checkpoint {} does not exist", path.display())));
        }
        Ok(path)
    }
}
