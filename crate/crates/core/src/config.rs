//! JSON run configuration.
//!
//! ```json
//! {
//!   "space":    { "m_min": 160, "m_max": 232, "s_m": 8,
//!                 "delta_min": -32, "delta_max": 24, "s_delta": 4, "canvas": 300 },
//!   "search":   { "population_size": 8, "total_epochs": 30, "seed": 1234, "mode": "seq" },
//!   "trainer":  { "kind": "synthetic", "optimum": [192, 4], "noise_sigma": 0.0 },
//!   "template": { "canvas": 300, "output_size": 112, "landmarks": [[105, 125], [195, 125]] },
//!   "io":       { "out_dir": "out" }
//! }
//! ```
//!
//! Every block is optional and falls back to its default; unknown keys are
//! rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affine::{AffineError, BaseTemplate};
use crate::geometry::{GeometryError, SearchSpace};
use crate::search::{SearchConfig, SearchError};
use crate::trainers::{SyntheticTrainer, SyntheticTrainerConfig, TrainerError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config does not match the schema: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Space(#[from] GeometryError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Template(#[from] AffineError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error("template canvas {template} differs from search-space canvas {space}")]
    CanvasMismatch { template: i64, space: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainerSpec {
    Synthetic(SyntheticTrainerConfig),
    /// Placeholder for a trainer implemented outside this crate; the
    /// bundled tools cannot run it.
    External {
        name: String,
    },
}

impl Default for TrainerSpec {
    fn default() -> Self {
        TrainerSpec::Synthetic(SyntheticTrainerConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub out_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub space: SearchSpace,
    pub search: SearchConfig,
    pub trainer: TrainerSpec,
    pub template: BaseTemplate,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_owned(), source })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.space.validate()?;
        self.search.validate()?;
        self.template.validate()?;
        if self.template.canvas != self.space.canvas {
            return Err(ConfigError::CanvasMismatch { template: self.template.canvas, space: self.space.canvas });
        }
        if let TrainerSpec::Synthetic(t) = &self.trainer {
            t.validate()?;
        }
        Ok(())
    }

    /// The synthetic trainer described by this config, seeded with the
    /// search seed. `None` for external trainers.
    pub fn synthetic_trainer(&self) -> Option<Result<SyntheticTrainer, TrainerError>> {
        match &self.trainer {
            TrainerSpec::Synthetic(t) => Some(SyntheticTrainer::new(*t, &self.space, self.search.seed)),
            TrainerSpec::External { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AlignmentPolicy;

    #[test]
    fn empty_object_is_the_default_config() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.space, SearchSpace::default());
    }

    #[test]
    fn doc_example_parses() {
        let cfg = RunConfig::from_json(
            r#"{
              "space": {"m_min": 160, "m_max": 232, "s_m": 8, "delta_min": -32, "delta_max": 24, "s_delta": 4, "canvas": 300},
              "search": {"population_size": 8, "total_epochs": 12, "seed": 7, "mode": "async"},
              "trainer": {"kind": "synthetic", "optimum": [200, 4], "noise_sigma": 0.001},
              "template": {"canvas": 300, "output_size": 112, "landmarks": [[105, 125], [195, 125]]},
              "io": {"out_dir": "runs/a"}
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.search.total_epochs, 12);
        assert_eq!(cfg.search.mode, crate::search::SearchMode::Async);
        let TrainerSpec::Synthetic(t) = cfg.trainer else { panic!() };
        assert_eq!(t.optimum, AlignmentPolicy::new(200, 4));
        assert_eq!(t.peak_acc, 0.9);
        assert_eq!(cfg.template.landmarks.len(), 2);
    }

    #[test]
    fn shipped_config_is_the_default() {
        let cfg = RunConfig::from_json(include_str!("../../../configs/default.json")).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            r#"{"spaces": {}}"#,
            r#"{"search": {"population": 8}}"#,
            r#"{"trainer": {"kind": "synthetic", "optimum": [192, 4], "sigma": 1}}"#,
            r#"{"space": {"m_min": 160, "m_max": 232, "s_m": 8, "delta_min": -32, "delta_max": 24, "s_delta": 4, "canvas": 300, "x": 1}}"#,
            r#"{"io": {"out": "x"}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(ConfigError::Parse(_))), "{text}");
        }
    }

    #[test]
    fn semantic_errors_reported() {
        assert!(matches!(RunConfig::from_json(r#"{"search": {"population_size": 2}}"#), Err(ConfigError::Search(_))));
        assert!(matches!(
            RunConfig::from_json(
                r#"{"template": {"canvas": 600, "output_size": 112, "landmarks": [[250, 300], [350, 300]]}}"#
            ),
            Err(ConfigError::CanvasMismatch { .. })
        ));
        assert!(matches!(
            RunConfig::from_json(
                r#"{"space": {"m_min": 160, "m_max": 236, "s_m": 8, "delta_min": -32, "delta_max": 24, "s_delta": 4, "canvas": 300}}"#
            ),
            Err(ConfigError::Space(_))
        ));
    }

    #[test]
    fn external_trainer_has_no_synthetic_backend() {
        let cfg = RunConfig::from_json(r#"{"trainer": {"kind": "external", "name": "resnet18"}}"#).unwrap();
        assert!(cfg.synthetic_trainer().is_none());
    }
}
