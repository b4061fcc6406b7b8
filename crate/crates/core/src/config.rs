//! Run configuration: one strict JSON document covering generation, model,
//! training, and analysis. Unknown keys are rejected and every field has a
//! default, so a config file only needs the values it overrides. The fully
//! resolved config is echoed into each output directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::FeatureKind;
use crate::policy::ModelConfig;
use crate::synthworld::GenConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub k: usize,
    pub feature: FeatureKind,
    pub tsne_perplexity: f64,
    pub tsne_iters: usize,
    /// Pooled splits can exceed what exact t-SNE handles comfortably; larger
    /// inputs are subsampled deterministically to this many points.
    pub tsne_max_points: usize,
    pub silhouette_k_min: usize,
    pub silhouette_k_max: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            k: 6,
            feature: FeatureKind::Embedding,
            tsne_perplexity: 30.0,
            tsne_iters: 500,
            tsne_max_points: 2000,
            silhouette_k_min: 4,
            silhouette_k_max: 8,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > 8 {
            return Err(Error::Config(format!("k must be in 1..=8, got {}", self.k)));
        }
        if self.tsne_perplexity < 2.0 {
            return Err(Error::Config(format!(
                "tsne_perplexity must be >= 2, got {}",
                self.tsne_perplexity
            )));
        }
        if self.silhouette_k_min < 2 || self.silhouette_k_min > self.silhouette_k_max {
            return Err(Error::Config(format!(
                "bad silhouette sweep range {}..={}",
                self.silhouette_k_min, self.silhouette_k_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.analysis.validate()
    }

    /// Write the fully resolved config into an output directory.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}
