use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unlearn_guard::baselines::{CurvatureConfig, ThresholdRule};
use unlearn_guard::data::{load_mnist_idx, synth_blobs};
use unlearn_guard::pipeline::PipelineConfig;
use unlearn_guard::{RawDataset, RemovalScenario};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs { classes: usize, per_class: usize, dims: usize, spread: f64, seed: u64 },
    Mnist { images: PathBuf, labels: PathBuf, limit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMethod {
    Similarity,
    Confidence,
    Curvature,
    Clustering,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SisaSpec {
    pub shards: usize,
    pub slices: usize,
    pub train: unlearn_guard::TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: PipelineConfig,
    pub scenarios: Vec<RemovalScenario>,
    #[serde(default = "default_method")]
    pub method: FilterMethod,
    /// Baselines only.
    #[serde(default)]
    pub threshold_rule: Option<ThresholdRule>,
    #[serde(default)]
    pub curvature: Option<CurvatureConfig>,
    #[serde(default = "default_k")]
    pub clustering_k: usize,
    #[serde(default)]
    pub sisa: Option<SisaSpec>,
    pub output_dir: PathBuf,
}

fn default_method() -> FilterMethod {
    FilterMethod::Similarity
}

fn default_k() -> usize {
    10
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // Relative paths in the config resolve against its directory.
        let base = path.parent().unwrap_or(Path::new("."));
        if let DatasetSpec::Mnist { images, labels, .. } = &mut cfg.dataset {
            *images = base.join(&*images);
            *labels = base.join(&*labels);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        match &self.dataset {
            DatasetSpec::Blobs { classes, per_class, dims, spread, .. } => {
                if *classes < 2 || *per_class < 2 || *dims == 0 || !(*spread > 0.0) {
                    return bad("blobs need classes >= 2, per_class >= 2, dims >= 1, spread > 0".into());
                }
            }
            DatasetSpec::Mnist { limit, .. } => {
                if *limit == 0 {
                    return bad("mnist limit must be >= 1".into());
                }
            }
        }
        if self.model.hidden_dim == 0 {
            return bad("model.hidden_dim must be >= 1".into());
        }
        self.model.train.validate().map_err(|e| CliError::Config(format!("model.train: {e}")))?;
        if self.scenarios.is_empty() {
            return bad("at least one scenario is required".into());
        }
        for (i, sc) in self.scenarios.iter().enumerate() {
            if let RemovalScenario::ClassRemoval { fraction, .. } = sc {
                if !(*fraction > 0.0 && *fraction <= 1.0) {
                    return bad(format!("scenarios[{i}]: fraction must be in (0, 1]"));
                }
            }
        }
        match (self.method, self.threshold_rule) {
            (FilterMethod::Similarity, Some(_)) => {
                return bad("threshold_rule applies to baseline methods only".into());
            }
            (FilterMethod::Curvature, _) if self.model.train.epochs < 2 => {
                return bad("curvature scores need model.train.epochs >= 2".into());
            }
            _ => {}
        }
        if let Some(c) = &self.curvature {
            if c.probes == 0 || !(c.h > 0.0) {
                return bad("curvature needs probes >= 1 and h > 0".into());
            }
        }
        if self.clustering_k == 0 {
            return bad("clustering_k must be >= 1".into());
        }
        if let Some(s) = &self.sisa {
            if s.shards == 0 || s.slices == 0 {
                return bad("sisa shards and slices must be >= 1".into());
            }
            s.train.validate().map_err(|e| CliError::Config(format!("sisa.train: {e}")))?;
        }
        Ok(())
    }

    pub fn rule(&self) -> ThresholdRule {
        self.threshold_rule.unwrap_or(ThresholdRule::Mid)
    }

    /// SHA-256 of the canonical JSON form of the validated config, excluding
    /// `output_dir` so identical runs written elsewhere stay byte-identical.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(&RunConfig { output_dir: PathBuf::new(), ..self.clone() })
            .expect("config serializes");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load_dataset(&self) -> Result<RawDataset, CliError> {
        let stage = |e| CliError::stage("data", e);
        match &self.dataset {
            DatasetSpec::Blobs { classes, per_class, dims, spread, seed } => {
                synth_blobs(*classes, *per_class, *dims, *spread, *seed).map_err(stage)
            }
            DatasetSpec::Mnist { images, labels, limit } => load_mnist_idx(images, labels, *limit).map_err(stage),
        }
    }
}
