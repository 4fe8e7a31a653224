//! Filtering of unnecessary machine-unlearning requests.
//!
//! A removal request is unnecessary when the remaining data already holds
//! enough samples similar to it that retraining without it would barely move
//! the model. The crate builds the similarity structure, derives the filter
//! parameters from a reference model, partitions requests, and provides the
//! surrounding evaluation: score-based baselines, a sharded retraining cost
//! simulator and an executable check of the KL-divergence guarantee.

pub mod baselines;
pub mod data;
pub mod distance;
pub mod error;
pub mod filter;
pub mod models;
pub mod numkit;
pub mod pipeline;
pub mod privacy;
pub mod simcond;
pub mod sisa;

pub use baselines::{Method, ScoreTable, ThresholdRule, Thresholds};
pub use data::{RawDataset, RemovalScenario, ScenarioSplits};
pub use distance::{DistanceMatrix, FeatureSet, Split};
pub use error::{Error, Result};
pub use filter::{FilterResult, ScenarioKind};
pub use models::{Arch, Classifier, ToyModel, TrainConfig};
pub use numkit::{Matrix, SeededRng};
pub use pipeline::{Offline, PipelineConfig};
pub use privacy::{BoundReport, NeiMap};
pub use simcond::{AlphaMode, SimilarityParams};
pub use sisa::{SisaEnsemble, SisaPlan, UnlearnOutcome};
