//! End-to-end filtering: the offline stage (original model, features,
//! similarity matrix, reference model, parameters) and the online filter.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{RawDataset, ScenarioSplits};
use crate::distance::{build_distance_matrix, DistanceMatrix, FeatureSet, Split};
use crate::error::{Error, Result};
use crate::filter::{filter_requests, FilterResult};
use crate::models::{train, Arch, ToyModel, Trained, TrainConfig};
use crate::simcond::{correct_sets, derive_params, AlphaMode, SimilarityParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub hidden_dim: usize,
    /// Training of the original model. The reference model reuses it with a
    /// single epoch.
    pub train: TrainConfig,
    pub init_seed: u64,
    #[serde(default)]
    pub alpha_mode: AlphaMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { hidden_dim: 16, train: TrainConfig::default(), init_seed: 0, alpha_mode: AlphaMode::PerSample }
    }
}

impl PipelineConfig {
    pub fn arch(&self, data: &RawDataset) -> Result<Arch> {
        Arch::new(data.dim(), self.hidden_dim, data.n_classes)
    }

    pub fn reference_train(&self) -> TrainConfig {
        TrainConfig { epochs: 1, ..self.train.clone() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub offline_seconds: f64,
    pub online_seconds: f64,
}

/// Everything the online filter needs, computed once per training set.
#[derive(Debug, Clone)]
pub struct Offline {
    pub arch: Arch,
    pub m_o: Trained,
    pub m_ref: ToyModel,
    pub features: FeatureSet,
    pub matrix: DistanceMatrix,
    pub params: SimilarityParams,
    /// Training ids, sorted.
    pub training: Vec<usize>,
    pub seconds: f64,
}

impl Offline {
    pub fn label(&self, id: usize) -> Result<usize> {
        self.features.label(id)
    }
}

/// Trains a fresh model on the rows `ids` of `data`.
pub fn train_on(data: &RawDataset, ids: &[usize], arch: Arch, cfg: &TrainConfig, init_seed: u64) -> Result<Trained> {
    let (x, y) = data.subset(ids);
    train(&x, &y, arch, cfg, init_seed)
}

/// Offline stage over the training portion `training` (remaining and removal
/// samples together); nothing here depends on which samples are requests.
pub fn prepare(data: &RawDataset, training: &[usize], cfg: &PipelineConfig) -> Result<Offline> {
    let start = Instant::now();
    let arch = cfg.arch(data)?;
    let mut training = training.to_vec();
    training.sort_unstable();
    let (x, y) = data.subset(&training);
    let m_o = train(&x, &y, arch, &cfg.train, cfg.init_seed)?;
    let features = FeatureSet::from_model(&m_o.model, &x, y.clone(), training.clone(), vec![Split::Remaining; y.len()])?;
    let matrix = build_distance_matrix(&features);
    let m_ref = train(&x, &y, arch, &cfg.reference_train(), cfg.init_seed)?.model;
    let sets = correct_sets(&m_ref, &x, &y, &training)?;
    let params = derive_params(&matrix, &sets, cfg.alpha_mode)?;
    Ok(Offline {
        arch,
        m_o,
        m_ref,
        features,
        matrix,
        params,
        training,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Online stage: filters `splits.removal` against `splits.remaining`.
pub fn online_filter(offline: &Offline, splits: &ScenarioSplits) -> Result<(FilterResult, f64)> {
    online_filter_with(offline, splits, &offline.params)
}

pub fn online_filter_with(
    offline: &Offline,
    splits: &ScenarioSplits,
    params: &SimilarityParams,
) -> Result<(FilterResult, f64)> {
    let start = Instant::now();
    let result = filter_requests(&offline.matrix, &splits.removal, &splits.remaining, |id| offline.label(id), params)?;
    Ok((result, start.elapsed().as_secs_f64()))
}

/// Both stages for one scenario.
pub fn run_filter(data: &RawDataset, splits: &ScenarioSplits, cfg: &PipelineConfig) -> Result<(Offline, FilterResult, Timings)> {
    let offline = prepare(data, &splits.training(), cfg)?;
    let (result, online_seconds) = online_filter(&offline, splits)?;
    let timings = Timings { offline_seconds: offline.seconds, online_seconds };
    Ok((offline, result, timings))
}

/// The retrained model (`D_r`) and the model that keeps the filtered requests
/// (`D_r ∪ D_u⁺`), trained with identical configuration and init.
pub fn train_comparison_pair(
    data: &RawDataset,
    d_r: &[usize],
    d_u_plus: &[usize],
    arch: Arch,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<(ToyModel, ToyModel)> {
    if d_r.is_empty() {
        return Err(Error::Empty("remaining set"));
    }
    let m_r = train_on(data, d_r, arch, cfg, init_seed)?.model;
    let mut kept: Vec<usize> = d_r.iter().chain(d_u_plus).copied().collect();
    kept.sort_unstable();
    let m_u = train_on(data, &kept, arch, cfg, init_seed)?.model;
    Ok((m_r, m_u))
}
