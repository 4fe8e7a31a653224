//! Score-and-threshold baselines: every sample gets a prototypicality score
//! (lower means more similar neighbors) and requests scoring at or below a
//! threshold are deemed unnecessary.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::RawDataset;
use crate::distance::FeatureSet;
use crate::error::{Error, Result};
use crate::filter::{Evidence, FilterResult};
use crate::models::ToyModel;
use crate::numkit::{self, derive_seed, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Confidence,
    Curvature,
    Clustering,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Confidence => "confidence",
            Method::Curvature => "curvature",
            Method::Clustering => "clustering",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub id: usize,
    pub score: f64,
}

/// Per-sample scores sorted by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub method: Method,
    entries: Vec<ScoreEntry>,
}

impl ScoreTable {
    pub fn new(method: Method, mut entries: Vec<ScoreEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.id);
        for w in entries.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::DuplicateId(w[0].id));
            }
        }
        if let Some(e) = entries.iter().find(|e| !e.score.is_finite()) {
            return Err(Error::NonFinite(format!("score of sample {}", e.id)));
        }
        Ok(Self { method, entries })
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn score(&self, id: usize) -> Result<f64> {
        self.entries
            .binary_search_by_key(&id, |e| e.id)
            .map(|i| self.entries[i].score)
            .map_err(|_| Error::UnknownId(id))
    }

    /// Ids in ascending score order, ties by id.
    pub fn ranked(&self) -> Vec<usize> {
        let mut order = self.entries.clone();
        order.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.id.cmp(&b.id)));
        order.into_iter().map(|e| e.id).collect()
    }

    /// CSV with header `id,score,method`, rows in id order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,score,method\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.id, e.score, self.method.as_str());
        }
        out
    }
}

/// `1 - p(true class)` under `model`.
pub fn confidence_scores(model: &ToyModel, data: &RawDataset, ids: &[usize]) -> Result<ScoreTable> {
    let entries = ids
        .par_iter()
        .map(|&id| {
            let p = model.predict(data.input(id))?;
            Ok(ScoreEntry { id, score: (1.0 - p[data.labels[id]]).max(0.0) })
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreTable::new(Method::Confidence, entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvatureConfig {
    pub probes: usize,
    pub h: f64,
    pub seed: u64,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        Self { probes: 4, h: 1e-3, seed: 0 }
    }
}

/// Finite-difference input-space curvature: the mean over Rademacher probes
/// `v` of `|grad L(x + h v) - grad L(x)| / h`. Probe directions for a sample
/// are seeded from `(seed, id)`.
pub fn curvature_scores(
    checkpoint_epoch2: &ToyModel,
    data: &RawDataset,
    ids: &[usize],
    cfg: &CurvatureConfig,
) -> Result<ScoreTable> {
    if !(cfg.h > 0.0 && cfg.h.is_finite()) {
        return Err(Error::Config(format!("curvature step h must be positive, got {}", cfg.h)));
    }
    if cfg.probes == 0 {
        return Err(Error::Config("curvature needs at least one probe".into()));
    }
    let entries = ids
        .par_iter()
        .map(|&id| {
            let x = data.input(id);
            let y = data.labels[id];
            let g0 = checkpoint_epoch2.input_gradient(x, y)?;
            let mut rng = SeededRng::new(derive_seed(cfg.seed, &[id as u64]));
            let mut total = 0.0;
            for _ in 0..cfg.probes {
                let shifted: Vec<f64> = x.iter().map(|xi| xi + cfg.h * rng.rademacher()).collect();
                let g1 = checkpoint_epoch2.input_gradient(&shifted, y)?;
                total += numkit::euclidean(&g1, &g0) / cfg.h;
            }
            Ok(ScoreEntry { id, score: total / cfg.probes as f64 })
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreTable::new(Method::Curvature, entries)
}

/// Distance to the `k`-th nearest neighbor after a 2-D PCA projection,
/// divided by the largest such distance.
pub fn clustering_scores(features: &FeatureSet, k: usize) -> Result<ScoreTable> {
    let n = features.len();
    if k == 0 || k >= n {
        return Err(Error::Config(format!("clustering k must be in [1, {}), got {k}", n)));
    }
    let dims = features.dim().min(2);
    let proj = numkit::pca_project(features.features(), dims)?;
    let radii: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> =
                (0..n).filter(|&j| j != i).map(|j| numkit::euclidean(proj.row(i), proj.row(j))).collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1]
        })
        .collect();
    let max = radii.iter().copied().fold(0.0, f64::max);
    let entries = features
        .ids()
        .iter()
        .zip(&radii)
        .map(|(&id, &r)| ScoreEntry { id, score: if max > 0.0 { r / max } else { 0.0 } })
        .collect();
    ScoreTable::new(Method::Clustering, entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// `max(mean - std, 1e-3)`
    Lo,
    /// `mean`
    Mid,
    /// `mean + std`
    Hi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub lo: f64,
    pub mid: f64,
    pub hi: f64,
}

impl Thresholds {
    pub fn get(&self, rule: ThresholdRule) -> f64 {
        match rule {
            ThresholdRule::Lo => self.lo,
            ThresholdRule::Mid => self.mid,
            ThresholdRule::Hi => self.hi,
        }
    }
}

/// Floor applied to the low threshold.
pub const LO_FLOOR: f64 = 1e-3;

/// The three score-distribution thresholds, using the population std.
pub fn threshold_params(table: &ScoreTable) -> Result<Thresholds> {
    if table.len() < 2 {
        return Err(Error::Empty("threshold rules need at least two scores"));
    }
    let s = table.scores();
    let mean = numkit::mean(&s);
    let std = numkit::population_std(&s);
    Ok(Thresholds { lo: (mean - std).max(LO_FLOOR), mid: mean, hi: mean + std })
}

/// Requests with `score <= threshold` are unnecessary.
pub fn select_by_score(table: &ScoreTable, threshold: f64, d_u: &[usize]) -> Result<FilterResult> {
    if !threshold.is_finite() {
        return Err(Error::NonFinite("score threshold".into()));
    }
    let decided = d_u
        .iter()
        .map(|&id| {
            let score = table.score(id)?;
            Ok((Evidence { id, class: None, neighbors: None, score: Some(score) }, score <= threshold))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FilterResult::from_decisions(threshold, None, decided))
}
