//! Partitions removal requests into unnecessary (`d_u_plus`) and required
//! (`d_u_minus`) unlearning.
//!
//! A request is unnecessary when it has strictly more than `alpha` remaining
//! samples of its own class whose similarity to it is at least `theta`.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::DistanceMatrix;
use crate::error::{Error, Result};
use crate::simcond::SimilarityParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neighbors: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub d_u_plus: Vec<usize>,
    pub d_u_minus: Vec<usize>,
    pub p_minus: f64,
    pub evidence: Vec<Evidence>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty_request: bool,
}

impl FilterResult {
    /// Assembles a result from per-request decisions, sorted by id.
    pub fn from_decisions(theta: f64, alpha: Option<f64>, mut decided: Vec<(Evidence, bool)>) -> Self {
        decided.sort_by_key(|(e, _)| e.id);
        let mut d_u_plus = Vec::new();
        let mut d_u_minus = Vec::new();
        let mut evidence = Vec::with_capacity(decided.len());
        for (e, unnecessary) in decided {
            if unnecessary {
                d_u_plus.push(e.id);
            } else {
                d_u_minus.push(e.id);
            }
            evidence.push(e);
        }
        let total = d_u_plus.len() + d_u_minus.len();
        let p_minus = if total == 0 { 0.0 } else { d_u_minus.len() as f64 / total as f64 };
        Self { theta, alpha, d_u_plus, d_u_minus, p_minus, evidence, empty_request: total == 0 }
    }

    pub fn n_requests(&self) -> usize {
        self.d_u_plus.len() + self.d_u_minus.len()
    }
}

/// Runs the similarity condition for every request against the remaining
/// samples of the same class.
pub fn filter_requests(
    m: &DistanceMatrix,
    d_u: &[usize],
    d_r: &[usize],
    labels: impl Fn(usize) -> Result<usize> + Sync,
    params: &SimilarityParams,
) -> Result<FilterResult> {
    let removal: HashSet<usize> = d_u.iter().copied().collect();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &id in d_r {
        if removal.contains(&id) {
            return Err(Error::OverlappingSplits(id));
        }
        by_class.entry(labels(id)?).or_default().push(m.position(id)?);
    }
    let empty = Vec::new();
    let decided = d_u
        .par_iter()
        .map(|&id| {
            let row = m.row_at(m.position(id)?);
            let class = labels(id)?;
            let candidates = by_class.get(&class).unwrap_or(&empty);
            let neighbors = candidates.iter().filter(|&&j| row[j] >= params.theta).count();
            let unnecessary = neighbors as f64 > params.alpha;
            Ok((Evidence { id, class: Some(class), neighbors: Some(neighbors), score: None }, unnecessary))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FilterResult::from_decisions(params.theta, Some(params.alpha), decided))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Random,
    ClassRemoval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRun {
    pub scenario: ScenarioKind,
    pub requests: usize,
    pub unnecessary: usize,
    pub p_minus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub runs: Vec<ScenarioRun>,
    pub mean_p_minus_random: Option<f64>,
    pub mean_p_minus_class_removal: Option<f64>,
    /// Class-removal mean minus random mean, when both are present.
    pub class_minus_random: Option<f64>,
}

pub fn scenario_report(results: &[(ScenarioKind, FilterResult)]) -> ScenarioSummary {
    let runs: Vec<ScenarioRun> = results
        .iter()
        .map(|(kind, r)| ScenarioRun {
            scenario: *kind,
            requests: r.n_requests(),
            unnecessary: r.d_u_plus.len(),
            p_minus: r.p_minus,
        })
        .collect();
    let mean_of = |kind| {
        let xs: Vec<f64> = runs.iter().filter(|r| r.scenario == kind).map(|r| r.p_minus).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    let random = mean_of(ScenarioKind::Random);
    let class = mean_of(ScenarioKind::ClassRemoval);
    ScenarioSummary {
        class_minus_random: random.zip(class).map(|(r, c)| c - r),
        mean_p_minus_random: random,
        mean_p_minus_class_removal: class,
        runs,
    }
}
