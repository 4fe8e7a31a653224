//! Privacy evaluation of a filtered unlearning run.
//!
//! The central piece is [`check_bound`], which measures the KL divergence
//! between the model trained with the filtered requests (`m_u`) and the model
//! retrained without them (`m_r`) on the filtered set, and verifies it against
//!
//! ```text
//! KL <= n * ((lambda1 + lambda2) * sqrt(2 - 2 theta) + delta)
//! ```
//!
//! one inequality at a time. The KL over the filtered set splits exactly into
//! three terms by routing each sample `x` through its matched remaining
//! neighbor `nei(x)`:
//!
//! ```text
//! p_u(x) . (L_u(x)   - L_r(x))   = p_u(x) . (L_r(nei) - L_r(x))      (second term)
//!                                + p_u(x) . (L_u(x)   - L_u(nei))    (first term, geometry)
//!                                + p_u(x) . (L_u(nei) - L_r(nei))    (first term, model gap)
//! ```
//!
//! where `L` is the clamped log-probability vector. Each term is bounded by
//! Cauchy-Schwarz (`|p|_2 <= 1`), then by the empirical Lipschitz ratio or the
//! output gap, then by the unit-vector identity `|a - b|^2 = 2 - 2 cos(a, b)`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::RawDataset;
use crate::distance::{DistanceMatrix, FeatureSet};
use crate::error::{Error, Result};
use crate::models::{accuracy, Classifier};
use crate::numkit::{self, clamped_log, Matrix};

/// Absolute slack used by every inequality check.
pub const STEP_TOLERANCE: f64 = 1e-9;

/// Denominator below which a Lipschitz pair is skipped.
const PAIR_DEGENERATE: f64 = 1e-12;

fn log_probs<C: Classifier + ?Sized>(model: &C, x: &[f64]) -> Result<Vec<f64>> {
    Ok(clamped_log(&model.predict_proba(x)?))
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    numkit::euclidean(a, b)
}

/// Summed KL divergence `sum_x sum_k p_u log(p_u / p_r)` over `inputs`.
pub fn kl_on_set<U: Classifier + ?Sized, R: Classifier + ?Sized>(m_u: &U, m_r: &R, inputs: &Matrix) -> Result<f64> {
    let mut total = 0.0;
    for x in inputs.iter_rows() {
        let p_u = m_u.predict_proba(x)?;
        let p_r = m_r.predict_proba(x)?;
        if p_u.len() != p_r.len() {
            return Err(Error::Dimension { expected: p_u.len(), actual: p_r.len() });
        }
        total += kl_row(&p_u, &clamped_log(&p_u), &clamped_log(&p_r));
    }
    Ok(total)
}

fn kl_row(p_u: &[f64], log_u: &[f64], log_r: &[f64]) -> f64 {
    p_u.iter().zip(log_u).zip(log_r).map(|((p, lu), lr)| p * (lu - lr)).sum()
}

/// Injective assignment of each filtered request to a remaining neighbor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeiMap {
    /// `(request, neighbor)`, sorted by request id.
    pairs: Vec<(usize, usize)>,
}

impl NeiMap {
    pub fn from_pairs(mut pairs: Vec<(usize, usize)>) -> Result<Self> {
        pairs.sort_unstable();
        let mut seen = HashSet::new();
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::DuplicateId(w[0].0));
            }
        }
        for &(_, n) in &pairs {
            if !seen.insert(n) {
                return Err(Error::DuplicateId(n));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<usize> {
        self.pairs.binary_search_by_key(&id, |p| p.0).ok().map(|i| self.pairs[i].1)
    }
}

/// Greedy assignment by descending best-candidate similarity, each request
/// taking its most similar unused same-class candidate at or above `theta`.
/// Requests the greedy pass leaves unmatched are retried with augmenting
/// paths, so failure means no injective assignment exists.
pub fn build_nei_map(
    m: &DistanceMatrix,
    d_u_plus: &[usize],
    d_r: &[usize],
    labels: impl Fn(usize) -> Result<usize>,
    theta: f64,
) -> Result<NeiMap> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &id in d_r {
        by_class.entry(labels(id)?).or_default().push(id);
    }
    // Candidate lists sorted by similarity descending, then id.
    let mut candidates: Vec<(usize, usize, Vec<(f64, usize)>)> = Vec::with_capacity(d_u_plus.len());
    for &x in d_u_plus {
        let class = labels(x)?;
        let row = m.row_at(m.position(x)?);
        let mut cands = Vec::new();
        for &y in by_class.get(&class).map(Vec::as_slice).unwrap_or(&[]) {
            let s = row[m.position(y)?];
            if s >= theta {
                cands.push((s, y));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        candidates.push((x, class, cands));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let best = |i: usize| candidates[i].2.first().map_or(f64::NEG_INFINITY, |c| c.0);
        best(b).total_cmp(&best(a)).then(candidates[a].0.cmp(&candidates[b].0))
    });

    let mut owner: HashMap<usize, usize> = HashMap::new();
    let mut assigned: Vec<Option<usize>> = vec![None; candidates.len()];
    let mut pending = Vec::new();
    for &i in &order {
        match candidates[i].2.iter().find(|(_, y)| !owner.contains_key(y)) {
            Some(&(_, y)) => {
                owner.insert(y, i);
                assigned[i] = Some(y);
            }
            None => pending.push(i),
        }
    }
    for i in pending {
        let mut visited = HashSet::new();
        if !augment(i, &candidates, &mut owner, &mut assigned, &mut visited) {
            let (id, class, _) = candidates[i];
            return Err(Error::NeighborMapInfeasible { id, class });
        }
    }
    let pairs = candidates.iter().zip(&assigned).map(|((x, _, _), y)| (*x, y.expect("every request matched"))).collect();
    NeiMap::from_pairs(pairs)
}

fn augment(
    i: usize,
    candidates: &[(usize, usize, Vec<(f64, usize)>)],
    owner: &mut HashMap<usize, usize>,
    assigned: &mut [Option<usize>],
    visited: &mut HashSet<usize>,
) -> bool {
    for &(_, y) in &candidates[i].2 {
        if !visited.insert(y) {
            continue;
        }
        let free = match owner.get(&y).copied() {
            None => true,
            Some(other) => augment(other, candidates, owner, assigned, visited),
        };
        if free {
            owner.insert(y, i);
            assigned[i] = Some(y);
            return true;
        }
    }
    false
}

/// Largest ratio `|L(x) - L(nei)| / |f(x) - f(nei)|` over the map's pairs,
/// where `L` is the clamped log-output and `f` the normalized feature.
pub fn estimate_lipschitz<C: Classifier + ?Sized>(
    model: &C,
    nei_map: &NeiMap,
    data: &RawDataset,
    features: &FeatureSet,
) -> Result<f64> {
    if nei_map.is_empty() {
        return Err(Error::Empty("neighbor map"));
    }
    lipschitz_over_pairs(model, nei_map, data, features)?.ok_or(Error::AllPairsDegenerate)
}

/// `None` when every pair has coincident features (and matching outputs).
fn lipschitz_over_pairs<C: Classifier + ?Sized>(
    model: &C,
    nei_map: &NeiMap,
    data: &RawDataset,
    features: &FeatureSet,
) -> Result<Option<f64>> {
    let mut best: Option<f64> = None;
    for &(x, y) in nei_map.pairs() {
        let num = diff_norm(&log_probs(model, data.input(x))?, &log_probs(model, data.input(y))?);
        let den = diff_norm(features.feature(x)?, features.feature(y)?);
        if den < PAIR_DEGENERATE {
            if num > STEP_TOLERANCE {
                return Err(Error::DegeneratePair { id: x, neighbor: y, gap: num });
            }
            continue;
        }
        let ratio = num / den;
        best = Some(best.map_or(ratio, |b| b.max(ratio)));
    }
    Ok(best)
}

/// Largest `|L_u(x) - L_r(x)|` over the given inputs.
pub fn estimate_delta<U: Classifier + ?Sized, R: Classifier + ?Sized>(m_u: &U, m_r: &R, inputs: &Matrix) -> Result<f64> {
    let mut best = 0.0f64;
    for x in inputs.iter_rows() {
        best = best.max(diff_norm(&log_probs(m_u, x)?, &log_probs(m_r, x)?));
    }
    Ok(best)
}

/// One side-by-side entry of a failed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDetail {
    pub id: usize,
    pub neighbor: usize,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub counterexample: Vec<PairDetail>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub lambda1: f64,
    pub lambda2: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub kl: f64,
    pub n: usize,
    pub theta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub delta: f64,
    pub epsilon_hat: f64,
    pub steps: Vec<StepCheck>,
}

impl BoundReport {
    pub fn all_pass(&self) -> bool {
        self.steps.iter().all(|s| s.pass)
    }

    /// Pass flag of each step group (`a`..`d`), keyed by the name prefix.
    pub fn groups(&self) -> BTreeMap<String, bool> {
        let mut out: BTreeMap<String, bool> = BTreeMap::new();
        for s in &self.steps {
            let g = s.name.split('_').next().unwrap_or("").to_string();
            *out.entry(g).or_insert(true) &= s.pass;
        }
        out
    }

    pub fn failures(&self) -> impl Iterator<Item = &StepCheck> {
        self.steps.iter().filter(|s| !s.pass)
    }

    /// Human-readable dump of every failed step.
    pub fn failure_dump(&self) -> String {
        let mut out = String::new();
        for s in self.failures() {
            let _ = writeln!(out, "step {} violated: lhs {:.12e} > rhs {:.12e}", s.name, s.lhs, s.rhs);
            for p in &s.counterexample {
                let _ = writeln!(out, "  pair ({}, {}): lhs {:.12e} rhs {:.12e}", p.id, p.neighbor, p.lhs, p.rhs);
            }
        }
        out
    }
}

#[derive(Clone, Copy)]
enum Aggregate {
    Sum,
    Max,
}

fn step(name: &str, pairs: &[(usize, usize)], lhs: &[f64], rhs: &[f64], agg: Aggregate) -> StepCheck {
    let (l, r) = match agg {
        Aggregate::Sum => (lhs.iter().sum::<f64>(), rhs.iter().sum::<f64>()),
        Aggregate::Max => {
            let r = rhs.iter().copied().fold(f64::INFINITY, f64::min);
            (lhs.iter().copied().fold(0.0, f64::max), if rhs.is_empty() { 0.0 } else { r })
        }
    };
    let pass = l <= r + STEP_TOLERANCE * r.abs().max(1.0);
    let mut counterexample = Vec::new();
    if !pass {
        let mut worst: Vec<usize> = (0..pairs.len()).collect();
        worst.sort_by(|&a, &b| (lhs[b] - rhs[b]).total_cmp(&(lhs[a] - rhs[a])));
        counterexample = worst
            .into_iter()
            .take(10)
            .map(|i| PairDetail { id: pairs[i].0, neighbor: pairs[i].1, lhs: lhs[i], rhs: rhs[i] })
            .collect();
    }
    StepCheck { name: name.to_string(), lhs: l, rhs: r, pass, counterexample }
}

/// Measures the Lipschitz ratios over the map's pairs and the output gap over
/// `d_r`, then runs [`check_bound_with`].
#[allow(clippy::too_many_arguments)]
pub fn check_bound<U: Classifier + ?Sized, R: Classifier + ?Sized>(
    m_u: &U,
    m_r: &R,
    data: &RawDataset,
    features: &FeatureSet,
    nei_map: &NeiMap,
    d_r: &[usize],
    theta: f64,
) -> Result<BoundReport> {
    let estimates = estimate_all(m_u, m_r, data, features, nei_map, d_r)?;
    check_bound_with(m_u, m_r, data, features, nei_map, theta, estimates)
}

/// Lipschitz ratios over the map's pairs and the output gap over `d_r`.
/// Pairs with coincident features contribute nothing; a map of only such
/// pairs (or an empty map) has ratio 0.
pub fn estimate_all<U: Classifier + ?Sized, R: Classifier + ?Sized>(
    m_u: &U,
    m_r: &R,
    data: &RawDataset,
    features: &FeatureSet,
    nei_map: &NeiMap,
    d_r: &[usize],
) -> Result<Estimates> {
    let lambda1 = lipschitz_over_pairs(m_r, nei_map, data, features)?.unwrap_or(0.0);
    let lambda2 = lipschitz_over_pairs(m_u, nei_map, data, features)?.unwrap_or(0.0);
    let delta = estimate_delta(m_u, m_r, &data.inputs.select_rows(d_r))?;
    Ok(Estimates { lambda1, lambda2, delta })
}

/// Verifies every inequality of the bound chain with the given constants.
pub fn check_bound_with<U: Classifier + ?Sized, R: Classifier + ?Sized>(
    m_u: &U,
    m_r: &R,
    data: &RawDataset,
    features: &FeatureSet,
    nei_map: &NeiMap,
    theta: f64,
    est: Estimates,
) -> Result<BoundReport> {
    let pairs = nei_map.pairs();
    let n = pairs.len();
    let radius = (2.0 - 2.0 * theta).max(0.0).sqrt();
    let Estimates { lambda1, lambda2, delta } = est;
    let epsilon_hat = n as f64 * ((lambda1 + lambda2) * radius + delta);

    let cap = |v: f64| vec![v; n];
    let mut feat_gap = Vec::with_capacity(n);
    let mut identity_err = Vec::with_capacity(n);
    let mut kl = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    let mut second_norm = Vec::with_capacity(n);
    let mut geo = Vec::with_capacity(n);
    let mut geo_norm = Vec::with_capacity(n);
    let mut gap = Vec::with_capacity(n);
    let mut gap_norm = Vec::with_capacity(n);

    for &(x, y) in pairs {
        let (fx, fy) = (features.feature(x)?, features.feature(y)?);
        let d = diff_norm(fx, fy);
        let cos = numkit::cosine(fx, fy)?;
        feat_gap.push(d);
        identity_err.push((d * d - (2.0 - 2.0 * cos)).abs());

        let p_u = m_u.predict_proba(data.input(x))?;
        let lu_x = clamped_log(&p_u);
        let lu_y = log_probs(m_u, data.input(y))?;
        let lr_x = log_probs(m_r, data.input(x))?;
        let lr_y = log_probs(m_r, data.input(y))?;
        if lu_x.len() != lr_x.len() {
            return Err(Error::Dimension { expected: lu_x.len(), actual: lr_x.len() });
        }
        let dot = |a: &[f64], b: &[f64]| -> f64 { p_u.iter().zip(a).zip(b).map(|((p, a), b)| p * (a - b)).sum() };

        kl.push(kl_row(&p_u, &lu_x, &lr_x));
        second.push(dot(&lr_y, &lr_x));
        second_norm.push(diff_norm(&lr_y, &lr_x));
        geo.push(dot(&lu_x, &lu_y));
        geo_norm.push(diff_norm(&lu_x, &lu_y));
        gap.push(dot(&lu_y, &lr_y));
        gap_norm.push(diff_norm(&lu_y, &lr_y));
    }

    let scaled = |lambda: f64| feat_gap.iter().map(|d| lambda * d).collect::<Vec<_>>();
    let lip_r = scaled(lambda1);
    let lip_u = scaled(lambda2);
    let decomposed: Vec<f64> = (0..n).map(|i| second[i] + geo[i] + gap[i]).collect();
    let first: Vec<f64> = (0..n).map(|i| geo[i] + gap[i]).collect();
    let first_cap: Vec<f64> = cap(lambda2 * radius + delta);
    let decomp_gap: Vec<f64> = (0..n).map(|i| (kl[i] - decomposed[i]).abs()).collect();

    let steps = vec![
        step("a_unit_vector_identity", pairs, &identity_err, &cap(STEP_TOLERANCE), Aggregate::Max),
        step("a_neighbor_radius", pairs, &feat_gap, &cap(radius), Aggregate::Max),
        step("b_second_term_cauchy_schwarz", pairs, &second, &second_norm, Aggregate::Sum),
        step("b_second_term_lipschitz", pairs, &second_norm, &lip_r, Aggregate::Sum),
        step("b_second_term_radius", pairs, &lip_r, &cap(lambda1 * radius), Aggregate::Sum),
        step("c_first_term_cauchy_schwarz", pairs, &geo, &geo_norm, Aggregate::Sum),
        step("c_first_term_lipschitz", pairs, &geo_norm, &lip_u, Aggregate::Sum),
        step("c_first_term_radius", pairs, &lip_u, &cap(lambda2 * radius), Aggregate::Sum),
        step("c_model_gap_cauchy_schwarz", pairs, &gap, &gap_norm, Aggregate::Sum),
        step("c_model_gap_delta", pairs, &gap_norm, &cap(delta), Aggregate::Sum),
        step("c_first_term_total", pairs, &first, &first_cap, Aggregate::Sum),
        step("d_decomposition", pairs, &decomp_gap, &cap(STEP_TOLERANCE), Aggregate::Max),
        step("d_kl_bound", pairs, &kl, &cap(if n == 0 { 0.0 } else { epsilon_hat / n as f64 }), Aggregate::Sum),
    ];

    Ok(BoundReport {
        kl: kl.iter().sum(),
        n,
        theta,
        lambda1,
        lambda2,
        delta,
        epsilon_hat,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaResult {
    pub threshold: f64,
    pub shadow_accuracy: f64,
    pub accuracy: f64,
    pub f1: f64,
}

/// A labelled set with optional membership ground truth.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSet<'a> {
    pub inputs: &'a Matrix,
    pub labels: &'a [usize],
}

fn true_class_scores<C: Classifier + ?Sized>(model: &C, set: LabeledSet<'_>) -> Result<Vec<f64>> {
    set.inputs.iter_rows().zip(set.labels).map(|(x, &y)| Ok(model.predict_proba(x)?[y])).collect()
}

/// Confidence-threshold membership inference calibrated on a shadow model.
///
/// The threshold is the one among the 101 quantiles of the pooled shadow
/// scores that best separates shadow members (score >= threshold) from
/// non-members; the lowest such quantile wins ties.
pub fn mia_threshold_attack<T: Classifier + ?Sized, S: Classifier + ?Sized>(
    target: &T,
    shadow: &S,
    shadow_in: LabeledSet<'_>,
    shadow_out: LabeledSet<'_>,
    queries: LabeledSet<'_>,
    is_member: &[bool],
) -> Result<MiaResult> {
    if shadow_in.labels.is_empty() || shadow_out.labels.is_empty() {
        return Err(Error::Empty("shadow in/out split"));
    }
    if is_member.len() != queries.labels.len() {
        return Err(Error::Dimension { expected: queries.labels.len(), actual: is_member.len() });
    }
    let s_in = true_class_scores(shadow, shadow_in)?;
    let s_out = true_class_scores(shadow, shadow_out)?;
    let mut pooled: Vec<f64> = s_in.iter().chain(&s_out).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let total = (s_in.len() + s_out.len()) as f64;
    let mut best = (f64::NEG_INFINITY, pooled[0]);
    for q in 0..=100 {
        let idx = ((q as f64 / 100.0) * (pooled.len() - 1) as f64).round() as usize;
        let tau = pooled[idx];
        let hits = s_in.iter().filter(|&&s| s >= tau).count() + s_out.iter().filter(|&&s| s < tau).count();
        let acc = hits as f64 / total;
        if acc > best.0 {
            best = (acc, tau);
        }
    }
    let (shadow_accuracy, threshold) = best;

    let scores = true_class_scores(target, queries)?;
    let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &member) in scores.iter().zip(is_member) {
        let predicted = s >= threshold;
        match (predicted, member) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
        if predicted == member {
            correct += 1;
        }
    }
    let accuracy = if scores.is_empty() { 0.0 } else { correct as f64 / scores.len() as f64 };
    let denom = 2 * tp + fp + fneg;
    let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    Ok(MiaResult { threshold, shadow_accuracy, accuracy, f1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub split: String,
    pub acc_m_u: f64,
    pub acc_m_r: f64,
    pub abs_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<AccuracyRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mia_m_u: Option<MiaResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mia_m_r: Option<MiaResult>,
}

impl ComparisonTable {
    pub fn row(&self, split: &str) -> Option<&AccuracyRow> {
        self.rows.iter().find(|r| r.split == split)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,acc_m_u,acc_m_r,abs_gap\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.split, r.acc_m_u, r.acc_m_r, r.abs_gap);
        }
        out
    }
}

/// Accuracy of both models on the removal, remaining and test splits.
pub fn compare_models<U: Classifier + ?Sized, R: Classifier + ?Sized>(
    m_u: &U,
    m_r: &R,
    data: &RawDataset,
    d_r: &[usize],
    d_u: &[usize],
    d_t: &[usize],
) -> Result<ComparisonTable> {
    let mut rows = Vec::with_capacity(3);
    for (name, ids) in [("d_u", d_u), ("d_r", d_r), ("d_t", d_t)] {
        let (x, y) = data.subset(ids);
        let acc_m_u = accuracy(m_u, &x, &y)?;
        let acc_m_r = accuracy(m_r, &x, &y)?;
        rows.push(AccuracyRow { split: name.to_string(), acc_m_u, acc_m_r, abs_gap: (acc_m_u - acc_m_r).abs() });
    }
    Ok(ComparisonTable { rows, mia_m_u: None, mia_m_r: None })
}
