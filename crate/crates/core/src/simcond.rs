//! Similarity-condition parameters derived from a one-epoch reference model.
//!
//! Samples the reference model already classifies correctly are taken as
//! mutually similar within their class. The mean within-class similarity of
//! those samples gives `theta`; the typical number of such neighbors per
//! sample at that threshold gives `alpha`.

use serde::{Deserialize, Serialize};

use crate::distance::DistanceMatrix;
use crate::error::{Error, Result};
use crate::models::ToyModel;
use crate::numkit::{self, Matrix};

/// Per-class ids (sorted) the reference model predicts correctly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefCorrectSets {
    per_class: Vec<Vec<usize>>,
}

impl RefCorrectSets {
    pub fn from_classes(mut per_class: Vec<Vec<usize>>) -> Self {
        for members in &mut per_class {
            members.sort_unstable();
        }
        Self { per_class }
    }

    pub fn n_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn class(&self, c: usize) -> &[usize] {
        &self.per_class[c]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.per_class.iter().enumerate().map(|(c, v)| (c, v.as_slice()))
    }
}

/// How `alpha_c` is computed from the within-class neighbor graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// Ordered pairs at or above theta divided by class size: the average
    /// per-sample neighbor count.
    #[default]
    PerSample,
    /// Raw count of unordered pairs at or above theta.
    PairCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub class: usize,
    pub size: usize,
    pub eligible: bool,
    pub theta_c: Option<f64>,
    pub alpha_c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityParams {
    pub theta: f64,
    pub alpha: f64,
    pub alpha_mode: AlphaMode,
    pub per_class: Vec<ClassParams>,
}

impl SimilarityParams {
    /// Explicit parameters with no per-class provenance.
    pub fn fixed(theta: f64, alpha: f64) -> Self {
        Self { theta, alpha, alpha_mode: AlphaMode::PerSample, per_class: Vec::new() }
    }
}

/// Groups `ids` by class, keeping those where `m_ref`'s argmax equals the label.
pub fn correct_sets(
    m_ref: &ToyModel,
    inputs: &Matrix,
    labels: &[usize],
    ids: &[usize],
) -> Result<RefCorrectSets> {
    if inputs.rows() != labels.len() || labels.len() != ids.len() {
        return Err(Error::Dimension { expected: inputs.rows(), actual: labels.len().min(ids.len()) });
    }
    let n_classes = m_ref.arch().n_classes;
    let mut per_class = vec![Vec::new(); n_classes];
    for ((x, &y), &id) in inputs.iter_rows().zip(labels).zip(ids) {
        if y >= n_classes {
            return Err(Error::LabelOutOfRange { label: y, n_classes });
        }
        if numkit::argmax(&m_ref.logits(x)?) == y {
            per_class[y].push(id);
        }
    }
    Ok(RefCorrectSets::from_classes(per_class))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaDerivation {
    pub theta: f64,
    /// `(class, theta_c)`; `None` for classes with fewer than two members.
    pub per_class: Vec<(usize, Option<f64>)>,
}

fn positions(m: &DistanceMatrix, members: &[usize]) -> Result<Vec<usize>> {
    members.iter().map(|&id| m.position(id)).collect()
}

fn no_eligible(sets: &RefCorrectSets) -> Error {
    let sizes: Vec<String> = sets.iter().map(|(c, v)| format!("class {c}: {}", v.len())).collect();
    Error::Derivation(format!(
        "no class has two or more correctly predicted reference samples ({})",
        sizes.join(", ")
    ))
}

/// Mean within-class pair similarity per eligible class, then the
/// unweighted mean across those classes.
pub fn derive_theta(m: &DistanceMatrix, sets: &RefCorrectSets) -> Result<ThetaDerivation> {
    let mut per_class = Vec::with_capacity(sets.n_classes());
    let mut acc = Vec::new();
    for (c, members) in sets.iter() {
        if members.len() < 2 {
            per_class.push((c, None));
            continue;
        }
        let pos = positions(m, members)?;
        let mut sum = 0.0;
        for (a, &i) in pos.iter().enumerate() {
            let row = m.row_at(i);
            for &j in &pos[a + 1..] {
                sum += row[j];
            }
        }
        let pairs = pos.len() * (pos.len() - 1) / 2;
        let theta_c = sum / pairs as f64;
        acc.push(theta_c);
        per_class.push((c, Some(theta_c)));
    }
    if acc.is_empty() {
        return Err(no_eligible(sets));
    }
    Ok(ThetaDerivation { theta: numkit::mean(&acc).clamp(-1.0, 1.0), per_class })
}

/// Within-class neighbor statistics at `theta`, averaged over eligible classes.
pub fn derive_alpha(
    m: &DistanceMatrix,
    sets: &RefCorrectSets,
    theta: f64,
    mode: AlphaMode,
) -> Result<(f64, Vec<(usize, Option<f64>)>)> {
    let mut per_class = Vec::with_capacity(sets.n_classes());
    let mut acc = Vec::new();
    for (c, members) in sets.iter() {
        if members.len() < 2 {
            per_class.push((c, None));
            continue;
        }
        let pos = positions(m, members)?;
        let mut unordered = 0usize;
        for (a, &i) in pos.iter().enumerate() {
            let row = m.row_at(i);
            unordered += pos[a + 1..].iter().filter(|&&j| row[j] >= theta).count();
        }
        let alpha_c = match mode {
            AlphaMode::PerSample => (2 * unordered) as f64 / pos.len() as f64,
            AlphaMode::PairCount => unordered as f64,
        };
        acc.push(alpha_c);
        per_class.push((c, Some(alpha_c)));
    }
    if acc.is_empty() {
        return Err(no_eligible(sets));
    }
    Ok((numkit::mean(&acc), per_class))
}

pub fn derive_params(m: &DistanceMatrix, sets: &RefCorrectSets, mode: AlphaMode) -> Result<SimilarityParams> {
    let t = derive_theta(m, sets)?;
    let (alpha, alphas) = derive_alpha(m, sets, t.theta, mode)?;
    let per_class = t
        .per_class
        .iter()
        .zip(&alphas)
        .map(|(&(class, theta_c), &(_, alpha_c))| ClassParams {
            class,
            size: sets.class(class).len(),
            eligible: theta_c.is_some(),
            theta_c,
            alpha_c,
        })
        .collect();
    Ok(SimilarityParams { theta: t.theta, alpha, alpha_mode: mode, per_class })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::{build_distance_matrix, FeatureSet, Split};
    use crate::models::Arch;
    use crate::numkit::{cosine, SeededRng};
    use proptest::prelude::*;

    fn single_pair(sim: f64) -> DistanceMatrix {
        DistanceMatrix::from_values(vec![10, 11], vec![1.0, sim, sim, 1.0]).unwrap()
    }

    #[test]
    fn two_member_class() {
        let m = single_pair(0.8);
        let sets = RefCorrectSets::from_classes(vec![vec![10, 11]]);
        let t = derive_theta(&m, &sets).unwrap();
        assert_eq!(t.theta, 0.8);
        assert_eq!(t.per_class, vec![(0, Some(0.8))]);
    }

    #[test]
    fn identical_features_give_theta_one_and_full_alpha() {
        let rows = Matrix::from_rows(&vec![vec![0.3, 0.4]; 3]).unwrap();
        let fs = FeatureSet::from_raw(&rows, vec![0; 3], vec![0, 1, 2], vec![Split::Remaining; 3]).unwrap();
        let m = build_distance_matrix(&fs);
        let sets = RefCorrectSets::from_classes(vec![vec![0, 1, 2]]);
        let t = derive_theta(&m, &sets).unwrap();
        assert!((t.theta - 1.0).abs() < 1e-15);
        // Three mutually similar members each have two neighbors.
        let (alpha, _) = derive_alpha(&m, &sets, t.theta - 1e-12, AlphaMode::PerSample).unwrap();
        assert_eq!(alpha, 2.0);
        let (pairs, _) = derive_alpha(&m, &sets, t.theta - 1e-12, AlphaMode::PairCount).unwrap();
        assert_eq!(pairs, 3.0);
    }

    #[test]
    fn no_pair_above_theta_gives_zero_alpha() {
        let m = single_pair(0.1);
        let sets = RefCorrectSets::from_classes(vec![vec![10, 11]]);
        let (alpha, _) = derive_alpha(&m, &sets, 0.5, AlphaMode::PerSample).unwrap();
        assert_eq!(alpha, 0.0);
    }

    #[test]
    fn ineligible_classes_are_skipped_or_fail() {
        let m = single_pair(0.6);
        let sets = RefCorrectSets::from_classes(vec![vec![10, 11], vec![], vec![]]);
        let p = derive_params(&m, &sets, AlphaMode::PerSample).unwrap();
        assert_eq!(p.theta, 0.6);
        assert_eq!(p.per_class.iter().filter(|c| c.eligible).count(), 1);
        let lonely = RefCorrectSets::from_classes(vec![vec![10], vec![11]]);
        assert!(matches!(derive_theta(&m, &lonely), Err(Error::Derivation(_))));
    }

    #[test]
    fn correct_sets_follow_argmax() {
        let arch = Arch::new(2, 2, 3).unwrap();
        // Constant output favouring class 0.
        let constant =
            ToyModel::from_parts(arch, vec![0.0; 4], vec![0.0; 2], vec![0.0; 6], vec![1.0, 0.0, 0.0]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let sets = correct_sets(&constant, &x, &[0, 1, 0], &[5, 6, 7]).unwrap();
        assert_eq!(sets.class(0), &[5, 7]);
        assert!(sets.class(1).is_empty() && sets.class(2).is_empty());

        // Ties fall to class 0, so a uniform model also only keeps class 0.
        let uniform = ToyModel::zeros(arch);
        let sets = correct_sets(&uniform, &x, &[1, 1, 0], &[0, 1, 2]).unwrap();
        assert_eq!(sets.class(0), &[2]);
    }

    fn random_instance(seed: u64, classes: usize, per: usize, d: usize) -> (FeatureSet, RefCorrectSets) {
        let mut rng = SeededRng::new(seed);
        let n = classes * per;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|i| i / per).collect();
        let fs = FeatureSet::from_raw(&Matrix::from_rows(&rows).unwrap(), labels, (0..n).collect(), vec![Split::Remaining; n])
            .unwrap();
        let sets = RefCorrectSets::from_classes((0..classes).map(|c| (c * per..(c + 1) * per).collect()).collect());
        (fs, sets)
    }

    #[test]
    fn theta_and_alpha_match_brute_force() {
        let (fs, sets) = random_instance(17, 3, 5, 6);
        let m = build_distance_matrix(&fs);
        let p = derive_params(&m, &sets, AlphaMode::PerSample).unwrap();

        // Oracle: recompute cosines from raw features, ordered pair loops.
        let mut thetas = Vec::new();
        for (_, members) in sets.iter() {
            let mut s = 0.0;
            let mut k = 0;
            for (a, &i) in members.iter().enumerate() {
                for &j in &members[a + 1..] {
                    s += cosine(fs.feature(i).unwrap(), fs.feature(j).unwrap()).unwrap();
                    k += 1;
                }
            }
            thetas.push(s / k as f64);
        }
        let theta = thetas.iter().sum::<f64>() / thetas.len() as f64;
        assert!((p.theta - theta).abs() < 1e-12);
        for (pc, want) in p.per_class.iter().zip(&thetas) {
            assert!((pc.theta_c.unwrap() - want).abs() < 1e-12);
        }

        let mut alphas = Vec::new();
        for (_, members) in sets.iter() {
            let mut count = 0;
            for &i in members {
                for &j in members {
                    if i != j && m.get(i, j).unwrap() >= p.theta {
                        count += 1;
                    }
                }
            }
            alphas.push(count as f64 / members.len() as f64);
        }
        let alpha = alphas.iter().sum::<f64>() / alphas.len() as f64;
        assert_eq!(p.alpha, alpha);
        for pc in &p.per_class {
            assert!(pc.alpha_c.unwrap() <= (pc.size - 1) as f64);
        }
    }

    proptest! {
        #[test]
        fn alpha_monotone_and_permutation_invariant(seed in 0u64..500, dt in 0.0f64..0.5) {
            let (fs, sets) = random_instance(seed, 2, 6, 3);
            let m = build_distance_matrix(&fs);
            let t = derive_theta(&m, &sets).unwrap();
            prop_assert!((-1.0..=1.0).contains(&t.theta));
            let (_, lo) = derive_alpha(&m, &sets, t.theta, AlphaMode::PerSample).unwrap();
            let (_, hi) = derive_alpha(&m, &sets, t.theta + dt, AlphaMode::PerSample).unwrap();
            for (a, b) in lo.iter().zip(&hi) {
                prop_assert!(b.1.unwrap() <= a.1.unwrap());
            }
            let reversed = RefCorrectSets::from_classes(
                sets.iter().map(|(_, v)| v.iter().rev().copied().collect()).collect(),
            );
            let p1 = derive_params(&m, &sets, AlphaMode::PerSample).unwrap();
            let p2 = derive_params(&m, &reversed, AlphaMode::PerSample).unwrap();
            prop_assert!((p1.theta - p2.theta).abs() < 1e-12);
            prop_assert!((p1.alpha - p2.alpha).abs() < 1e-12);
        }
    }
}
