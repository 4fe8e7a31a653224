//! Sharded, sliced training with per-slice checkpoints and suffix retraining
//! on removal.
//!
//! Each shard's sub-model starts from an init seeded by `(seed, shard)` and
//! trains on one slice at a time, continuing from the previous slice's
//! checkpoint. Slice `k` uses a shuffle seed keyed by `(seed, shard, k)`, so
//! retraining a suffix from checkpoint `k - 1` reproduces exactly what full
//! sequential training on the reduced data would give.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::RawDataset;
use crate::error::{Error, Result};
use crate::models::{fit, Arch, Checkpoint, CheckpointLabel, Classifier, ToyModel, TrainConfig};
use crate::numkit::{argmax, derive_seed, SeededRng};

const TAG_PARTITION: u64 = 0x5041_5254;
const TAG_INIT: u64 = 0x494e_4954;
const TAG_SLICE: u64 = 0x534c_4943;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SisaPlan {
    pub shards: usize,
    pub slices: usize,
    pub seed: u64,
    /// `assignment[shard][slice]` lists sample ids in training order.
    assignment: Vec<Vec<Vec<usize>>>,
}

impl SisaPlan {
    pub fn slice(&self, shard: usize, slice: usize) -> &[usize] {
        &self.assignment[shard][slice]
    }

    pub fn shard_len(&self, shard: usize) -> usize {
        self.assignment[shard].iter().map(Vec::len).sum()
    }

    pub fn len(&self) -> usize {
        (0..self.shards).map(|s| self.shard_len(s)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(shard, slice)` of every assigned sample.
    pub fn locations(&self) -> HashMap<usize, (usize, usize)> {
        let mut out = HashMap::new();
        for (s, shard) in self.assignment.iter().enumerate() {
            for (k, slice) in shard.iter().enumerate() {
                for &id in slice {
                    out.insert(id, (s, k));
                }
            }
        }
        out
    }

    fn without(&self, removed: &HashMap<usize, (usize, usize)>) -> SisaPlan {
        let mut plan = self.clone();
        for shard in &mut plan.assignment {
            for slice in shard {
                slice.retain(|id| !removed.contains_key(id));
            }
        }
        plan
    }
}

/// Seeded shuffle, round-robin over shards, then contiguous near-equal slices.
pub fn partition(ids: &[usize], shards: usize, slices: usize, seed: u64) -> Result<SisaPlan> {
    if shards == 0 || slices == 0 {
        return Err(Error::Config("shards and slices must be >= 1".into()));
    }
    if shards * slices > ids.len() {
        return Err(Error::Config(format!(
            "{shards} shards x {slices} slices exceeds {} samples",
            ids.len()
        )));
    }
    let mut order = ids.to_vec();
    SeededRng::new(derive_seed(seed, &[TAG_PARTITION])).shuffle(&mut order);
    let mut per_shard = vec![Vec::new(); shards];
    for (p, id) in order.into_iter().enumerate() {
        per_shard[p % shards].push(id);
    }
    let assignment = per_shard
        .into_iter()
        .map(|members| {
            let base = members.len() / slices;
            let extra = members.len() % slices;
            let mut out = Vec::with_capacity(slices);
            let mut at = 0;
            for k in 0..slices {
                let len = base + usize::from(k < extra);
                out.push(members[at..at + len].to_vec());
                at += len;
            }
            out
        })
        .collect();
    Ok(SisaPlan { shards, slices, seed, assignment })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardModel {
    /// Checkpoint after each slice; the last one is the sub-model.
    pub checkpoints: Vec<Checkpoint>,
}

impl ShardModel {
    pub fn model(&self) -> &ToyModel {
        self.checkpoints.last().expect("shard has at least one slice").model()
    }
}

/// Sub-models aggregated by averaging their probability outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SisaEnsemble {
    pub arch: Arch,
    pub shards: Vec<ShardModel>,
}

impl SisaEnsemble {
    pub fn from_models(models: Vec<ToyModel>) -> Result<Self> {
        let arch = models.first().ok_or(Error::Empty("ensemble"))?.arch();
        if let Some(m) = models.iter().find(|m| m.arch() != arch) {
            return Err(Error::Dimension { expected: arch.n_classes, actual: m.arch().n_classes });
        }
        let shards = models
            .iter()
            .enumerate()
            .map(|(s, m)| ShardModel { checkpoints: vec![Checkpoint::new(CheckpointLabel::Slice { shard: s, slice: 1 }, m)] })
            .collect();
        Ok(Self { arch, shards })
    }
}

/// Mean of sub-model probabilities.
pub fn predict_ensemble(ens: &SisaEnsemble, x: &[f64]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; ens.arch.n_classes];
    for shard in &ens.shards {
        for (a, p) in acc.iter_mut().zip(shard.model().predict(x)?) {
            *a += p;
        }
    }
    let k = ens.shards.len() as f64;
    for a in &mut acc {
        *a /= k;
    }
    Ok(acc)
}

impl Classifier for SisaEnsemble {
    fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        predict_ensemble(self, x)
    }

    fn predict_label(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&predict_ensemble(self, x)?))
    }
}

#[derive(Debug, Clone)]
pub struct SisaTraining {
    pub ensemble: SisaEnsemble,
    pub steps: usize,
}

fn shard_init(arch: Arch, cfg: &TrainConfig, shard: usize) -> ToyModel {
    ToyModel::init(arch, derive_seed(cfg.seed, &[TAG_INIT, shard as u64]))
}

fn slice_config(cfg: &TrainConfig, shard: usize, slice: usize) -> TrainConfig {
    TrainConfig { seed: derive_seed(cfg.seed, &[TAG_SLICE, shard as u64, slice as u64]), ..cfg.clone() }
}

struct ShardRun {
    checkpoints: Vec<Checkpoint>,
    steps: usize,
    visited: Vec<usize>,
}

/// Trains slices `from..R` of one shard, starting from `model`.
fn run_slices(
    plan: &SisaPlan,
    data: &RawDataset,
    cfg: &TrainConfig,
    shard: usize,
    from: usize,
    mut model: ToyModel,
) -> Result<ShardRun> {
    let mut run = ShardRun { checkpoints: Vec::new(), steps: 0, visited: Vec::new() };
    for k in from..plan.slices {
        let ids = plan.slice(shard, k);
        let (x, y) = data.subset(ids);
        let report = fit(&mut model, &x, &y, &slice_config(cfg, shard, k))?;
        run.steps += report.steps;
        run.visited.extend(report.visited.iter().map(|&i| ids[i]));
        run.checkpoints.push(Checkpoint::new(CheckpointLabel::Slice { shard, slice: k + 1 }, &model));
    }
    Ok(run)
}

pub fn train_sisa(plan: &SisaPlan, data: &RawDataset, arch: Arch, cfg: &TrainConfig) -> Result<SisaTraining> {
    cfg.validate()?;
    if let Some(&bad) = plan.assignment.iter().flatten().flatten().find(|&&id| id >= data.len()) {
        return Err(Error::UnknownId(bad));
    }
    let runs = (0..plan.shards)
        .into_par_iter()
        .map(|s| run_slices(plan, data, cfg, s, 0, shard_init(arch, cfg, s)))
        .collect::<Result<Vec<_>>>()?;
    let steps = runs.iter().map(|r| r.steps).sum();
    let shards = runs.into_iter().map(|r| ShardModel { checkpoints: r.checkpoints }).collect();
    Ok(SisaTraining { ensemble: SisaEnsemble { arch, shards }, steps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffectedShard {
    pub shard: usize,
    /// 1-based index of the first slice holding a removed sample.
    pub k_star: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlearnOutcome {
    pub n_is: usize,
    pub affected: Vec<AffectedShard>,
    pub wall_seconds: f64,
    pub per_shard_seconds: Vec<f64>,
    /// SGD updates spent retraining.
    pub steps: usize,
    /// Sample ids each retrained shard visited, keyed by shard.
    #[serde(skip)]
    pub trace: BTreeMap<usize, Vec<usize>>,
    #[serde(skip)]
    pub ensemble: Option<SisaEnsemble>,
    #[serde(skip)]
    pub plan: Option<SisaPlan>,
}

impl UnlearnOutcome {
    pub fn retrained_shards(&self) -> Vec<usize> {
        self.affected.iter().map(|a| a.shard).collect()
    }
}

/// Removes `removal` from the plan and retrains every affected shard from the
/// checkpoint just before its first affected slice.
pub fn unlearn(
    ens: &SisaEnsemble,
    plan: &SisaPlan,
    removal: &[usize],
    data: &RawDataset,
    cfg: &TrainConfig,
) -> Result<UnlearnOutcome> {
    cfg.validate()?;
    let locations = plan.locations();
    let mut removed = HashMap::with_capacity(removal.len());
    let mut k_star: BTreeMap<usize, usize> = BTreeMap::new();
    for &id in removal {
        let &(s, k) = locations.get(&id).ok_or(Error::UnknownId(id))?;
        removed.insert(id, (s, k));
        let e = k_star.entry(s).or_insert(k);
        *e = (*e).min(k);
    }
    let new_plan = plan.without(&removed);

    let jobs: Vec<(usize, usize)> = k_star.iter().map(|(&s, &k)| (s, k)).collect();
    let runs = jobs
        .par_iter()
        .map(|&(s, k)| {
            let start = Instant::now();
            let model = if k == 0 {
                shard_init(ens.arch, cfg, s)
            } else {
                ens.shards[s].checkpoints[k - 1].restore()
            };
            let run = run_slices(&new_plan, data, cfg, s, k, model)?;
            Ok((run, start.elapsed().as_secs_f64()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut ensemble = ens.clone();
    let mut per_shard_seconds = vec![0.0; plan.shards];
    let mut trace = BTreeMap::new();
    let mut steps = 0;
    for (&(s, k), (run, secs)) in jobs.iter().zip(runs) {
        let shard = &mut ensemble.shards[s].checkpoints;
        shard.truncate(k);
        shard.extend(run.checkpoints);
        per_shard_seconds[s] = secs;
        steps += run.steps;
        trace.insert(s, run.visited);
    }
    Ok(UnlearnOutcome {
        n_is: jobs.iter().map(|&(_, k)| plan.slices - k).sum(),
        affected: jobs.iter().map(|&(shard, k)| AffectedShard { shard, k_star: k + 1 }).collect(),
        wall_seconds: per_shard_seconds.iter().sum(),
        per_shard_seconds,
        steps,
        trace,
        ensemble: Some(ensemble),
        plan: Some(new_plan),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    fn setup() -> (RawDataset, Arch, TrainConfig) {
        let data = synth_blobs(3, 40, 4, 0.8, 7).unwrap();
        let arch = Arch::new(4, 8, 3).unwrap();
        let cfg = TrainConfig { epochs: 3, lr: 0.2, batch_size: 8, seed: 5, shuffle: true };
        (data, arch, cfg)
    }

    #[test]
    fn partition_examples() {
        let ids: Vec<usize> = (0..100).collect();
        let p = partition(&ids, 5, 10, 1).unwrap();
        assert_eq!(p.shards * p.slices, 50);
        for s in 0..5 {
            assert_eq!(p.shard_len(s), 20);
        }
        assert_eq!(p.locations().len(), 100);
        let single = partition(&ids, 1, 1, 1).unwrap();
        assert_eq!(single.slice(0, 0).len(), 100);
        assert!(partition(&ids[..10], 5, 10, 1).is_err());
        assert_eq!(p, partition(&ids, 5, 10, 1).unwrap());
    }

    #[test]
    fn partition_balance() {
        let ids: Vec<usize> = (0..103).collect();
        let p = partition(&ids, 4, 3, 9).unwrap();
        let sizes: Vec<usize> = (0..4).map(|s| p.shard_len(s)).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for s in 0..4 {
            let lens: Vec<usize> = (0..3).map(|k| p.slice(s, k).len()).collect();
            assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn ensemble_mean_rule() {
        let arch = Arch::new(1, 1, 2).unwrap();
        let a = ToyModel::from_parts(arch, vec![0.0], vec![0.0], vec![0.0, 0.0], vec![900.0, 0.0]).unwrap();
        let b = ToyModel::from_parts(arch, vec![0.0], vec![0.0], vec![0.0, 0.0], vec![0.0, 900.0]).unwrap();
        let ens = SisaEnsemble::from_models(vec![a.clone(), b]).unwrap();
        assert_eq!(predict_ensemble(&ens, &[0.3]).unwrap(), vec![0.5, 0.5]);
        let same = SisaEnsemble::from_models(vec![a.clone(), a.clone()]).unwrap();
        assert_eq!(predict_ensemble(&same, &[0.3]).unwrap(), a.predict(&[0.3]).unwrap());
    }

    #[test]
    fn single_slice_is_plain_shard_model() {
        let (data, arch, cfg) = setup();
        let ids: Vec<usize> = (0..data.len()).collect();
        let plan = partition(&ids, 2, 1, 3).unwrap();
        let t = train_sisa(&plan, &data, arch, &cfg).unwrap();
        assert_eq!(t.ensemble.shards[0].checkpoints.len(), 1);
        let (x, y) = data.subset(plan.slice(0, 0));
        let mut direct = shard_init(arch, &cfg, 0);
        fit(&mut direct, &x, &y, &slice_config(&cfg, 0, 0)).unwrap();
        assert_eq!(&direct, t.ensemble.shards[0].model());
    }

    #[test]
    fn ensemble_beats_chance() {
        let (data, arch, cfg) = setup();
        let ids: Vec<usize> = (0..data.len()).collect();
        let plan = partition(&ids, 3, 4, 3).unwrap();
        let t = train_sisa(&plan, &data, arch, &cfg).unwrap();
        let acc = crate::models::accuracy(&t.ensemble, &data.inputs, &data.labels).unwrap();
        assert!(acc > 1.0 / 3.0 + 0.2, "{acc}");
        let p = predict_ensemble(&t.ensemble, data.input(0)).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn n_is_counts_suffix_slices() {
        let (data, arch, cfg) = setup();
        let ids: Vec<usize> = (0..data.len()).collect();
        let plan = partition(&ids, 3, 4, 3).unwrap();
        let t = train_sisa(&plan, &data, arch, &cfg).unwrap();

        let last = plan.slice(1, 3)[0];
        let out = unlearn(&t.ensemble, &plan, &[last], &data, &cfg).unwrap();
        assert_eq!(out.n_is, 1);
        assert_eq!(out.affected, vec![AffectedShard { shard: 1, k_star: 4 }]);

        let first = plan.slice(2, 0)[1];
        let out = unlearn(&t.ensemble, &plan, &[first], &data, &cfg).unwrap();
        assert_eq!(out.n_is, 4);
        let ens = out.ensemble.unwrap();
        assert_eq!(ens.shards[0], t.ensemble.shards[0]);
        assert_eq!(ens.shards[1], t.ensemble.shards[1]);
        assert!(!out.trace[&2].contains(&first));

        assert!(matches!(unlearn(&t.ensemble, &plan, &[10_000], &data, &cfg), Err(Error::UnknownId(10_000))));
    }

    #[test]
    fn suffix_retraining_matches_full_retraining() {
        let (data, arch, cfg) = setup();
        let ids: Vec<usize> = (0..data.len()).collect();
        let plan = partition(&ids, 2, 5, 11).unwrap();
        let t = train_sisa(&plan, &data, arch, &cfg).unwrap();
        let removal = [plan.slice(0, 2)[0], plan.slice(0, 4)[1], plan.slice(1, 3)[0]];
        let out = unlearn(&t.ensemble, &plan, &removal, &data, &cfg).unwrap();
        assert_eq!(out.n_is, 3 + 2);
        let reduced = out.plan.clone().unwrap();
        let full = train_sisa(&reduced, &data, arch, &cfg).unwrap();
        assert_eq!(out.ensemble.unwrap(), full.ensemble);
    }

    #[test]
    fn removing_a_subset_never_costs_more() {
        let (data, arch, cfg) = setup();
        let ids: Vec<usize> = (0..data.len()).collect();
        let plan = partition(&ids, 3, 4, 8).unwrap();
        let t = train_sisa(&plan, &data, arch, &cfg).unwrap();
        let mut rng = SeededRng::new(2);
        for _ in 0..5 {
            let mut pool = ids.clone();
            rng.shuffle(&mut pool);
            let full = &pool[..10];
            let sub = &pool[..4];
            let a = unlearn(&t.ensemble, &plan, full, &data, &cfg).unwrap();
            let b = unlearn(&t.ensemble, &plan, sub, &data, &cfg).unwrap();
            assert!(b.n_is <= a.n_is);
        }
    }
}
