mod common;

use common::*;
use unlearn_guard::data::{make_scenario, synth_blobs, RemovalScenario};
use unlearn_guard::distance::FeatureSet;
use unlearn_guard::models::{train, Arch, ToyModel};
use unlearn_guard::numkit::cosine;
use unlearn_guard::pipeline::{run_filter, train_comparison_pair};
use unlearn_guard::privacy::{
    build_nei_map, check_bound, check_bound_with, compare_models, estimate_all, mia_threshold_attack, Estimates,
    LabeledSet, NeiMap,
};
use unlearn_guard::{Split, TrainConfig};

fn halves(n: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..n).step_by(2).collect(), (1..n).step_by(2).collect())
}

#[test]
fn untrained_target_is_at_chance() {
    let data = synth_blobs(3, 60, 6, 1.0, 1).unwrap();
    let arch = Arch::new(6, 16, 3).unwrap();
    let (ins, outs) = halves(data.len());
    let (x_in, y_in) = data.subset(&ins);
    let (x_out, y_out) = data.subset(&outs);
    let mut accs = Vec::new();
    for seed in 0..20 {
        let cfg = TrainConfig { epochs: 30, lr: 0.2, batch_size: 8, seed, shuffle: true };
        let shadow = train(&x_in, &y_in, arch, &cfg, seed).unwrap().model;
        let target = ToyModel::init(arch, 1000 + seed);
        let (q, qy) = data.subset(&(0..data.len()).collect::<Vec<_>>());
        let member: Vec<bool> = (0..data.len()).map(|i| i % 2 == 0).collect();
        let r = mia_threshold_attack(
            &target,
            &shadow,
            LabeledSet { inputs: &x_in, labels: &y_in },
            LabeledSet { inputs: &x_out, labels: &y_out },
            LabeledSet { inputs: &q, labels: &qy },
            &member,
        )
        .unwrap();
        accs.push(r.accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.15, "{mean}");
}

#[test]
fn identical_in_out_distributions_give_no_shadow_advantage() {
    // The shadow never sees either half, so member and non-member scores are
    // exchangeable.
    let data = synth_blobs(3, 100, 6, 1.5, 2).unwrap();
    let arch = Arch::new(6, 8, 3).unwrap();
    let (ins, outs) = halves(data.len());
    let (x_in, y_in) = data.subset(&ins);
    let (x_out, y_out) = data.subset(&outs);
    for seed in 0..5 {
        let shadow = ToyModel::init(arch, seed);
        let r = mia_threshold_attack(
            &shadow,
            &shadow,
            LabeledSet { inputs: &x_in, labels: &y_in },
            LabeledSet { inputs: &x_out, labels: &y_out },
            LabeledSet { inputs: &x_in, labels: &y_in },
            &vec![true; y_in.len()],
        )
        .unwrap();
        assert!(r.shadow_accuracy <= 0.6, "{}", r.shadow_accuracy);
    }
}

#[test]
fn mia_is_deterministic() {
    let data = synth_blobs(2, 40, 3, 1.0, 3).unwrap();
    let arch = Arch::new(3, 8, 2).unwrap();
    let (ins, outs) = halves(data.len());
    let (x_in, y_in) = data.subset(&ins);
    let (x_out, y_out) = data.subset(&outs);
    let shadow = train(&x_in, &y_in, arch, &train_config(1), 1).unwrap().model;
    let run = || {
        mia_threshold_attack(
            &shadow,
            &shadow,
            LabeledSet { inputs: &x_in, labels: &y_in },
            LabeledSet { inputs: &x_out, labels: &y_out },
            LabeledSet { inputs: &x_out, labels: &y_out },
            &vec![false; y_out.len()],
        )
        .unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn tight_blobs_collapse_within_class_features() {
    let data = synth_blobs(3, 30, 4, 1e-3, 5).unwrap();
    let arch = Arch::new(4, 16, 3).unwrap();
    let m = train(&data.inputs, &data.labels, arch, &train_config(2), 2).unwrap().model;
    let fs = FeatureSet::from_model(&m, &data.inputs, data.labels.clone(), (0..90).collect(), vec![Split::Remaining; 90])
        .unwrap();
    let mut worst: f64 = 1.0;
    for i in 0..90 {
        for j in 0..90 {
            if data.labels[i] == data.labels[j] {
                worst = worst.min(cosine(fs.feature(i).unwrap(), fs.feature(j).unwrap()).unwrap());
            }
        }
    }
    assert!(worst > 0.999, "{worst}");
}

#[test]
fn empty_filtered_set_is_a_trivial_pass() {
    let data = blobs(1);
    let s = make_scenario(&data, &RemovalScenario::Random { size: 20, seed: 1 }).unwrap();
    let cfg = pipeline_config(1);
    let (off, _, _) = run_filter(&data, &s, &cfg).unwrap();
    let (m_r, m_u) = train_comparison_pair(&data, &s.remaining, &[], off.arch, &cfg.train, 1).unwrap();
    let map = NeiMap::from_pairs(vec![]).unwrap();
    let r = check_bound(&m_u, &m_r, &data, &off.features, &map, &s.remaining, off.params.theta).unwrap();
    assert_eq!((r.n, r.kl, r.epsilon_hat), (0, 0.0, 0.0));
    assert!(r.all_pass());
}

#[test]
fn corrupted_model_with_stale_estimates_fails_final_step() {
    let data = blobs(2);
    let s = make_scenario(&data, &RemovalScenario::Random { size: 40, seed: 2 }).unwrap();
    let cfg = pipeline_config(2);
    let (off, res, _) = run_filter(&data, &s, &cfg).unwrap();
    assert!(!res.d_u_plus.is_empty());
    let (m_r, m_u) = train_comparison_pair(&data, &s.remaining, &res.d_u_plus, off.arch, &cfg.train, 2).unwrap();
    let map = build_nei_map(&off.matrix, &res.d_u_plus, &s.remaining, |i| off.label(i), res.theta).unwrap();
    let honest: Estimates = estimate_all(&m_u, &m_r, &data, &off.features, &map, &s.remaining).unwrap();

    let mut corrupted = m_u.clone();
    for b in corrupted.b2_mut().iter_mut().step_by(2) {
        *b += 25.0;
    }
    // Honest constants still cover the corrupted model: the clamped per-sample
    // KL cannot exceed -ln(1e-12), well under eps/n here.
    let covered = check_bound_with(&corrupted, &m_r, &data, &off.features, &map, res.theta, honest).unwrap();
    assert!(covered.steps.iter().find(|st| st.name == "d_kl_bound").unwrap().pass);

    // An estimator that drifted to zero constants does not.
    let stale = Estimates { lambda1: 0.0, lambda2: 0.0, delta: 0.0 };
    let report = check_bound_with(&corrupted, &m_r, &data, &off.features, &map, res.theta, stale).unwrap();
    let d = report.steps.iter().find(|st| st.name == "d_kl_bound").unwrap();
    assert!(!d.pass);
    assert!(!d.counterexample.is_empty());
    assert!(report.failure_dump().contains("pair ("));
}

#[test]
fn comparison_table_on_blobs() {
    let data = blobs(4);
    let s = make_scenario(&data, &RemovalScenario::Random { size: 50, seed: 4 }).unwrap();
    let cfg = pipeline_config(4);
    let (off, res, _) = run_filter(&data, &s, &cfg).unwrap();
    let (m_r, m_u) = train_comparison_pair(&data, &s.remaining, &res.d_u_plus, off.arch, &cfg.train, 4).unwrap();
    let t = compare_models(&m_u, &m_r, &data, &s.remaining, &s.removal, &s.test).unwrap();
    assert_eq!(t.rows.len(), 3);
    assert!(t.row("d_t").unwrap().abs_gap < 0.05);
    let json = serde_json::to_value(&t).unwrap();
    assert!(json["rows"][0]["acc_m_u"].is_number());
}
