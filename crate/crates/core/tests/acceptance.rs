//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::{BTreeSet, HashMap};
use std::time::{Duration, Instant};

use common::*;
use unlearn_guard::baselines::{
    clustering_scores, confidence_scores, curvature_scores, select_by_score, threshold_params, CurvatureConfig, ThresholdRule,
    ScoreEntry, ScoreTable, Thresholds,
};
use unlearn_guard::data::{make_scenario, RemovalScenario};
use unlearn_guard::distance::{build_distance_matrix, build_distance_matrix_serial};
use unlearn_guard::filter::filter_requests;
use unlearn_guard::models::{accuracy, grad_check, train, Arch, ToyModel, TrainConfig};
use unlearn_guard::pipeline::{online_filter, prepare, run_filter, train_comparison_pair};
use unlearn_guard::privacy::{build_nei_map, check_bound};
use unlearn_guard::sisa::{partition, train_sisa, unlearn};
use unlearn_guard::{FeatureSet, Method, SeededRng, SimilarityParams, Split};

type Outcome = Result<String, String>;

fn within(limit: Duration, start: Instant) -> Result<f64, String> {
    let secs = start.elapsed().as_secs_f64();
    if secs < limit.as_secs_f64() {
        Ok(secs)
    } else {
        Err(format!("runtime {secs:.1}s exceeds {:.0}s", limit.as_secs_f64()))
    }
}

fn fail<E: std::fmt::Debug>(e: E) -> String {
    format!("error: {e:?}")
}

fn filter_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut mismatches = 0;
    let mut filtered = 0;
    let mut requests = 0;
    for inst in 0..50u64 {
        let mut rng = SeededRng::new(1000 + inst);
        let classes = if inst % 2 == 0 { 2 } else { 5 };
        let d = if (inst / 2) % 2 == 0 { 4 } else { 16 };
        let n = 40 + rng.below(161);
        let (raw, labels) = clustered_rows(&mut rng, n, d, classes);
        let fs = FeatureSet::from_raw(&raw, labels.clone(), (0..n).collect(), vec![Split::Remaining; n]).map_err(fail)?;
        let m = build_distance_matrix(&fs);
        let k = 1 + rng.below(n / 3);
        let (d_u, d_r) = random_split(&mut rng, n, k);
        let theta = rng.uniform(0.2, 0.95);
        let alpha = rng.below(6) as f64 + if rng.unit() < 0.3 { 0.5 } else { 0.0 };
        let got = filter_requests(&m, &d_u, &d_r, |i| Ok(labels[i]), &SimilarityParams::fixed(theta, alpha))
            .map_err(fail)?;

        let mut want_plus = Vec::new();
        let mut want_minus = Vec::new();
        for &x in &d_u {
            let count = d_r
                .iter()
                .filter(|&&y| labels[y] == labels[x] && naive_cosine(raw.row(x), raw.row(y)) >= theta)
                .count();
            if count as f64 > alpha {
                want_plus.push(x);
            } else {
                want_minus.push(x);
            }
        }
        mismatches += got.d_u_plus.iter().filter(|x| !want_plus.contains(x)).count();
        mismatches += want_plus.iter().filter(|x| !got.d_u_plus.contains(x)).count();
        if got.d_u_minus != want_minus {
            mismatches += 1;
        }
        filtered += want_plus.len();
        requests += d_u.len();
    }
    let secs = within(Duration::from_secs(10), start)?;
    if mismatches > 0 {
        return Err(format!("{mismatches} mismatches against the brute-force filter"));
    }
    Ok(format!("50 instances, {requests} requests ({filtered} unnecessary), 0 mismatches, {secs:.2}s"))
}

struct Arm {
    class: Vec<f64>,
    random: Vec<f64>,
}

impl Arm {
    fn new() -> Self {
        Self { class: Vec::new(), random: Vec::new() }
    }

    fn gap(&self) -> f64 {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        mean(&self.class) - mean(&self.random)
    }
}

fn adaptivity() -> Outcome {
    let start = Instant::now();
    let mut ours = Arm::new();
    let mut baselines: Vec<(Method, Arm)> =
        [Method::Confidence, Method::Curvature, Method::Clustering].into_iter().map(|m| (m, Arm::new())).collect();
    for seed in 0..10u64 {
        let data = blobs(seed);
        let class = make_scenario(&data, &RemovalScenario::ClassRemoval { class: None, fraction: 0.5, seed })
            .map_err(fail)?;
        let random = make_scenario(&data, &RemovalScenario::Random { size: class.removal.len(), seed }).map_err(fail)?;
        if class.training() != random.training() {
            return Err("scenarios disagree on the training portion".into());
        }
        let training = class.training();
        let off = prepare(&data, &training, &pipeline_config(seed)).map_err(fail)?;
        ours.class.push(online_filter(&off, &class).map_err(fail)?.0.p_minus);
        ours.random.push(online_filter(&off, &random).map_err(fail)?.0.p_minus);

        let epoch2 = off.m_o.epoch(2).ok_or("missing epoch-2 checkpoint")?.model();
        for (method, arm) in &mut baselines {
            let table = match method {
                Method::Confidence => confidence_scores(&off.m_o.model, &data, &training),
                Method::Curvature => {
                    curvature_scores(epoch2, &data, &training, &CurvatureConfig { seed, ..Default::default() })
                }
                Method::Clustering => clustering_scores(&off.features, 10),
            }
            .map_err(fail)?;
            // Each rule's threshold is fixed across the two scenarios; P⁻ is
            // averaged over the three rules.
            let thresholds = threshold_params(&table).map_err(fail)?;
            let (mut pc, mut pr) = (0.0, 0.0);
            for rule in [ThresholdRule::Lo, ThresholdRule::Mid, ThresholdRule::Hi] {
                let t = thresholds.get(rule);
                let c = select_by_score(&table, t, &class.removal).map_err(fail)?.p_minus;
                let r = select_by_score(&table, t, &random.removal).map_err(fail)?.p_minus;
                pc += c / 3.0;
                pr += r / 3.0;
            }
            arm.class.push(pc);
            arm.random.push(pr);
        }
    }
    let secs = within(Duration::from_secs(120), start)?;
    let mut detail = format!("similarity filter class-random gap {:+.3}", ours.gap());
    let mut problems = Vec::new();
    if ours.gap() < 0.1 {
        problems.push(format!("similarity filter gap {:.3} < 0.1", ours.gap()));
    }
    for (method, arm) in &baselines {
        detail += &format!(", {} {:+.3}", method.as_str(), arm.gap());
        if arm.gap().abs() > 0.05 {
            problems.push(format!("{} |gap| {:.3} > 0.05", method.as_str(), arm.gap().abs()));
        }
    }
    detail += &format!(", {secs:.1}s");
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", problems.join("; ")))
    }
}

fn scenario_independence() -> Outcome {
    let seed = 3;
    let data = blobs(seed);
    let splits = make_scenario(&data, &RemovalScenario::Random { size: 10, seed }).map_err(fail)?;
    let training = splits.training();
    let off = prepare(&data, &training, &pipeline_config(seed)).map_err(fail)?;
    let epoch2 = off.m_o.epoch(2).ok_or("missing epoch-2 checkpoint")?.model();
    let tables = [
        confidence_scores(&off.m_o.model, &data, &training).map_err(fail)?,
        curvature_scores(epoch2, &data, &training, &CurvatureConfig::default()).map_err(fail)?,
        clustering_scores(&off.features, 10).map_err(fail)?,
    ];
    let mut rng = SeededRng::new(77);
    let mut flips = 0;
    let mut observations = 0;
    let mut filter_flips = 0;
    for table in &tables {
        let threshold = threshold_params(table).map_err(fail)?.mid;
        let mut seen: HashMap<usize, bool> = HashMap::new();
        let mut filter_seen: HashMap<usize, bool> = HashMap::new();
        for _ in 0..100 {
            let mut ids = training.clone();
            rng.shuffle(&mut ids);
            let k = 1 + rng.below(training.len() / 2);
            let mut d_u = ids[..k].to_vec();
            d_u.sort_unstable();
            let res = select_by_score(table, threshold, &d_u).map_err(fail)?;
            for (&id, plus) in res.d_u_plus.iter().map(|i| (i, true)).chain(res.d_u_minus.iter().map(|i| (i, false))) {
                observations += 1;
                if *seen.entry(id).or_insert(plus) != plus {
                    flips += 1;
                }
            }
            if table.method == Method::Confidence {
                let mut d_r = ids[k..].to_vec();
                d_r.sort_unstable();
                let f = filter_requests(&off.matrix, &d_u, &d_r, |i| off.label(i), &off.params).map_err(fail)?;
                for (&id, plus) in f.d_u_plus.iter().map(|i| (i, true)).chain(f.d_u_minus.iter().map(|i| (i, false))) {
                    if *filter_seen.entry(id).or_insert(plus) != plus {
                        filter_flips += 1;
                    }
                }
            }
        }
    }
    if flips > 0 {
        return Err(format!("{flips} membership flips over {observations} observations"));
    }
    Ok(format!(
        "3 methods x 100 resamplings, {observations} observations, 0 flips (similarity filter contrast: {filter_flips} flips)"
    ))
}

fn bound_check() -> Outcome {
    let start = Instant::now();
    let mut passed = 0;
    let mut nonempty = 0;
    let mut failures = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    for seed in 0..20u64 {
        let data = blobs(seed);
        let splits = make_scenario(&data, &RemovalScenario::Random { size: 50, seed }).map_err(fail)?;
        let cfg = pipeline_config(seed);
        let (off, res, _) = run_filter(&data, &splits, &cfg).map_err(fail)?;
        let (m_r, m_u) =
            train_comparison_pair(&data, &splits.remaining, &res.d_u_plus, off.arch, &cfg.train, cfg.init_seed)
                .map_err(fail)?;
        let map = build_nei_map(&off.matrix, &res.d_u_plus, &splits.remaining, |i| off.label(i), res.theta)
            .map_err(fail)?;
        let report =
            check_bound(&m_u, &m_r, &data, &off.features, &map, &splits.remaining, res.theta).map_err(fail)?;
        let groups = report.groups();
        let all_groups = ["a", "b", "c", "d"].iter().all(|g| groups.get(*g).copied().unwrap_or(report.n == 0));
        if report.all_pass() && all_groups {
            passed += 1;
        } else {
            failures.push(format!("seed {seed}: {}", report.failure_dump().trim()));
        }
        if report.n > 0 {
            nonempty += 1;
            if report.epsilon_hat > 0.0 {
                worst_ratio = worst_ratio.max(report.kl / report.epsilon_hat);
            }
        }
    }
    let secs = within(Duration::from_secs(180), start)?;
    if passed < 20 {
        return Err(format!("{passed}/20 runs passed; {}", failures.join(" | ")));
    }
    Ok(format!("20/20 runs pass all steps ({nonempty} with nonempty filtered set, max KL/eps {worst_ratio:.2e}), {secs:.1}s"))
}

fn sisa_cost_reduction() -> Outcome {
    let start = Instant::now();
    let mut runs = 0;
    let mut violations = Vec::new();
    let mut with_plus = 0;
    let mut strict = 0;
    let mut step_failures = 0;
    let (mut total_retrain, mut total_ours) = (0usize, 0usize);
    for seed in 0..10u64 {
        let data = blobs(seed);
        let base = make_scenario(&data, &RemovalScenario::Random { size: 10, seed }).map_err(fail)?;
        let training = base.training();
        let cfg = pipeline_config(seed);
        let off = prepare(&data, &training, &cfg).map_err(fail)?;
        let sisa_cfg = TrainConfig { epochs: 5, lr: 0.1, batch_size: 64, seed, shuffle: true };
        let plan = partition(&training, 5, 10, seed).map_err(fail)?;
        let trained = train_sisa(&plan, &data, off.arch, &sisa_cfg).map_err(fail)?;
        for size in [10usize, 30, 50] {
            let splits = make_scenario(&data, &RemovalScenario::Random { size, seed }).map_err(fail)?;
            let (res, _) = online_filter(&off, &splits).map_err(fail)?;
            let retrain = unlearn(&trained.ensemble, &plan, &splits.removal, &data, &sisa_cfg).map_err(fail)?;
            let ours = unlearn(&trained.ensemble, &plan, &res.d_u_minus, &data, &sisa_cfg).map_err(fail)?;
            runs += 1;
            total_retrain += retrain.n_is;
            total_ours += ours.n_is;
            if ours.n_is > retrain.n_is {
                violations.push(format!("seed {seed} |D_u|={size}: {} > {}", ours.n_is, retrain.n_is));
            }
            if !res.d_u_plus.is_empty() {
                with_plus += 1;
                if ours.n_is < retrain.n_is {
                    strict += 1;
                }
            }
            if ours.n_is < retrain.n_is && ours.steps >= retrain.steps {
                step_failures += 1;
            }
        }
    }
    let secs = within(Duration::from_secs(300), start)?;
    let strict_rate = if with_plus == 0 { 0.0 } else { strict as f64 / with_plus as f64 };
    let detail = format!(
        "{runs} runs, total N_IS {total_ours} vs {total_retrain}, strict reduction in {strict}/{with_plus} runs with filtered requests ({:.0}%), {secs:.1}s",
        100.0 * strict_rate
    );
    if !violations.is_empty() {
        return Err(format!("N_IS increased: {}; {detail}", violations.join(", ")));
    }
    if strict_rate < 0.6 {
        return Err(format!("strict reduction rate below 60%; {detail}"));
    }
    if step_failures > 0 {
        return Err(format!("{step_failures} runs reduced N_IS without reducing steps; {detail}"));
    }
    Ok(detail)
}

fn privacy_proximity() -> Outcome {
    let mut gap_test = 0.0;
    let mut gap_remaining = 0.0;
    for seed in 0..10u64 {
        let data = blobs(seed);
        let splits = make_scenario(&data, &RemovalScenario::Random { size: 50, seed }).map_err(fail)?;
        let cfg = pipeline_config(seed);
        let (off, res, _) = run_filter(&data, &splits, &cfg).map_err(fail)?;
        let (m_r, m_u) =
            train_comparison_pair(&data, &splits.remaining, &res.d_u_plus, off.arch, &cfg.train, cfg.init_seed)
                .map_err(fail)?;
        let acc_gap = |ids: &[usize]| -> Result<f64, String> {
            let (x, y) = data.subset(ids);
            Ok((accuracy(&m_u, &x, &y).map_err(fail)? - accuracy(&m_r, &x, &y).map_err(fail)?).abs())
        };
        gap_test += acc_gap(&splits.test)?;
        gap_remaining += acc_gap(&splits.remaining)?;
    }
    let (gt, gr) = (gap_test / 10.0, gap_remaining / 10.0);
    let detail = format!("mean |acc gap| on D_t {gt:.4}, on D_r {gr:.4}");
    if gt <= 0.05 && gr <= 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn trainer_soundness() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = SeededRng::new(500 + seed);
        let arch = Arch::new(6, 10, 4).map_err(fail)?;
        let untrained = ToyModel::init(arch, seed);
        let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        worst = worst.max(grad_check(&untrained, &x, rng.below(4), 1e-5).map_err(fail)?);

        let data = blobs(seed);
        let a = train(&data.inputs, &data.labels, Arch::new(data.dim(), 16, 5).map_err(fail)?, &train_config(seed), seed)
            .map_err(fail)?;
        let b = train(&data.inputs, &data.labels, Arch::new(data.dim(), 16, 5).map_err(fail)?, &train_config(seed), seed)
            .map_err(fail)?;
        if a.model.to_bytes() != b.model.to_bytes() {
            return Err(format!("seed {seed}: retrain not bit-identical"));
        }
        let trained_x = data.input(seed as usize);
        worst = worst.max(grad_check(&a.model, trained_x, data.labels[seed as usize], 1e-5).map_err(fail)?);
    }
    let detail = format!("max grad-check relative error {worst:.2e} over 10 seeds, retrains bit-identical");
    if worst < 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn monotonicity() -> Outcome {
    let mut violations = 0;
    for case in 0..200u64 {
        let mut rng = SeededRng::new(9000 + case);
        let n = 30 + rng.below(90);
        let classes = 2 + rng.below(3);
        let (raw, labels) = clustered_rows(&mut rng, n, 6, classes);
        let fs = FeatureSet::from_raw(&raw, labels.clone(), (0..n).collect(), vec![Split::Remaining; n]).map_err(fail)?;
        let m = build_distance_matrix(&fs);
        let k = 1 + rng.below(n / 3);
        let (d_u, pool) = random_split(&mut rng, n, k);
        let cut = pool.len() / 2 + rng.below(pool.len() / 2);
        let small_r: Vec<usize> = pool[..cut].to_vec();
        let theta = rng.uniform(0.0, 0.9);
        let alpha = rng.below(5) as f64;
        let label = |i: usize| Ok(labels[i]);
        let plus = |d_r: &[usize], t: f64, a: f64| -> Result<BTreeSet<usize>, String> {
            let r = filter_requests(&m, &d_u, d_r, label, &SimilarityParams::fixed(t, a)).map_err(fail)?;
            Ok(r.d_u_plus.into_iter().collect())
        };
        let base = plus(&small_r, theta, alpha)?;
        let higher_theta = plus(&small_r, theta + rng.uniform(0.0, 0.1), alpha)?;
        let higher_alpha = plus(&small_r, theta, alpha + 1.0 + rng.below(3) as f64)?;
        let larger_r = plus(&pool, theta, alpha)?;
        violations += usize::from(!higher_theta.is_subset(&base));
        violations += usize::from(!higher_alpha.is_subset(&base));
        violations += usize::from(!base.is_subset(&larger_r));
    }
    if violations > 0 {
        return Err(format!("{violations} monotonicity violations"));
    }
    Ok("200 cases x (theta up, alpha up, D_r enlarged), 0 violations".into())
}

fn parameter_rule_fidelity() -> Outcome {
    let cases: [(&[f64], Thresholds); 10] = [
        (&[0.5, 0.5, 0.5], Thresholds { lo: 0.5, mid: 0.5, hi: 0.5 }),
        (&[0.0, 2.0], Thresholds { lo: 1e-3, mid: 1.0, hi: 2.0 }),
        (&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0], Thresholds { lo: 3.0, mid: 5.0, hi: 7.0 }),
        (&[1.0, 3.0], Thresholds { lo: 1.0, mid: 2.0, hi: 3.0 }),
        (&[0.0, 0.0, 0.0, 0.0], Thresholds { lo: 1e-3, mid: 0.0, hi: 0.0 }),
        (&[0.0, 0.0, 0.0, 0.0, 0.625], Thresholds { lo: 1e-3, mid: 0.125, hi: 0.375 }),
        (&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.5], Thresholds { lo: 1e-3, mid: 0.25, hi: 1.0 }),
        (&[3.0, 5.0], Thresholds { lo: 3.0, mid: 4.0, hi: 5.0 }),
        (&[0.25, 0.75], Thresholds { lo: 0.25, mid: 0.5, hi: 0.75 }),
        (&[0.0005, 0.0005], Thresholds { lo: 1e-3, mid: 0.0005, hi: 0.0005 }),
    ];
    let mut bad = Vec::new();
    let mut lo_equals_mid = 0;
    let mut floored = 0;
    for (i, (scores, want)) in cases.iter().enumerate() {
        let entries = scores.iter().enumerate().map(|(id, &score)| ScoreEntry { id, score }).collect();
        let table = ScoreTable::new(Method::Confidence, entries).map_err(fail)?;
        let got = threshold_params(&table).map_err(fail)?;
        if got != *want {
            bad.push(format!("table {i}: got {got:?}, want {want:?}"));
        }
        lo_equals_mid += usize::from(got.lo == got.mid);
        floored += usize::from(got.lo == 1e-3);
    }
    if !bad.is_empty() {
        return Err(bad.join("; "));
    }
    Ok(format!("10 tables exact, floor engaged in {floored}, lo = mid in {lo_equals_mid}"))
}

fn distance_matrix_harness() -> Outcome {
    let start = Instant::now();
    let (n, d) = (5000, 64);
    let mut rng = SeededRng::new(10);
    let raw = random_rows(&mut rng, n, d);
    let fs = FeatureSet::from_raw(&raw, vec![0; n], (0..n).collect(), vec![Split::Remaining; n]).map_err(fail)?;
    let t0 = Instant::now();
    let parallel = build_distance_matrix(&fs);
    let par_secs = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let serial = build_distance_matrix_serial(&fs);
    let ser_secs = t1.elapsed().as_secs_f64();
    let identical = parallel.values().iter().zip(serial.values()).all(|(a, b)| a.to_bits() == b.to_bits());
    drop(serial);
    if !identical {
        return Err("parallel and serial builds differ".into());
    }
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (i, j) = (rng.below(n), rng.below(n));
        worst = worst.max((parallel.at(i, j) - naive_cosine(raw.row(i), raw.row(j))).abs());
    }
    if worst > 1e-12 {
        return Err(format!("sampled entry off by {worst:.3e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(format!(
        "N={n} d={d}: parallel {par_secs:.2}s, serial {ser_secs:.2}s, bit-identical, max sampled error {worst:.1e}, total {secs:.1}s"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("filter oracle equivalence", filter_oracle_equivalence),
        ("adaptivity to removal scenario", adaptivity),
        ("baseline scenario independence", scenario_independence),
        ("KL bound proof chain", bound_check),
        ("SISA cost reduction", sisa_cost_reduction),
        ("model-privacy proximity", privacy_proximity),
        ("trainer soundness", trainer_soundness),
        ("monotonicity suite", monotonicity),
        ("parameter-rule fidelity", parameter_rule_fidelity),
        ("distance-matrix harness", distance_matrix_harness),
    ];
    let only: Option<usize> = std::env::var("UG_CRITERION").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
