use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;
use unlearn_guard::baselines::{
    clustering_scores, confidence_scores, curvature_scores, select_by_score, threshold_params, Method, ScoreTable,
    Thresholds,
};
use unlearn_guard::data::make_scenario;
use unlearn_guard::filter::scenario_report;
use unlearn_guard::models::accuracy;
use unlearn_guard::pipeline::{online_filter, prepare, train_comparison_pair};
use unlearn_guard::privacy::{
    build_nei_map, check_bound, check_bound_with, compare_models, mia_threshold_attack, BoundReport, Estimates,
    LabeledSet, NeiMap,
};
use unlearn_guard::sisa::{partition, train_sisa, unlearn};
use unlearn_guard::{
    FilterResult, Offline, RawDataset, RemovalScenario, ScenarioKind, ScenarioSplits, ThresholdRule, ToyModel,
};

use crate::config::{FilterMethod, RunConfig};
use crate::error::CliError;
use crate::output::Writer;

/// Bias shift applied to every other output unit by the fault hook.
const FAULT_BIAS_SHIFT: f64 = 25.0;

pub struct Ctx {
    pub cfg: RunConfig,
    pub data: RawDataset,
    pub out: Writer,
    offline: BTreeMap<Vec<usize>, Offline>,
}

struct Prepared {
    index: usize,
    scenario: RemovalScenario,
    splits: ScenarioSplits,
    training: Vec<usize>,
}

#[derive(Serialize)]
struct SplitSizes {
    remaining: usize,
    removal: usize,
    test: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    removed_class: Option<usize>,
}

impl From<&ScenarioSplits> for SplitSizes {
    fn from(s: &ScenarioSplits) -> Self {
        Self { remaining: s.remaining.len(), removal: s.removal.len(), test: s.test.len(), removed_class: s.removed_class }
    }
}

#[derive(Serialize)]
struct ScenarioTiming {
    index: usize,
    offline_seconds: f64,
    online_seconds: f64,
}

impl Ctx {
    pub fn new(cfg: RunConfig, out: Writer) -> Result<Self, CliError> {
        let data = cfg.load_dataset()?;
        Ok(Self { cfg, data, out, offline: BTreeMap::new() })
    }

    fn scenarios(&self) -> Result<Vec<Prepared>, CliError> {
        self.cfg
            .scenarios
            .iter()
            .enumerate()
            .map(|(index, sc)| {
                let splits = make_scenario(&self.data, sc).map_err(|e| CliError::stage("scenario", e))?;
                Ok(Prepared { index, scenario: sc.clone(), training: splits.training(), splits })
            })
            .collect()
    }

    /// Offline state for a training portion, built once and reused by every
    /// scenario sharing it. Returns the build time on first use, else 0.
    fn ensure_offline(&mut self, training: &[usize]) -> Result<f64, CliError> {
        let mut secs = 0.0;
        if !self.offline.contains_key(training) {
            let off = prepare(&self.data, training, &self.cfg.model).map_err(|e| CliError::stage("offline", e))?;
            secs = off.seconds;
            self.offline.insert(training.to_vec(), off);
        }
        Ok(secs)
    }

    fn scores(&mut self, method: Method, training: &[usize]) -> Result<ScoreTable, CliError> {
        let curvature = self.cfg.curvature.unwrap_or_default();
        let k = self.cfg.clustering_k;
        self.ensure_offline(training)?;
        let off = &self.offline[training];
        let stage = |e| CliError::stage("baselines", e);
        match method {
            Method::Confidence => confidence_scores(&off.m_o.model, &self.data, &off.training).map_err(stage),
            Method::Curvature => {
                let ckpt = off
                    .m_o
                    .epoch(2)
                    .ok_or_else(|| CliError::Config("curvature scores need model.train.epochs >= 2".into()))?;
                curvature_scores(ckpt.model(), &self.data, &off.training, &curvature).map_err(stage)
            }
            Method::Clustering => clustering_scores(&off.features, k).map_err(stage),
        }
    }

    /// Runs the configured filter on one scenario.
    fn filter(&mut self, p: &Prepared) -> Result<(FilterResult, ScenarioTiming), CliError> {
        let method = self.cfg.method;
        let rule = self.cfg.rule();
        let offline_seconds = self.ensure_offline(&p.training)?;
        let start = Instant::now();
        let result = match method {
            FilterMethod::Similarity => {
                online_filter(&self.offline[&p.training], &p.splits).map_err(|e| CliError::stage("filter", e))?.0
            }
            baseline => {
                let table = self.scores(baseline_method(baseline), &p.training)?;
                let t = threshold_params(&table).map_err(|e| CliError::stage("baselines", e))?;
                select_by_score(&table, t.get(rule), &p.splits.removal).map_err(|e| CliError::stage("baselines", e))?
            }
        };
        let timing = ScenarioTiming { index: p.index, offline_seconds, online_seconds: start.elapsed().as_secs_f64() };
        Ok((result, timing))
    }

    fn comparison_pair(&mut self, p: &Prepared, d_u_plus: &[usize]) -> Result<(ToyModel, ToyModel), CliError> {
        self.ensure_offline(&p.training)?;
        let arch = self.offline[&p.training].arch;
        let cfg = &self.cfg.model;
        train_comparison_pair(&self.data, &p.splits.remaining, d_u_plus, arch, &cfg.train, cfg.init_seed)
            .map_err(|e| CliError::stage("retrain", e))
    }
}

fn baseline_method(m: FilterMethod) -> Method {
    match m {
        FilterMethod::Confidence => Method::Confidence,
        FilterMethod::Curvature => Method::Curvature,
        FilterMethod::Clustering => Method::Clustering,
        FilterMethod::Similarity => unreachable!("not a baseline"),
    }
}

fn file_stem(p: &Prepared) -> String {
    let kind = match p.scenario.kind() {
        ScenarioKind::Random => "random",
        ScenarioKind::ClassRemoval => "class_removal",
    };
    format!("scenario_{:02}_{kind}", p.index)
}

pub fn synth(ctx: &mut Ctx) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Meta<'a> {
        rows: usize,
        dim: usize,
        n_classes: usize,
        source: &'a str,
        file: &'a str,
    }
    let d = &ctx.data;
    let mut csv = String::from("label");
    for j in 0..d.dim() {
        let _ = write!(csv, ",x{j}");
    }
    csv.push('\n');
    for (row, label) in d.inputs.iter_rows().zip(&d.labels) {
        let _ = write!(csv, "{label}");
        for v in row {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    ctx.out.csv("dataset.csv", &csv)?;
    let meta = Meta { rows: d.len(), dim: d.dim(), n_classes: d.n_classes, source: &d.provenance, file: "dataset.csv" };
    ctx.out.json("dataset.json", &meta)?;
    Ok(())
}

pub fn train(ctx: &mut Ctx) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct TrainSummary {
        index: usize,
        model_file: String,
        initial_loss: f64,
        final_loss: f64,
        steps: usize,
        train_accuracy: f64,
        test_accuracy: f64,
    }
    #[derive(Serialize)]
    struct TrainTiming {
        index: usize,
        offline_seconds: f64,
    }
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for p in ctx.scenarios()? {
        let offline_seconds = ctx.ensure_offline(&p.training)?;
        let off = &ctx.offline[&p.training];
        let (x, y) = ctx.data.subset(&p.training);
        let (xt, yt) = ctx.data.subset(&p.splits.test);
        let stage = |e| CliError::stage("train", e);
        let train_accuracy = accuracy(&off.m_o.model, &x, &y).map_err(stage)?;
        let test_accuracy = accuracy(&off.m_o.model, &xt, &yt).map_err(stage)?;
        let model_file = format!("{}_m_o.bin", file_stem(&p));
        off.m_o.model.save(ctx.out.path(&model_file)).map_err(stage)?;
        rows.push(TrainSummary {
            index: p.index,
            model_file,
            initial_loss: off.m_o.initial_loss,
            final_loss: off.m_o.final_loss,
            steps: off.m_o.report.steps,
            train_accuracy,
            test_accuracy,
        });
        timings.push(TrainTiming { index: p.index, offline_seconds });
    }
    ctx.out.json("train.json", &rows)?;
    ctx.out.json("train_timings.json", &timings)?;
    Ok(())
}

pub fn filter(ctx: &mut Ctx) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct ScenarioOut {
        index: usize,
        scenario: RemovalScenario,
        sizes: SplitSizes,
        #[serde(skip_serializing_if = "Option::is_none")]
        params: Option<unlearn_guard::SimilarityParams>,
        result: FilterResult,
    }
    #[derive(Serialize)]
    struct FilterOut {
        method: FilterMethod,
        #[serde(skip_serializing_if = "Option::is_none")]
        threshold_rule: Option<ThresholdRule>,
        scenarios: Vec<ScenarioOut>,
        summary: unlearn_guard::filter::ScenarioSummary,
    }
    let mut outs = Vec::new();
    let mut timings = Vec::new();
    let mut kinds = Vec::new();
    for p in ctx.scenarios()? {
        let (result, timing) = ctx.filter(&p)?;
        let params = (ctx.cfg.method == FilterMethod::Similarity).then(|| ctx.offline[&p.training].params.clone());
        kinds.push((p.scenario.kind(), result.clone()));
        timings.push(timing);
        outs.push(ScenarioOut {
            index: p.index,
            sizes: (&p.splits).into(),
            scenario: p.scenario,
            params,
            result,
        });
    }
    let summary = scenario_report(&kinds);
    let mut csv = String::from("index,scenario,requests,unnecessary,p_minus\n");
    for (o, run) in outs.iter().zip(&summary.runs) {
        let kind = match run.scenario {
            ScenarioKind::Random => "random",
            ScenarioKind::ClassRemoval => "class_removal",
        };
        let _ = writeln!(csv, "{},{kind},{},{},{}", o.index, run.requests, run.unnecessary, run.p_minus);
    }
    let rule = (ctx.cfg.method != FilterMethod::Similarity).then(|| ctx.cfg.rule());
    ctx.out.json("filter.json", &FilterOut { method: ctx.cfg.method, threshold_rule: rule, scenarios: outs, summary })?;
    ctx.out.csv("filter.csv", &csv)?;
    ctx.out.json("filter_timings.json", &timings)?;
    Ok(())
}

pub fn baselines(ctx: &mut Ctx) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct MethodOut {
        method: Method,
        thresholds: Thresholds,
        scores_file: String,
        /// P- under the lo, mid and hi rules.
        p_minus: BTreeMap<&'static str, f64>,
    }
    #[derive(Serialize)]
    struct ScenarioOut {
        index: usize,
        scenario: RemovalScenario,
        methods: Vec<MethodOut>,
    }
    let mut outs = Vec::new();
    for p in ctx.scenarios()? {
        let mut methods = Vec::new();
        for method in [Method::Confidence, Method::Curvature, Method::Clustering] {
            if method == Method::Curvature && ctx.cfg.model.train.epochs < 2 {
                continue;
            }
            let table = ctx.scores(method, &p.training)?;
            let stage = |e| CliError::stage("baselines", e);
            let thresholds = threshold_params(&table).map_err(stage)?;
            let mut p_minus = BTreeMap::new();
            for (name, rule) in [("lo", ThresholdRule::Lo), ("mid", ThresholdRule::Mid), ("hi", ThresholdRule::Hi)] {
                let r = select_by_score(&table, thresholds.get(rule), &p.splits.removal).map_err(stage)?;
                p_minus.insert(name, r.p_minus);
            }
            let scores_file = format!("{}_{}_scores.csv", file_stem(&p), method.as_str());
            ctx.out.csv(&scores_file, &table.to_csv())?;
            methods.push(MethodOut { method, thresholds, scores_file, p_minus });
        }
        outs.push(ScenarioOut { index: p.index, scenario: p.scenario, methods });
    }
    ctx.out.json("baselines.json", &outs)?;
    Ok(())
}

pub fn sisa(ctx: &mut Ctx) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Arm {
        removed: usize,
        n_is: usize,
        steps: usize,
        retrained_shards: Vec<usize>,
    }
    #[derive(Serialize)]
    struct ScenarioOut {
        index: usize,
        scenario: RemovalScenario,
        shards: usize,
        slices: usize,
        retrain: Arm,
        filtered: Arm,
        /// `acc_m_u` is the filtered arm, `acc_m_r` the full-retrain arm.
        comparison: unlearn_guard::privacy::ComparisonTable,
    }
    #[derive(Serialize)]
    struct SisaTiming {
        index: usize,
        offline_seconds: f64,
        online_seconds: f64,
        retrain_seconds: f64,
        filtered_seconds: f64,
    }
    let sisa_cfg = ctx.cfg.sisa.clone().ok_or_else(|| CliError::Config("the sisa command needs a `sisa` section".into()))?;
    let mut outs = Vec::new();
    let mut timings = Vec::new();
    for p in ctx.scenarios()? {
        let (res, t) = ctx.filter(&p)?;
        let arch = ctx.offline[&p.training].arch;
        let stage = |e| CliError::stage("sisa", e);
        let plan = partition(&p.training, sisa_cfg.shards, sisa_cfg.slices, p.scenario.seed()).map_err(stage)?;
        let trained = train_sisa(&plan, &ctx.data, arch, &sisa_cfg.train).map_err(stage)?;
        let retrain = unlearn(&trained.ensemble, &plan, &p.splits.removal, &ctx.data, &sisa_cfg.train).map_err(stage)?;
        let ours = unlearn(&trained.ensemble, &plan, &res.d_u_minus, &ctx.data, &sisa_cfg.train).map_err(stage)?;
        if ours.n_is > retrain.n_is {
            return Err(CliError::Invariant(format!(
                "scenario {}: filtered arm retrained {} slices, more than full retraining ({})",
                p.index, ours.n_is, retrain.n_is
            )));
        }
        let (Some(ens_r), Some(ens_u)) = (&retrain.ensemble, &ours.ensemble) else {
            unreachable!("unlearn always returns the updated ensemble")
        };
        let comparison = compare_models(ens_u, ens_r, &ctx.data, &p.splits.remaining, &p.splits.removal, &p.splits.test)
            .map_err(stage)?;
        timings.push(SisaTiming {
            index: p.index,
            offline_seconds: t.offline_seconds,
            online_seconds: t.online_seconds,
            retrain_seconds: retrain.wall_seconds,
            filtered_seconds: ours.wall_seconds,
        });
        outs.push(ScenarioOut {
            index: p.index,
            scenario: p.scenario,
            shards: sisa_cfg.shards,
            slices: sisa_cfg.slices,
            retrain: Arm {
                removed: p.splits.removal.len(),
                n_is: retrain.n_is,
                steps: retrain.steps,
                retrained_shards: retrain.retrained_shards(),
            },
            filtered: Arm {
                removed: res.d_u_minus.len(),
                n_is: ours.n_is,
                steps: ours.steps,
                retrained_shards: ours.retrained_shards(),
            },
            comparison,
        });
    }
    ctx.out.json("sisa.json", &outs)?;
    ctx.out.json("sisa_timings.json", &timings)?;
    Ok(())
}

pub fn bound(ctx: &mut Ctx, inject_fault: bool) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct ScenarioOut {
        index: usize,
        scenario: RemovalScenario,
        d_u_plus: usize,
        nei_map: Vec<(usize, usize)>,
        fault_injected: bool,
        report: BoundReport,
    }
    let mut outs = Vec::new();
    let mut failed = Vec::new();
    for p in ctx.scenarios()? {
        let (res, _) = ctx.filter(&p)?;
        let (m_r, mut m_u) = ctx.comparison_pair(&p, &res.d_u_plus)?;
        let off = &ctx.offline[&p.training];
        let stage = |e| CliError::stage("bound", e);
        let map = if res.d_u_plus.is_empty() {
            NeiMap::from_pairs(Vec::new()).map_err(stage)?
        } else {
            build_nei_map(&off.matrix, &res.d_u_plus, &p.splits.remaining, |i| off.label(i), res.theta)
                .map_err(stage)?
        };
        let report = if inject_fault {
            // Test hook: a corrupted kept-model checked against stale zero constants.
            for b in m_u.b2_mut().iter_mut().step_by(2) {
                *b += FAULT_BIAS_SHIFT;
            }
            let stale = Estimates { lambda1: 0.0, lambda2: 0.0, delta: 0.0 };
            check_bound_with(&m_u, &m_r, &ctx.data, &off.features, &map, res.theta, stale).map_err(stage)?
        } else {
            check_bound(&m_u, &m_r, &ctx.data, &off.features, &map, &p.splits.remaining, res.theta).map_err(stage)?
        };
        if !report.all_pass() {
            let name = format!("{}_bound_failures.txt", file_stem(&p));
            ctx.out.text(&name, &report.failure_dump())?;
            failed.push(format!("scenario {} (see {name})", p.index));
        }
        outs.push(ScenarioOut {
            index: p.index,
            scenario: p.scenario,
            d_u_plus: res.d_u_plus.len(),
            nei_map: map.pairs().to_vec(),
            fault_injected: inject_fault,
            report,
        });
    }
    ctx.out.json("bound.json", &outs)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::BoundFailed(failed.join(", ")))
    }
}

pub fn report(ctx: &mut Ctx) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct ScenarioOut {
        index: usize,
        scenario: RemovalScenario,
        d_u_plus: usize,
        d_u_minus: usize,
        table_file: String,
        comparison: unlearn_guard::privacy::ComparisonTable,
    }
    let mut outs = Vec::new();
    for p in ctx.scenarios()? {
        let (res, _) = ctx.filter(&p)?;
        let (m_r, m_u) = ctx.comparison_pair(&p, &res.d_u_plus)?;
        let stage = |e| CliError::stage("report", e);
        let s = &p.splits;
        let mut table = compare_models(&m_u, &m_r, &ctx.data, &s.remaining, &s.removal, &s.test).map_err(stage)?;

        // Shadow trained on half the remaining set; the test split stands in
        // for non-members.
        let shadow_ids: Vec<usize> = s.remaining.iter().step_by(2).copied().collect();
        let off = &ctx.offline[&p.training];
        let cfg = &ctx.cfg.model;
        let shadow = unlearn_guard::pipeline::train_on(&ctx.data, &shadow_ids, off.arch, &cfg.train, cfg.init_seed ^ 1)
            .map_err(stage)?
            .model;
        let (xi, yi) = ctx.data.subset(&shadow_ids);
        let (xo, yo) = ctx.data.subset(&s.test);
        let (xq, yq) = ctx.data.subset(&s.removal);
        let kept: std::collections::HashSet<usize> = res.d_u_plus.iter().copied().collect();
        let member_u: Vec<bool> = s.removal.iter().map(|id| kept.contains(id)).collect();
        let member_r = vec![false; s.removal.len()];
        let mia = |target: &ToyModel, member: &[bool]| {
            mia_threshold_attack(
                target,
                &shadow,
                LabeledSet { inputs: &xi, labels: &yi },
                LabeledSet { inputs: &xo, labels: &yo },
                LabeledSet { inputs: &xq, labels: &yq },
                member,
            )
        };
        table.mia_m_u = Some(mia(&m_u, &member_u).map_err(stage)?);
        table.mia_m_r = Some(mia(&m_r, &member_r).map_err(stage)?);

        let table_file = format!("{}_comparison.csv", file_stem(&p));
        ctx.out.csv(&table_file, &table.to_csv())?;
        outs.push(ScenarioOut {
            index: p.index,
            scenario: p.scenario,
            d_u_plus: res.d_u_plus.len(),
            d_u_minus: res.d_u_minus.len(),
            table_file,
            comparison: table,
        });
    }
    ctx.out.json("report.json", &outs)?;
    Ok(())
}
