use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{random_baseline, MetricKind, MetricReport};
use super::splits::{split_table, SplitSpec, Standardizer};
use crate::data::{FeatureTable, ModalityMap};
use crate::error::{Error, Result};
use crate::models::{build_source_model, ModelGraph};
use crate::rng::{derive_seed, rng_from};
use crate::shift::{analyze_shift, plan_setup1, plan_setup2, BranchPlan};
use crate::training::{
    continue_multibranch, finetune, train_dann, train_mmd, train_source_only, AdaptData, Labeled,
    StageTrace, TrainOutcome, TrainSettings,
};

/// Share of training users held out for early stopping.
pub const VALIDATION_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Random,
    S2s,
    S2t,
    S2tTl,
    Mmd,
    Dann,
    M3batUniformSetup1,
    M3batSetup1,
    M3batSetup2,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Random,
        Method::S2s,
        Method::S2t,
        Method::S2tTl,
        Method::Mmd,
        Method::Dann,
        Method::M3batUniformSetup1,
        Method::M3batSetup1,
        Method::M3batSetup2,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::S2s => "s2s",
            Method::S2t => "s2t",
            Method::S2tTl => "s2t_tl",
            Method::Mmd => "mmd",
            Method::Dann => "dann",
            Method::M3batUniformSetup1 => "m3bat_uniform_setup1",
            Method::M3batSetup1 => "m3bat_setup1",
            Method::M3batSetup2 => "m3bat_setup2",
        }
    }

    /// Row label in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Method::Random => "Random",
            Method::S2s => "S->S",
            Method::S2t => "S->T",
            Method::S2tTl => "S->T (w/ TL)",
            Method::Mmd => "MMD",
            Method::Dann => "DANN",
            Method::M3batUniformSetup1 => "Ours (λ=1, Setup1)",
            Method::M3batSetup1 => "Ours (w/ λ_m, Setup1)",
            Method::M3batSetup2 => "Ours (w/ λ_m, Setup2)",
        }
    }

    fn needs_source_model(self) -> bool {
        matches!(self, Method::S2s | Method::S2t | Method::S2tTl)
    }

    fn needs_dann(self) -> bool {
        matches!(
            self,
            Method::Dann | Method::M3batUniformSetup1 | Method::M3batSetup1 | Method::M3batSetup2
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| Error::Validation(format!("unknown method `{s}`")))
    }
}

/// Everything the runner needs besides the data.
#[derive(Debug, Clone)]
pub struct ExperimentSettings {
    pub train: TrainSettings,
    pub methods: Vec<Method>,
    /// Modalities per high- and low-shift branch in Setup1.
    pub alpha: usize,
    pub mmd_weight: f64,
    pub split: SplitSpec,
    pub seed: u64,
    /// Worker threads; 0 means one per available core.
    pub jobs: usize,
}

impl ExperimentSettings {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.split.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Validation("no methods selected".into()));
        }
        if self.alpha == 0 {
            return Err(Error::Validation("alpha must be at least 1".into()));
        }
        if !(self.mmd_weight.is_finite() && self.mmd_weight >= 0.0) {
            return Err(Error::Validation(format!(
                "MMD weight {} must be non-negative",
                self.mmd_weight
            )));
        }
        Ok(())
    }

    /// Selected methods, deduplicated, in canonical table order.
    pub fn ordered_methods(&self) -> Vec<Method> {
        Method::ALL.into_iter().filter(|m| self.methods.contains(m)).collect()
    }
}

/// Result of one (target, repeat) cell.
#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub target: String,
    pub repeat: usize,
    pub seed: u64,
    pub source_train_users: Vec<String>,
    pub source_val_users: Vec<String>,
    pub source_test_users: Vec<String>,
    pub target_train_users: Vec<String>,
    pub target_test_users: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub setup1: Option<BranchPlan>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub setup2: Option<BranchPlan>,
    pub results: BTreeMap<Method, f64>,
    pub failures: BTreeMap<Method, String>,
    #[serde(skip)]
    pub traces: BTreeMap<Method, StageTrace>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub source: String,
    pub metric: MetricKind,
    pub methods: Vec<Method>,
    pub cells: Vec<CellReport>,
    pub summary: Vec<MetricReport>,
}

impl ExperimentReport {
    /// Failed cells as `(method, target, repeat): message`.
    pub fn failures(&self) -> Vec<String> {
        self.cells
            .iter()
            .flat_map(|c| {
                c.failures
                    .iter()
                    .map(move |(m, e)| format!("({m}, {}, {}): {e}", c.target, c.repeat))
            })
            .collect()
    }

    pub fn summary_for(&self, method: Method, target: &str) -> Option<&MetricReport> {
        self.summary
            .iter()
            .find(|r| r.method == method.display_name() && r.target == target)
    }

    /// `method,target,metric,mean,std`.
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "target", "metric", "mean", "std"])?;
        for r in &self.summary {
            w.write_record([
                r.method.as_str(),
                r.target.as_str(),
                r.metric.name(),
                &format!("{:.6}", r.mean),
                &format!("{:.6}", r.std),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn summary_table(&self) -> String {
        let width = self.summary.iter().map(|r| r.method.chars().count()).max().unwrap_or(6);
        let mut out = format!("{:<width$}  {:<10}  {}\n", "method", "target", self.metric.name());
        for r in &self.summary {
            let pad = width - r.method.chars().count();
            out.push_str(&format!(
                "{}{}  {:<10}  {:.4} ± {:.4}\n",
                r.method,
                " ".repeat(pad),
                r.target,
                r.mean,
                r.std
            ));
        }
        out
    }
}

struct Prepared {
    source_train: FeatureTable,
    source_val: FeatureTable,
    source_test: FeatureTable,
    target_train: FeatureTable,
    target_test: FeatureTable,
    target_ft_train: FeatureTable,
    target_ft_val: FeatureTable,
    users: [Vec<String>; 5],
}

const TAG_SOURCE_SPLIT: u64 = 0x5053;
const TAG_TARGET_SPLIT: u64 = 0x5054;
const TAG_VAL_SPLIT: u64 = 0x5056;
const TAG_FT_SPLIT: u64 = 0x5046;
const TAG_SOURCE_MODEL: u64 = 0x4d53;
const TAG_RANDOM: u64 = 0x524e;
const TAG_FINETUNE: u64 = 0x4654;
const TAG_ADAPT: u64 = 0x4144;

fn prepare(source: &FeatureTable, target: &FeatureTable, split: &SplitSpec, seed: u64) -> Result<Prepared> {
    let s = split_table(source, split.train_fraction, &mut rng_from(seed, &[TAG_SOURCE_SPLIT]))?;
    let t = split_table(target, split.train_fraction, &mut rng_from(seed, &[TAG_TARGET_SPLIT]))?;
    let v = split_table(&s.train, 1.0 - VALIDATION_FRACTION, &mut rng_from(seed, &[TAG_VAL_SPLIT]))?;
    let ft = split_table(&t.train, 1.0 - VALIDATION_FRACTION, &mut rng_from(seed, &[TAG_FT_SPLIT]))?;

    let scaler = Standardizer::fit(s.train.features())?;
    let scale = |t: &FeatureTable| -> Result<FeatureTable> { t.with_features(scaler.apply(t.features())?) };
    Ok(Prepared {
        source_train: scale(&v.train)?,
        source_val: scale(&v.test)?,
        source_test: scale(&s.test)?,
        target_train: scale(&t.train)?,
        target_test: scale(&t.test)?,
        target_ft_train: scale(&ft.train)?,
        target_ft_val: scale(&ft.test)?,
        users: [v.train_users, v.test_users, s.test_users, t.train_users, t.test_users],
    })
}

fn labeled(t: &FeatureTable) -> Labeled<'_> {
    Labeled {
        x: t.features(),
        y: t.labels(),
    }
}

fn score(metric: MetricKind, model: &ModelGraph, t: &FeatureTable) -> Result<f64> {
    metric.evaluate(&model.predict(t.features())?, t.labels())
}

fn label_range(labels: &[f64]) -> (f64, f64) {
    let lo = labels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn run_cell(
    source: &FeatureTable,
    target: &FeatureTable,
    modalities: &ModalityMap,
    settings: &ExperimentSettings,
    target_index: usize,
    repeat: usize,
) -> CellReport {
    let seed = derive_seed(settings.seed, &[target_index as u64, repeat as u64]);
    let methods = settings.ordered_methods();
    let mut cell = CellReport {
        target: target.domain_name.clone(),
        repeat,
        seed,
        source_train_users: Vec::new(),
        source_val_users: Vec::new(),
        source_test_users: Vec::new(),
        target_train_users: Vec::new(),
        target_test_users: Vec::new(),
        setup1: None,
        setup2: None,
        results: BTreeMap::new(),
        failures: BTreeMap::new(),
        traces: BTreeMap::new(),
    };
    let fail_all = |cell: &mut CellReport, methods: &[Method], e: &Error| {
        for &m in methods {
            cell.failures.insert(m, e.to_string());
        }
    };

    let data = match prepare(source, target, &settings.split, seed) {
        Ok(d) => d,
        Err(e) => {
            fail_all(&mut cell, &methods, &e);
            return cell;
        }
    };
    let [a, b, c, d, e] = data.users.clone();
    cell.source_train_users = a;
    cell.source_val_users = b;
    cell.source_test_users = c;
    cell.target_train_users = d;
    cell.target_test_users = e;

    let metric = MetricKind::for_task(settings.train.task);
    let task = settings.train.task;
    let train = &settings.train;
    let adapt = AdaptData {
        source_train: labeled(&data.source_train),
        source_val: labeled(&data.source_val),
        target: data.target_train.features(),
    };
    let fresh_source_model = || {
        build_source_model(
            &train.architecture,
            task,
            data.source_train.n_features(),
            &mut rng_from(seed, &[TAG_SOURCE_MODEL]),
        )
    };

    let record = |cell: &mut CellReport, m: Method, r: Result<(f64, Option<StageTrace>)>| match r {
        Ok((v, trace)) => {
            cell.results.insert(m, v);
            if let Some(t) = trace {
                cell.traces.insert(m, t);
            }
        }
        Err(e) => {
            cell.failures.insert(m, e.to_string());
        }
    };

    if methods.contains(&Method::Random) {
        let r = random_baseline(
            task,
            data.target_test.labels(),
            label_range(data.source_train.labels()),
            &mut rng_from(seed, &[TAG_RANDOM]),
        );
        record(&mut cell, Method::Random, r.map(|v| (v, None)));
    }

    if methods.iter().any(|m| m.needs_source_model()) {
        let source_model = fresh_source_model().and_then(|m| {
            train_source_only(
                m,
                adapt.source_train,
                adapt.source_val,
                train,
                derive_seed(seed, &[TAG_SOURCE_MODEL]),
            )
        });
        match source_model {
            Ok(out) => {
                if methods.contains(&Method::S2s) {
                    let r = score(metric, &out.model, &data.source_test);
                    record(&mut cell, Method::S2s, r.map(|v| (v, Some(out.trace.clone()))));
                }
                if methods.contains(&Method::S2t) {
                    let r = score(metric, &out.model, &data.target_test);
                    record(&mut cell, Method::S2t, r.map(|v| (v, Some(out.trace.clone()))));
                }
                if methods.contains(&Method::S2tTl) {
                    let r = finetune(
                        out.model.clone(),
                        labeled(&data.target_ft_train),
                        labeled(&data.target_ft_val),
                        train,
                        derive_seed(seed, &[TAG_FINETUNE]),
                    )
                    .and_then(|ft| Ok((score(metric, &ft.model, &data.target_test)?, Some(ft.trace))));
                    record(&mut cell, Method::S2tTl, r);
                }
            }
            Err(e) => {
                let dependent: Vec<Method> =
                    methods.iter().copied().filter(|m| m.needs_source_model()).collect();
                fail_all(&mut cell, &dependent, &e);
            }
        }
    }

    if methods.contains(&Method::Mmd) {
        let r = fresh_source_model()
            .and_then(|m| {
                train_mmd(m, adapt, settings.mmd_weight, train, derive_seed(seed, &[TAG_SOURCE_MODEL]))
            })
            .and_then(|out| Ok((score(metric, &out.model, &data.target_test)?, Some(out.trace))));
        record(&mut cell, Method::Mmd, r);
    }

    if methods.iter().any(|m| m.needs_dann()) {
        let adapt_seed = derive_seed(seed, &[TAG_ADAPT]);
        let dann = train_dann(adapt, train, adapt_seed);
        let plans = analyze_shift(&data.source_train, &data.target_train, modalities).and_then(|report| {
            Ok((plan_setup1(&report, settings.alpha)?, plan_setup2(&report)?))
        });
        match dann {
            Err(e) => {
                let dependent: Vec<Method> = methods.iter().copied().filter(|m| m.needs_dann()).collect();
                fail_all(&mut cell, &dependent, &e);
            }
            Ok(dann) => {
                if methods.contains(&Method::Dann) {
                    let r = score(metric, &dann.model, &data.target_test);
                    record(&mut cell, Method::Dann, r.map(|v| (v, Some(dann.trace.clone()))));
                }
                let multi = [
                    Method::M3batUniformSetup1,
                    Method::M3batSetup1,
                    Method::M3batSetup2,
                ];
                match plans {
                    Err(e) => {
                        let dependent: Vec<Method> =
                            multi.into_iter().filter(|m| methods.contains(m)).collect();
                        fail_all(&mut cell, &dependent, &e);
                    }
                    Ok((setup1, setup2)) => {
                        for m in multi.into_iter().filter(|m| methods.contains(m)) {
                            let plan = match m {
                                Method::M3batUniformSetup1 => setup1.uniform(),
                                Method::M3batSetup1 => setup1.clone(),
                                _ => setup2.clone(),
                            };
                            let r = run_multibranch(&dann, adapt, &plan, train, adapt_seed, metric, &data.target_test);
                            record(&mut cell, m, r);
                        }
                        cell.setup1 = Some(setup1);
                        cell.setup2 = Some(setup2);
                    }
                }
            }
        }
    }
    cell
}

fn run_multibranch(
    dann: &TrainOutcome,
    adapt: AdaptData<'_>,
    plan: &BranchPlan,
    train: &TrainSettings,
    seed: u64,
    metric: MetricKind,
    test: &FeatureTable,
) -> Result<(f64, Option<StageTrace>)> {
    let out = continue_multibranch(dann, adapt, plan, train, seed)?;
    Ok((score(metric, &out.model, test)?, Some(out.trace)))
}

/// Train and evaluate every selected method on each (target, repeat) cell.
///
/// Cells draw their own user splits from seeds derived from the base seed,
/// target index and repeat index, so results do not depend on scheduling or
/// on which other methods are selected. Features are standardized with
/// source-training statistics. Summary rows are per target, plus an `avg`
/// row per method (equal weight per target) when there are several targets.
pub fn run_experiment(
    source: &FeatureTable,
    targets: &[FeatureTable],
    modalities: &ModalityMap,
    settings: &ExperimentSettings,
) -> Result<ExperimentReport> {
    settings.validate()?;
    if targets.is_empty() {
        return Err(Error::Validation("no target domains".into()));
    }
    modalities.check_covers(source.feature_names())?;
    let aligned: Vec<FeatureTable> = targets
        .iter()
        .map(|t| t.aligned_to(source.feature_names()))
        .collect::<Result<_>>()?;

    let cells_idx: Vec<(usize, usize)> = (0..aligned.len())
        .flat_map(|t| (0..settings.split.n_repeats).map(move |r| (t, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.jobs)
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    let cells: Vec<CellReport> = pool.install(|| {
        cells_idx
            .par_iter()
            .map(|&(t, r)| run_cell(source, &aligned[t], modalities, settings, t, r))
            .collect()
    });

    let metric = MetricKind::for_task(settings.train.task);
    let methods = settings.ordered_methods();
    let mut summary = Vec::new();
    for &m in &methods {
        let mut per_target = Vec::new();
        for t in &aligned {
            let values: Vec<f64> = cells
                .iter()
                .filter(|c| c.target == t.domain_name)
                .filter_map(|c| c.results.get(&m).copied())
                .collect();
            if values.len() == settings.split.n_repeats {
                summary.push(MetricReport::new(
                    m.display_name().into(),
                    t.domain_name.clone(),
                    metric,
                    values.clone(),
                ));
            }
            per_target.push(values);
        }
        if aligned.len() > 1 && per_target.iter().all(|v| v.len() == settings.split.n_repeats) {
            let avg: Vec<f64> = (0..settings.split.n_repeats)
                .map(|r| per_target.iter().map(|v| v[r]).sum::<f64>() / per_target.len() as f64)
                .collect();
            summary.push(MetricReport::new(m.display_name().into(), "avg".into(), metric, avg));
        }
    }
    Ok(ExperimentReport {
        source: source.domain_name.clone(),
        metric,
        methods,
        cells,
        summary,
    })
}
