//! Optimization loops: source-only training, supervised fine-tuning, the
//! MMD baseline, adversarial training and the staged multi-branch pipeline.

mod trace;

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    build_dann, build_multibranch, ArchitectureSpec, Batch, ModelGraph, StepOptions, TaskKind,
};
use crate::numeric::{AdamConfig, AdamState, Matrix, Mode};
use crate::rng::{rng_from, Rng};
use crate::shift::BranchPlan;
pub use trace::{StageTrace, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Epochs over which `p` sweeps from 0 to 1.
    #[serde(default = "default_duration")]
    pub duration: usize,
}

fn default_gamma() -> f64 {
    10.0
}
fn default_duration() -> usize {
    30
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            gamma: default_gamma(),
            duration: default_duration(),
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Validation(format!("anneal gamma {} must be positive", self.gamma)));
        }
        if self.duration == 0 {
            return Err(Error::Validation("anneal duration must be at least one epoch".into()));
        }
        Ok(())
    }

    /// `λ_p = 2 / (1 + exp(-γp)) - 1`.
    pub fn lambda_p(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Validation(format!("annealing progress {p} outside [0, 1]")));
        }
        Ok(2.0 / (1.0 + (-self.gamma * p).exp()) - 1.0)
    }

    /// Progress at a zero-based epoch: 0 at the first epoch, 1 from epoch
    /// `duration - 1` on.
    pub fn progress(&self, epoch: usize) -> f64 {
        if self.duration <= 1 {
            return 1.0;
        }
        (epoch as f64 / (self.duration - 1) as f64).min(1.0)
    }
}

/// Shared-coefficient annealing: `target · λ_p`.
pub fn anneal_lambda(schedule: &AnnealSchedule, p: f64, target: f64) -> Result<f64> {
    check_unit("target coefficient", target)?;
    Ok(target * schedule.lambda_p(p)?)
}

/// Per-branch sweep from 1 down to `lambda_m`: `1 - (1 - λ_m) · λ_p`.
pub fn anneal_branch(schedule: &AnnealSchedule, p: f64, lambda_m: f64) -> Result<f64> {
    check_unit("branch coefficient", lambda_m)?;
    Ok(1.0 - (1.0 - lambda_m) * schedule.lambda_p(p)?)
}

fn check_unit(what: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Validation(format!("{what} {v} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopPolicy {
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
}

fn default_patience() -> usize {
    5
}
fn default_max_epochs() -> usize {
    300
}

impl Default for EarlyStopPolicy {
    fn default() -> Self {
        EarlyStopPolicy {
            patience: default_patience(),
            max_epochs: default_max_epochs(),
        }
    }
}

impl EarlyStopPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Validation("patience and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "source")]
    Source,
    #[serde(rename = "finetune")]
    Finetune,
    #[serde(rename = "mmd")]
    Mmd,
    #[serde(rename = "1")]
    S1,
    #[serde(rename = "2")]
    S2,
    #[serde(rename = "3a")]
    S3a,
    #[serde(rename = "3b")]
    S3b,
    #[serde(rename = "3c")]
    S3c,
}

impl Stage {
    pub fn id(self) -> &'static str {
        match self {
            Stage::Source => "source",
            Stage::Finetune => "finetune",
            Stage::Mmd => "mmd",
            Stage::S1 => "1",
            Stage::S2 => "2",
            Stage::S3a => "3a",
            Stage::S3b => "3b",
            Stage::S3c => "3c",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Everything an optimization loop needs besides data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub architecture: ArchitectureSpec,
    pub task: TaskKind,
    pub adam: AdamConfig,
    pub early_stop: EarlyStopPolicy,
    pub anneal: AnnealSchedule,
}

impl TrainSettings {
    pub fn new(architecture: ArchitectureSpec, task: TaskKind) -> Self {
        TrainSettings {
            architecture,
            task,
            adam: AdamConfig::default(),
            early_stop: EarlyStopPolicy::default(),
            anneal: AnnealSchedule::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        self.adam.validate()?;
        self.early_stop.validate()?;
        self.anneal.validate()
    }
}

/// Features with labels.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub x: &'a Matrix,
    pub y: &'a [f64],
}

impl<'a> Labeled<'a> {
    pub fn new(x: &'a Matrix, y: &'a [f64]) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", x.rows(), y.len())));
        }
        Ok(Labeled { x, y })
    }

    fn require_rows(&self, what: &str) -> Result<()> {
        if self.x.rows() == 0 {
            return Err(Error::Validation(format!("{what} is empty")));
        }
        Ok(())
    }
}

/// Labeled source train/validation rows and unlabeled target rows.
#[derive(Debug, Clone, Copy)]
pub struct AdaptData<'a> {
    pub source_train: Labeled<'a>,
    pub source_val: Labeled<'a>,
    pub target: &'a Matrix,
}

impl AdaptData<'_> {
    fn validate(&self) -> Result<()> {
        self.source_train.require_rows("source training set")?;
        self.source_val.require_rows("source validation set")?;
        if self.target.rows() == 0 {
            return Err(Error::Validation("unlabeled target set is empty".into()));
        }
        let d = self.source_train.x.cols();
        if self.source_val.x.cols() != d || self.target.cols() != d {
            return Err(Error::Shape("source and target feature widths differ".into()));
        }
        Ok(())
    }
}

/// A trained model, its per-epoch trace and a copy of the model as it stood
/// at the end of each stage.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelGraph,
    pub trace: StageTrace,
    pub stage_models: Vec<(Stage, ModelGraph)>,
}

impl TrainOutcome {
    pub fn stage_model(&self, stage: Stage) -> Option<&ModelGraph> {
        self.stage_models.iter().find(|(s, _)| *s == stage).map(|(_, m)| m)
    }
}

const TAG_BATCHES: u64 = 0xba7c;
const TAG_DROPOUT: u64 = 0xd0;
const TAG_TARGET: u64 = 0x7a;
const TAG_INIT: u64 = 0x1717;

/// Independent random streams for one stage.
struct Streams {
    batches: Rng,
    dropout: Rng,
    target: Rng,
}

impl Streams {
    fn new(seed: u64, stage: Stage) -> Self {
        let s = stage as u64;
        Streams {
            batches: rng_from(seed, &[s, TAG_BATCHES]),
            dropout: rng_from(seed, &[s, TAG_DROPOUT]),
            target: rng_from(seed, &[s, TAG_TARGET]),
        }
    }
}

/// Cycles through a shuffled permutation of the target rows.
struct TargetSampler {
    order: Vec<usize>,
    pos: usize,
}

impl TargetSampler {
    fn new(n: usize) -> Self {
        TargetSampler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn draw(&mut self, k: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Coefficients for one epoch of a stage, or `None` for task-only epochs.
type LambdaFn<'a> = dyn Fn(usize) -> Result<Option<Vec<f64>>> + 'a;

struct StagePlan<'a> {
    stage: Stage,
    lambdas: Box<LambdaFn<'a>>,
    mmd_weight: f64,
    /// Epochs before the early-stop window opens.
    hold: usize,
    restore_best: bool,
    /// Count the incoming model as a restore candidate.
    include_initial: bool,
}

impl StagePlan<'_> {
    fn task_only(stage: Stage) -> Self {
        StagePlan {
            stage,
            lambdas: Box::new(|_| Ok(None)),
            mmd_weight: 0.0,
            hold: 0,
            restore_best: true,
            include_initial: false,
        }
    }
}

fn diverged(stage: Stage, epoch: usize) -> Error {
    Error::Divergence {
        stage: stage.id().to_string(),
        epoch,
    }
}

fn validation_loss(graph: &ModelGraph, val: &Labeled<'_>) -> Result<f64> {
    let pred = graph.predict(val.x)?;
    Ok(graph.task().loss(&pred, val.y)?.loss)
}

struct EpochStats {
    task: f64,
    domain: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    graph: &mut ModelGraph,
    train: &Labeled<'_>,
    target: Option<&Matrix>,
    opts: StepOptions,
    batch_size: usize,
    adam: &mut AdamState,
    streams: &mut Streams,
    sampler: &mut TargetSampler,
) -> Result<EpochStats> {
    let mut order: Vec<usize> = (0..train.x.rows()).collect();
    order.shuffle(&mut streams.batches);
    let needs_target = opts.domain || opts.mmd_weight != 0.0;
    let (mut task_sum, mut domain_sum, mut seen) = (0.0, 0.0, 0usize);
    for chunk in order.chunks(batch_size) {
        let sx = train.x.select_rows(chunk);
        let sy: Vec<f64> = chunk.iter().map(|&i| train.y[i]).collect();
        let tx = match (needs_target, target) {
            (true, Some(t)) => Some(t.select_rows(&sampler.draw(chunk.len(), &mut streams.target))),
            (true, None) => return Err(Error::Validation("adaptation needs target rows".into())),
            _ => None,
        };
        let batch = Batch {
            source_x: &sx,
            source_y: &sy,
            target_x: tx.as_ref(),
        };
        let fwd = graph.forward_step(&batch, opts, Mode::Train, &mut streams.dropout)?;
        let domain = fwd.domain_loss();
        if !fwd.task.loss.is_finite() || domain.is_some_and(|d| !d.is_finite()) {
            return Err(Error::NonFinite("loss".into()));
        }
        graph.backward_step(&fwd)?;
        adam.step(&mut graph.param_slots(opts.domain)?)?;
        task_sum += fwd.task.loss * chunk.len() as f64;
        domain_sum += domain.unwrap_or(0.0) * chunk.len() as f64;
        seen += chunk.len();
    }
    graph.clear_caches();
    Ok(EpochStats {
        task: task_sum / seen as f64,
        domain: opts.domain.then(|| domain_sum / seen as f64),
    })
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    graph: &mut ModelGraph,
    plan: &StagePlan<'_>,
    train: &Labeled<'_>,
    val: &Labeled<'_>,
    target: Option<&Matrix>,
    settings: &TrainSettings,
    seed: u64,
    trace: &mut StageTrace,
) -> Result<()> {
    let policy = settings.early_stop;
    let mut adam = AdamState::new(settings.adam);
    let mut streams = Streams::new(seed, plan.stage);
    let mut sampler = TargetSampler::new(target.map_or(0, Matrix::rows));
    let mut best_loss = None;
    let mut best_model = None;
    if plan.include_initial {
        best_loss = Some(validation_loss(graph, val)?);
        best_model = Some(graph.clone());
    }
    let mut since_best = 0usize;
    for epoch in 0..policy.max_epochs.max(plan.hold + 1) {
        let lambdas = (plan.lambdas)(epoch)?;
        let opts = match &lambdas {
            Some(l) => {
                graph.set_lambdas(l)?;
                StepOptions {
                    domain: true,
                    mmd_weight: plan.mmd_weight,
                }
            }
            None => StepOptions {
                domain: false,
                mmd_weight: plan.mmd_weight,
            },
        };
        let stats = run_epoch(
            graph,
            train,
            target,
            opts,
            settings.architecture.batch_size,
            &mut adam,
            &mut streams,
            &mut sampler,
        )
        .map_err(|e| match e {
            Error::NonFinite(_) => diverged(plan.stage, epoch),
            other => other,
        })?;
        let val_loss = validation_loss(graph, val)?;
        if !val_loss.is_finite() {
            return Err(diverged(plan.stage, epoch));
        }
        trace.push(TraceRecord {
            stage: plan.stage,
            epoch,
            task_loss: stats.task,
            domain_loss: stats.domain,
            lambdas: lambdas.unwrap_or_else(|| graph.lambdas()),
            val_metric: val_loss,
        });
        if epoch + 1 < plan.hold {
            continue;
        }
        if best_loss.is_none_or(|b| val_loss < b) {
            best_loss = Some(val_loss);
            if plan.restore_best {
                best_model = Some(graph.clone());
            }
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= policy.patience {
                break;
            }
        }
    }
    if let Some(model) = best_model {
        *graph = model;
    }
    graph.clear_caches();
    Ok(())
}

/// Task-loss training on labeled source rows with early stopping; the
/// best validation state is kept.
pub fn train_source_only(
    mut model: ModelGraph,
    train: Labeled<'_>,
    val: Labeled<'_>,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainOutcome> {
    settings.validate()?;
    train.require_rows("training set")?;
    val.require_rows("validation set")?;
    let mut trace = StageTrace::default();
    run_stage(
        &mut model,
        &StagePlan::task_only(Stage::Source),
        &train,
        &val,
        None,
        settings,
        seed,
        &mut trace,
    )?;
    Ok(TrainOutcome {
        stage_models: vec![(Stage::Source, model.clone())],
        model,
        trace,
    })
}

/// Continue training every parameter on labeled target rows. The incoming
/// model competes as a candidate, so validation loss never ends above its
/// starting value.
pub fn finetune(
    mut model: ModelGraph,
    target_train: Labeled<'_>,
    target_val: Labeled<'_>,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainOutcome> {
    settings.validate()?;
    target_train.require_rows("target training set")?;
    target_val.require_rows("target validation set")?;
    let mut trace = StageTrace::default();
    let plan = StagePlan {
        include_initial: true,
        ..StagePlan::task_only(Stage::Finetune)
    };
    run_stage(
        &mut model,
        &plan,
        &target_train,
        &target_val,
        None,
        settings,
        seed,
        &mut trace,
    )?;
    Ok(TrainOutcome {
        stage_models: vec![(Stage::Finetune, model.clone())],
        model,
        trace,
    })
}

/// Task loss plus `β·MMD²` between source and target embeddings per batch.
/// With `β = 0` this is exactly [`train_source_only`].
pub fn train_mmd(
    mut model: ModelGraph,
    data: AdaptData<'_>,
    mmd_weight: f64,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainOutcome> {
    settings.validate()?;
    data.validate()?;
    if !(mmd_weight.is_finite() && mmd_weight >= 0.0) {
        return Err(Error::Validation(format!("MMD weight {mmd_weight} must be non-negative")));
    }
    let mut trace = StageTrace::default();
    let stage = if mmd_weight == 0.0 { Stage::Source } else { Stage::Mmd };
    let plan = StagePlan {
        mmd_weight,
        ..StagePlan::task_only(stage)
    };
    run_stage(
        &mut model,
        &plan,
        &data.source_train,
        &data.source_val,
        Some(data.target),
        settings,
        seed,
        &mut trace,
    )?;
    Ok(TrainOutcome {
        stage_models: vec![(stage, model.clone())],
        model,
        trace,
    })
}

/// Stages 1, 2 and 3a on a single shared encoder.
pub fn train_dann(data: AdaptData<'_>, settings: &TrainSettings, seed: u64) -> Result<TrainOutcome> {
    settings.validate()?;
    data.validate()?;
    let mut init = rng_from(seed, &[TAG_INIT]);
    let mut model = build_dann(
        &settings.architecture,
        settings.task,
        data.source_train.x.cols(),
        &mut init,
    )?;
    let mut trace = StageTrace::default();
    let mut stage_models = Vec::new();
    let anneal = settings.anneal;
    let plans = [
        StagePlan::task_only(Stage::S1),
        StagePlan {
            lambdas: Box::new(|_| Ok(Some(vec![0.0]))),
            restore_best: false,
            ..StagePlan::task_only(Stage::S2)
        },
        StagePlan {
            lambdas: Box::new(move |e| Ok(Some(vec![anneal_lambda(&anneal, anneal.progress(e), 1.0)?]))),
            hold: anneal.duration,
            restore_best: false,
            ..StagePlan::task_only(Stage::S3a)
        },
    ];
    for plan in &plans {
        run_stage(
            &mut model,
            plan,
            &data.source_train,
            &data.source_val,
            Some(data.target),
            settings,
            seed,
            &mut trace,
        )?;
        stage_models.push((plan.stage, model.clone()));
    }
    Ok(TrainOutcome {
        model,
        trace,
        stage_models,
    })
}

/// Stages 3b and 3c: a freshly initialized multi-branch graph is warmed up
/// with the reversal switched off for one patience cycle, trained with every
/// coefficient at 1, then each branch is annealed from 1 down to its planned
/// coefficient. `prior` carries the trace of stages 1 to 3a.
pub fn continue_multibranch(
    prior: &TrainOutcome,
    data: AdaptData<'_>,
    plan: &BranchPlan,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainOutcome> {
    settings.validate()?;
    data.validate()?;
    plan.validate(data.source_train.x.cols())?;
    let mut init = rng_from(seed, &[TAG_INIT, plan.branches.len() as u64]);
    let mut model = build_multibranch(plan, &settings.architecture, settings.task, &mut init)?;
    let k = plan.branches.len();
    let targets = plan.lambdas();
    let anneal = settings.anneal;
    let warmup = settings.early_stop.patience;
    let plans = [
        StagePlan {
            lambdas: Box::new(move |e| Ok(Some(vec![if e < warmup { 0.0 } else { 1.0 }; k]))),
            hold: warmup,
            restore_best: false,
            ..StagePlan::task_only(Stage::S3b)
        },
        StagePlan {
            lambdas: Box::new(move |e| {
                let p = anneal.progress(e);
                targets
                    .iter()
                    .map(|&m| anneal_branch(&anneal, p, m))
                    .collect::<Result<Vec<_>>>()
                    .map(Some)
            }),
            hold: anneal.duration,
            restore_best: false,
            ..StagePlan::task_only(Stage::S3c)
        },
    ];
    let mut trace = prior.trace.clone();
    let mut stage_models = prior.stage_models.clone();
    for p in &plans {
        run_stage(
            &mut model,
            p,
            &data.source_train,
            &data.source_val,
            Some(data.target),
            settings,
            seed,
            &mut trace,
        )?;
        stage_models.push((p.stage, model.clone()));
    }
    Ok(TrainOutcome {
        model,
        trace,
        stage_models,
    })
}

/// The full staged pipeline: stages 1 to 3a on a shared encoder, then 3b
/// and 3c on the planned branches.
pub fn train_m3bat(
    data: AdaptData<'_>,
    plan: &BranchPlan,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainOutcome> {
    plan.validate(data.source_train.x.cols())?;
    let dann = train_dann(data, settings, seed)?;
    continue_multibranch(&dann, data, plan, settings, seed)
}
