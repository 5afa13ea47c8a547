mod common;

use common::normal_matrix;
use m3bat::data::synth::{generate_synthetic, SynthSpec};
use m3bat::evaluation::{auc_macro, split_table};
use m3bat::models::{build_source_model, ArchitectureSpec, Preset, TaskKind};
use m3bat::numeric::Matrix;
use m3bat::rng::rng_from;
use m3bat::shift::{analyze_shift, plan_setup1};
use m3bat::training::{
    finetune, train_dann, train_m3bat, train_mmd, train_source_only, AdaptData, Labeled, Stage,
    TrainSettings,
};
use m3bat::Error;

struct Data {
    train_x: Matrix,
    train_y: Vec<f64>,
    val_x: Matrix,
    val_y: Vec<f64>,
    target_x: Matrix,
    target_y: Vec<f64>,
    report: m3bat::shift::ShiftReport,
}

fn data(seed: u64) -> Data {
    let mut spec = SynthSpec::three_group_benchmark(TaskKind::Classification, seed);
    spec.samples_per_domain = 300;
    spec.users_per_domain = 12;
    let d = generate_synthetic(&spec).unwrap();
    let s = split_table(&d.source, 0.8, &mut rng_from(seed, &[1])).unwrap();
    Data {
        train_x: s.train.features().clone(),
        train_y: s.train.labels().to_vec(),
        val_x: s.test.features().clone(),
        val_y: s.test.labels().to_vec(),
        target_x: d.target.features().clone(),
        target_y: d.target.labels().to_vec(),
        report: analyze_shift(&d.source, &d.target, &d.modalities).unwrap(),
    }
}

impl Data {
    fn adapt(&self) -> AdaptData<'_> {
        AdaptData {
            source_train: Labeled::new(&self.train_x, &self.train_y).unwrap(),
            source_val: Labeled::new(&self.val_x, &self.val_y).unwrap(),
            target: &self.target_x,
        }
    }
}

fn settings() -> TrainSettings {
    let mut s = TrainSettings::new(ArchitectureSpec::preset(Preset::Weee), TaskKind::Classification);
    s.early_stop.max_epochs = 60;
    s
}

#[test]
fn m3bat_trace_runs_stages_in_order() {
    let d = data(0);
    let plan = plan_setup1(&d.report, 1).unwrap();
    let out = train_m3bat(d.adapt(), &plan, &settings(), 3).unwrap();
    assert_eq!(out.trace.stages(), vec![Stage::S1, Stage::S2, Stage::S3a, Stage::S3b, Stage::S3c]);
    let stages: Vec<Stage> = out.stage_models.iter().map(|s| s.0).collect();
    assert_eq!(stages, out.trace.stages());

    assert!(out.trace.stage(Stage::S1).all(|r| r.domain_loss.is_none()));
    assert!(out.trace.stage(Stage::S2).all(|r| r.lambdas == vec![0.0] && r.domain_loss.is_some()));
    let a: Vec<f64> = out.trace.stage(Stage::S3a).map(|r| r.lambdas[0]).collect();
    assert_eq!(a[0], 0.0);
    assert!(a.windows(2).all(|w| w[1] >= w[0]));
    assert!(a.len() >= 30);

    let warmup = settings().early_stop.patience;
    for r in out.trace.stage(Stage::S3b) {
        let expected = if r.epoch < warmup { 0.0 } else { 1.0 };
        assert!(r.lambdas.iter().all(|&l| l == expected));
    }
    let c: Vec<&Vec<f64>> = out.trace.stage(Stage::S3c).map(|r| &r.lambdas).collect();
    assert!(c[0].iter().all(|&l| l == 1.0));
    for (k, target) in plan.lambdas().into_iter().enumerate() {
        assert!(c.windows(2).all(|w| w[1][k] <= w[0][k]));
        assert!((c[29][k] - target).abs() <= 1e-3, "branch {k}: {} vs {target}", c[29][k]);
    }
    assert_eq!(out.model.lambdas().len(), plan.branches.len());
}

#[test]
fn same_seed_reproduces_training() {
    let d = data(1);
    let a = train_dann(d.adapt(), &settings(), 5).unwrap();
    let b = train_dann(d.adapt(), &settings(), 5).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.model.flat_params(), b.model.flat_params());
    let c = train_dann(d.adapt(), &settings(), 6).unwrap();
    assert_ne!(a.model.flat_params(), c.model.flat_params());
}

#[test]
fn zero_mmd_weight_is_source_only() {
    let d = data(2);
    let s = settings();
    let init = || build_source_model(&s.architecture, s.task, d.train_x.cols(), &mut rng_from(4, &[])).unwrap();
    let plain = train_source_only(init(), d.adapt().source_train, d.adapt().source_val, &s, 8).unwrap();
    let mmd0 = train_mmd(init(), d.adapt(), 0.0, &s, 8).unwrap();
    assert_eq!(plain.model.flat_params(), mmd0.model.flat_params());
    assert_eq!(plain.trace, mmd0.trace);
    let mmd = train_mmd(init(), d.adapt(), 1.0, &s, 8).unwrap();
    assert_eq!(mmd.trace.stages(), vec![Stage::Mmd]);
    assert!(train_mmd(init(), d.adapt(), -1.0, &s, 8).is_err());
}

#[test]
fn finetuning_never_worsens_validation_loss() {
    let d = data(3);
    let s = settings();
    let model = build_source_model(&s.architecture, s.task, d.train_x.cols(), &mut rng_from(1, &[])).unwrap();
    let source = train_source_only(model, d.adapt().source_train, d.adapt().source_val, &s, 2).unwrap();
    let n = d.target_y.len();
    let tt_x = d.target_x.row_range(0, n / 2);
    let tv_x = d.target_x.row_range(n / 2, n);
    let (tt_y, tv_y) = d.target_y.split_at(n / 2);
    let loss = |m: &m3bat::models::ModelGraph| s.task.loss(&m.predict(&tv_x).unwrap(), tv_y).unwrap().loss;
    let before = loss(&source.model);
    let tuned = finetune(source.model.clone(), Labeled::new(&tt_x, tt_y).unwrap(), Labeled::new(&tv_x, tv_y).unwrap(), &s, 2).unwrap();
    assert!(loss(&tuned.model) <= before + 1e-12);
    assert_eq!(tuned.trace.stages(), vec![Stage::Finetune]);
}

#[test]
fn separable_toy_problem_is_learned() {
    let mut rng = rng_from(21, &[]);
    let make = |rng: &mut m3bat::rng::Rng, n: usize| {
        let x = normal_matrix(n, 2, rng);
        let y: Vec<f64> = (0..n).map(|i| f64::from(x.get(i, 0) + 0.5 * x.get(i, 1) > 0.0)).collect();
        (x, y)
    };
    let (tx, ty) = make(&mut rng, 400);
    let (vx, vy) = make(&mut rng, 100);
    let (ex, ey) = make(&mut rng, 200);
    let s = settings();
    let model = build_source_model(&s.architecture, s.task, 2, &mut rng).unwrap();
    let out = train_source_only(model, Labeled::new(&tx, &ty).unwrap(), Labeled::new(&vx, &vy).unwrap(), &s, 0).unwrap();
    let auc = auc_macro(&out.model.predict(&ex).unwrap(), &ey).unwrap();
    assert!(auc > 0.99, "{auc}");
}

#[test]
fn bad_inputs_are_rejected() {
    let d = data(4);
    let empty = Matrix::zeros(0, d.train_x.cols());
    let bad = AdaptData { target: &empty, ..d.adapt() };
    assert!(train_dann(bad, &settings(), 0).is_err());
    assert!(Labeled::new(&d.train_x, &d.train_y[1..]).is_err());
    let mut s = settings();
    s.early_stop.patience = 0;
    assert!(matches!(train_dann(d.adapt(), &s, 0), Err(Error::Validation(_))));
}
