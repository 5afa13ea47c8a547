mod common;

use common::{normal_matrix, tiny_spec};
use m3bat::models::checkpoint::Checkpoint;
use m3bat::models::{
    build_dann, build_multibranch, build_source_model, ArchitectureSpec, Batch, Preset,
    StepOptions, TaskKind,
};
use m3bat::numeric::{Matrix, Mode};
use m3bat::rng::rng_from;
use m3bat::shift::{BranchPlan, PlannedBranch, Setup};

fn plan(groups: &[&[usize]], lambdas: &[f64]) -> BranchPlan {
    BranchPlan {
        branches: groups
            .iter()
            .zip(lambdas)
            .map(|(g, &lambda)| PlannedBranch {
                features: g.to_vec(),
                lambda,
                raw_shift: 0.0,
            })
            .collect(),
        setup: Setup::Setup1,
        alpha: Some(1),
    }
}

#[test]
fn single_branch_graph_equals_dann() {
    let spec = ArchitectureSpec::preset(Preset::Weee);
    let dann = build_dann(&spec, TaskKind::Regression, 6, &mut rng_from(4, &[])).unwrap();
    let single = build_multibranch(&BranchPlan::single(6, 1.0).unwrap(), &spec, TaskKind::Regression, &mut rng_from(4, &[])).unwrap();
    assert_eq!(dann.flat_params(), single.flat_params());
    let x = normal_matrix(9, 6, &mut rng_from(5, &[]));
    assert_eq!(dann.predict(&x).unwrap(), single.predict(&x).unwrap());
    assert_eq!(dann.domain_scores(&x).unwrap(), single.domain_scores(&x).unwrap());
}

#[test]
fn column_permutation_with_remapped_branches_is_invariant() {
    let spec = tiny_spec();
    let a = build_multibranch(&plan(&[&[0, 2], &[1, 3]], &[1.0, 0.5]), &spec, TaskKind::Classification, &mut rng_from(8, &[])).unwrap();
    let b = build_multibranch(&plan(&[&[2, 3], &[0, 1]], &[1.0, 0.5]), &spec, TaskKind::Classification, &mut rng_from(8, &[])).unwrap();
    let x = normal_matrix(7, 4, &mut rng_from(9, &[]));
    let order = [1, 3, 0, 2];
    let permuted = Matrix::from_rows(
        &(0..x.rows()).map(|r| order.iter().map(|&c| x.get(r, c)).collect()).collect::<Vec<Vec<f64>>>(),
    )
    .unwrap();
    assert_eq!(a.predict(&x).unwrap(), b.predict(&permuted).unwrap());
    assert_eq!(a.domain_scores(&x).unwrap(), b.domain_scores(&permuted).unwrap());
}

#[test]
fn zero_reversal_leaves_encoder_with_task_gradient_only() {
    let mut spec = tiny_spec();
    spec.encoder_dropout = vec![0.0, 0.0];
    let mut rng = rng_from(12, &[]);
    let mut g = build_multibranch(&plan(&[&[0, 1], &[2]], &[0.0, 0.0]), &spec, TaskKind::Regression, &mut rng).unwrap();
    let sx = normal_matrix(5, 3, &mut rng);
    let tx = normal_matrix(4, 3, &mut rng);
    let sy = vec![0.3, -0.1, 0.8, 0.0, 0.5];
    let batch = Batch { source_x: &sx, source_y: &sy, target_x: Some(&tx) };
    let encoder_grads = |g: &mut m3bat::models::ModelGraph, opts| {
        let f = g.forward_step(&batch, opts, Mode::Train, &mut rng_from(0, &[])).unwrap();
        g.backward_step(&f).unwrap();
        g.branches().iter().flat_map(|b| b.encoder.flat_grads().unwrap()).collect::<Vec<f64>>()
    };
    let adversarial = encoder_grads(&mut g, StepOptions::ADVERSARIAL);
    let task_only = encoder_grads(&mut g, StepOptions::TASK_ONLY);
    for (a, t) in adversarial.iter().zip(&task_only) {
        assert!((a - t).abs() <= 1e-12, "{a} vs {t}");
    }
    assert!(g.domain_head().unwrap().flat_grads().is_some());
}

#[test]
fn classification_outputs_are_probabilities() {
    let g = build_source_model(&ArchitectureSpec::preset(Preset::Wenet), TaskKind::Classification, 12, &mut rng_from(1, &[])).unwrap();
    let x = normal_matrix(20, 12, &mut rng_from(2, &[]));
    assert!(g.predict(&x).unwrap().iter().all(|p| *p > 0.0 && *p < 1.0));
    assert!(g.domain_head().is_none());
    assert!(g.predict(&normal_matrix(2, 11, &mut rng_from(2, &[]))).is_err());
}

#[test]
fn bad_partitions_are_rejected() {
    let spec = tiny_spec();
    let mut rng = rng_from(0, &[]);
    assert!(build_multibranch(&plan(&[&[0, 1], &[1, 2]], &[1.0, 1.0]), &spec, TaskKind::Regression, &mut rng).is_err());
    assert!(build_multibranch(&plan(&[&[0], &[2]], &[1.0, 1.0]), &spec, TaskKind::Regression, &mut rng).is_err());
    let mut g = build_dann(&spec, TaskKind::Regression, 3, &mut rng).unwrap();
    assert!(g.set_lambdas(&[1.2]).is_err());
    assert!(g.set_lambdas(&[0.5, 0.5]).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let spec = tiny_spec();
    let p = plan(&[&[1], &[0, 2]], &[0.25, 1.0]);
    let g = build_multibranch(&p, &spec, TaskKind::Classification, &mut rng_from(6, &[])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    Checkpoint::new(spec.clone(), Some(p.clone()), g.clone()).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.plan, Some(p));
    let x = normal_matrix(5, 3, &mut rng_from(7, &[]));
    assert_eq!(back.graph.predict(&x).unwrap(), g.predict(&x).unwrap());
    assert_eq!(back.graph.lambdas(), vec![0.25, 1.0]);
    std::fs::write(&path, "{\"format_version\": 99}").unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn target_rows_never_enter_the_task_loss() {
    let spec = tiny_spec();
    let mut rng = rng_from(30, &[]);
    let mut g = build_dann(&spec, TaskKind::Classification, 3, &mut rng).unwrap();
    let sx = normal_matrix(6, 3, &mut rng);
    let sy = vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
    let t1 = normal_matrix(6, 3, &mut rng);
    let t2 = normal_matrix(6, 3, &mut rng).map(|v| v * 5.0 + 2.0);
    let mut task = |t: &Matrix| {
        let batch = Batch { source_x: &sx, source_y: &sy, target_x: Some(t) };
        let f = g.forward_step(&batch, StepOptions::ADVERSARIAL, Mode::Infer, &mut rng_from(0, &[])).unwrap();
        (f.task.loss, f.task.grad.clone())
    };
    let (a, b) = (task(&t1), task(&t2));
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}
