#![allow(dead_code)]

use m3bat::data::synth::{generate_synthetic, SynthSpec};
use m3bat::evaluation::{run_experiment, ExperimentReport, ExperimentSettings, Method, SplitSpec};
use m3bat::models::{ArchitectureSpec, Batch, ModelGraph, Preset, StepOptions, TaskKind};
use m3bat::numeric::{
    bce_loss, grl_backward, grl_forward, mse_loss, Activation, DenseLayer, DropoutSpec,
    GrlCoefficient, Matrix, Mode,
};
use m3bat::models::mmd;
use m3bat::rng::{rng_from, Rng};
use m3bat::training::TrainSettings;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, with 0 for two zero vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn central_differences(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Dense layer with a random projection loss; returns the worst relative
/// error over input, weight and bias gradients.
pub fn dense_layer_error(activation: Activation, dropout: Option<f64>, rng: &mut Rng) -> f64 {
    let (n, din, dout) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
    let mut layer = DenseLayer::new(din, dout, activation, rng).unwrap();
    for b in layer.bias_mut() {
        *b = rng.gen_range(-0.5..0.5);
    }
    let spec = dropout.map(|r| DropoutSpec::new(r).unwrap());
    let x = normal_matrix(n, din, rng);
    let u = normal_matrix(n, dout, rng);
    let mode = if spec.is_some() { Mode::Train } else { Mode::Infer };
    layer.forward(&x, mode, spec, rng).unwrap();
    let g = layer.backward(&u).unwrap();
    let replay = if spec.is_some() { Mode::Replay } else { Mode::Infer };

    let mut l = layer.clone();
    let fx = central_differences(x.data(), |p| {
        let xm = Matrix::from_vec(n, din, p.to_vec()).unwrap();
        dot(&l.forward(&xm, replay, spec, &mut rng_from(0, &[])).unwrap(), &u)
    });
    let mut l = layer.clone();
    let w0 = layer.weights().data().to_vec();
    let fw = central_differences(&w0, |p| {
        l.weights_mut().data_mut().copy_from_slice(p);
        dot(&l.forward(&x, replay, spec, &mut rng_from(0, &[])).unwrap(), &u)
    });
    let mut l = layer.clone();
    let b0 = layer.bias().to_vec();
    let fb = central_differences(&b0, |p| {
        l.bias_mut().copy_from_slice(p);
        dot(&l.forward(&x, replay, spec, &mut rng_from(0, &[])).unwrap(), &u)
    });
    relative_error(g.input.data(), &fx)
        .max(relative_error(g.weights.data(), &fw))
        .max(relative_error(&g.bias, &fb))
}

pub fn grl_error(rng: &mut Rng) -> f64 {
    let (n, d) = (rng.gen_range(1..6), rng.gen_range(1..6));
    let lambda = GrlCoefficient::new(rng.gen_range(0.0..=1.0)).unwrap();
    let x = normal_matrix(n, d, rng);
    let u = normal_matrix(n, d, rng);
    let fd = central_differences(x.data(), |p| {
        dot(&grl_forward(&Matrix::from_vec(n, d, p.to_vec()).unwrap()), &u)
    });
    let expected: Vec<f64> = fd.iter().map(|g| -lambda.value() * g).collect();
    relative_error(grl_backward(lambda, &u).data(), &expected)
}

pub fn bce_error(rng: &mut Rng) -> f64 {
    let n = rng.gen_range(1..20);
    let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
    let y: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
    let g = bce_loss(&p, &y).unwrap().grad;
    relative_error(&g, &central_differences(&p, |q| bce_loss(q, &y).unwrap().loss))
}

pub fn mse_error(rng: &mut Rng) -> f64 {
    let n = rng.gen_range(1..20);
    let p: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let g = mse_loss(&p, &y).unwrap().grad;
    relative_error(&g, &central_differences(&p, |q| mse_loss(q, &y).unwrap().loss))
}

pub fn mmd_error(rng: &mut Rng) -> f64 {
    let (n, m, d) = (rng.gen_range(2..7), rng.gen_range(2..7), rng.gen_range(1..4));
    let s = normal_matrix(n, d, rng);
    let mut t = normal_matrix(m, d, rng);
    for v in t.data_mut() {
        *v += 0.7;
    }
    let out = mmd(&s, &t).unwrap();
    let joint: Vec<f64> = s.data().iter().chain(t.data()).copied().collect();
    let fd = central_differences(&joint, |p| {
        let a = Matrix::from_vec(n, d, p[..n * d].to_vec()).unwrap();
        let b = Matrix::from_vec(m, d, p[n * d..].to_vec()).unwrap();
        mmd(&a, &b).unwrap().value
    });
    let analytic: Vec<f64> = out.grad_source.data().iter().chain(out.grad_target.data()).copied().collect();
    relative_error(&analytic, &fd)
}

/// Losses of a replayed step with parameters `values`.
fn step_losses(g: &ModelGraph, values: &[f64], batch: &Batch<'_>, opts: StepOptions) -> (f64, f64, f64) {
    let mut h = g.clone();
    h.set_flat_params(values).unwrap();
    let f = h.forward_step(batch, opts, Mode::Replay, &mut rng_from(0, &[])).unwrap();
    (f.task.loss, f.domain_loss().unwrap_or(0.0), f.mmd_value().unwrap_or(0.0))
}

/// Composed-graph check: encoder gradients must equal
/// `∂task + β ∂MMD − λ_b ∂domain`, head gradients their own loss gradients.
pub fn graph_error(mut g: ModelGraph, batch: &Batch<'_>, opts: StepOptions, rng: &mut Rng) -> f64 {
    // Zero-initialised biases put all-zero rows exactly on a ReLU kink.
    let jittered: Vec<f64> = g.flat_params().iter().map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    g.set_flat_params(&jittered).unwrap();
    g.forward_step(batch, opts, Mode::Train, rng).unwrap();
    let fwd = g.forward_step(batch, opts, Mode::Replay, rng).unwrap();
    g.backward_step(&fwd).unwrap();

    let mut analytic = Vec::new();
    let mut owners = Vec::new();
    let k = g.branches().len();
    for (i, b) in g.branches().iter().enumerate() {
        let gr = b.encoder.flat_grads().unwrap();
        owners.extend(std::iter::repeat_n(i, gr.len()));
        analytic.extend(gr);
    }
    let gr = g.target_head().flat_grads().unwrap();
    owners.extend(std::iter::repeat_n(k, gr.len()));
    analytic.extend(gr);
    if opts.domain {
        let gr = g.domain_head().unwrap().flat_grads().unwrap();
        owners.extend(std::iter::repeat_n(k + 1, gr.len()));
        analytic.extend(gr);
    }
    let lambdas = g.lambdas();
    let params = g.flat_params();
    let params = &params[..analytic.len()];
    let full = g.flat_params();
    let with_tail = |p: &[f64]| -> Vec<f64> {
        let mut v = p.to_vec();
        v.extend_from_slice(&full[p.len()..]);
        v
    };
    let dt = central_differences(params, |p| step_losses(&g, &with_tail(p), batch, opts).0);
    let dd = central_differences(params, |p| step_losses(&g, &with_tail(p), batch, opts).1);
    let dm = central_differences(params, |p| step_losses(&g, &with_tail(p), batch, opts).2);
    let expected: Vec<f64> = (0..analytic.len())
        .map(|i| match owners[i] {
            o if o < k => dt[i] + opts.mmd_weight * dm[i] - lambdas[o] * dd[i],
            o if o == k => dt[i],
            _ => dd[i],
        })
        .collect();
    relative_error(&analytic, &expected)
}

/// A small-architecture spec keeping finite-difference sweeps fast.
pub fn tiny_spec() -> ArchitectureSpec {
    ArchitectureSpec {
        source_hidden: vec![4, 3],
        source_dropout: vec![0.3, 0.2],
        encoder_hidden: vec![5, 4],
        encoder_dropout: vec![0.3, 0.2],
        target_head_hidden: vec![3],
        domain_head_hidden: vec![3],
        batch_size: 8,
    }
}

/// Welch-free direct Cohen's-d: pooled SD with Bessel correction.
pub fn cohens_d_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let ssa: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let ssb: f64 = b.iter().map(|x| (x - mb) * (x - mb)).sum();
    let pooled = ((ssa + ssb) / (a.len() + b.len() - 2) as f64).sqrt();
    ((ma - mb) / pooled).abs()
}

/// Exhaustive pairwise AUC with half credit for ties.
pub fn auc_oracle(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        if yi != 1.0 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj != 0.0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// One synthetic benchmark run per seed (data seed = split seed), a single
/// split each.
pub fn benchmark(task: TaskKind, preset: Preset, seeds: std::ops::Range<u64>, methods: &[Method]) -> Vec<ExperimentReport> {
    seeds
        .map(|seed| {
            let data = generate_synthetic(&SynthSpec::three_group_benchmark(task, seed)).unwrap();
            let settings = ExperimentSettings {
                train: TrainSettings::new(ArchitectureSpec::preset(preset), task),
                methods: methods.to_vec(),
                alpha: 1,
                mmd_weight: 1.0,
                split: SplitSpec {
                    train_fraction: 0.7,
                    n_repeats: 1,
                },
                seed,
                jobs: 1,
            };
            run_experiment(&data.source, &[data.target], &data.modalities, &settings).unwrap()
        })
        .collect()
}

/// Mean over reports of one method's single-cell value.
pub fn method_mean(reports: &[ExperimentReport], method: Method) -> f64 {
    let vals: Vec<f64> = reports
        .iter()
        .map(|r| r.cells[0].results[&method])
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}
