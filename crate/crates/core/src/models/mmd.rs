//! Biased RBF-kernel MMD² between two embedding batches.
//!
//! `k(a, b) = exp(-‖a - b‖² / h)` where the bandwidth `h` is the median
//! pairwise squared distance over the joint batch. The gradient includes
//! the dependence of the median on the pair(s) that realize it.

use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Debug, Clone)]
pub struct MmdOutput {
    pub value: f64,
    pub bandwidth: f64,
    pub grad_source: Matrix,
    pub grad_target: Matrix,
}

struct Pair {
    i: usize,
    j: usize,
    sq: f64,
}

fn check(source: &Matrix, target: &Matrix) -> Result<()> {
    if source.rows() == 0 || target.rows() == 0 {
        return Err(Error::Validation("MMD over an empty batch".into()));
    }
    if source.cols() != target.cols() {
        return Err(Error::Shape(format!(
            "MMD between widths {} and {}",
            source.cols(),
            target.cols()
        )));
    }
    Ok(())
}

fn pairs(points: &Matrix) -> Vec<Pair> {
    let n = points.rows();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let a = points.row(i);
        for j in i + 1..n {
            let sq = a.iter().zip(points.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            out.push(Pair { i, j, sq });
        }
    }
    out
}

/// Median-heuristic MMD².
pub fn mmd(source: &Matrix, target: &Matrix) -> Result<MmdOutput> {
    check(source, target)?;
    compute(source, target, None)
}

/// MMD² with a fixed bandwidth (no gradient through `h`).
pub fn mmd_with_bandwidth(source: &Matrix, target: &Matrix, bandwidth: f64) -> Result<MmdOutput> {
    check(source, target)?;
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(Error::Validation(format!("bandwidth {bandwidth} must be positive")));
    }
    compute(source, target, Some(bandwidth))
}

fn compute(source: &Matrix, target: &Matrix, fixed: Option<f64>) -> Result<MmdOutput> {
    let (n, m) = (source.rows(), target.rows());
    let joint = Matrix::vstack(source, target)?;
    let total = n + m;
    let all = pairs(&joint);

    // Median pair(s) and their weight in h.
    let mut median_pairs: Vec<(usize, f64)> = Vec::new();
    let h = match fixed {
        Some(h) => h,
        None if all.is_empty() => 1.0,
        None => {
            let mut order: Vec<usize> = (0..all.len()).collect();
            order.sort_by(|&a, &b| all[a].sq.total_cmp(&all[b].sq));
            let len = order.len();
            let h = if len % 2 == 1 {
                median_pairs.push((order[len / 2], 1.0));
                all[order[len / 2]].sq
            } else {
                median_pairs.push((order[len / 2 - 1], 0.5));
                median_pairs.push((order[len / 2], 0.5));
                0.5 * (all[order[len / 2 - 1]].sq + all[order[len / 2]].sq)
            };
            if h > 0.0 {
                h
            } else {
                // Degenerate batch: every point coincides with its median pair.
                median_pairs.clear();
                1.0
            }
        }
    };

    let (nf, mf) = (n as f64, m as f64);
    let coeff = |i: usize, j: usize| -> f64 {
        match (i < n, j < n) {
            (true, true) => 2.0 / (nf * nf),
            (false, false) => 2.0 / (mf * mf),
            _ => -2.0 / (nf * mf),
        }
    };

    let width = joint.cols();
    let mut grad = Matrix::zeros(total, width);
    let mut value = 1.0 / nf + 1.0 / mf;
    let mut dh = 0.0;
    for p in &all {
        let c = coeff(p.i, p.j);
        let k = (-p.sq / h).exp();
        value += c * k;
        dh += c * k * p.sq / (h * h);
        let scale = -2.0 * c * k / h;
        for d in 0..width {
            let diff = joint.get(p.i, d) - joint.get(p.j, d);
            let g = scale * diff;
            grad.data_mut()[p.i * width + d] += g;
            grad.data_mut()[p.j * width + d] -= g;
        }
    }
    for &(idx, w) in &median_pairs {
        let p = &all[idx];
        for d in 0..width {
            let diff = joint.get(p.i, d) - joint.get(p.j, d);
            let g = dh * w * 2.0 * diff;
            grad.data_mut()[p.i * width + d] += g;
            grad.data_mut()[p.j * width + d] -= g;
        }
    }
    Ok(MmdOutput {
        value: value.max(0.0),
        bandwidth: h,
        grad_source: grad.row_range(0, n),
        grad_target: grad.row_range(n, total),
    })
}
