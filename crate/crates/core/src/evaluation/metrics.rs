use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::TaskKind;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Auc,
    Mae,
}

impl MetricKind {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Classification => MetricKind::Auc,
            TaskKind::Regression => MetricKind::Mae,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Auc => "auc",
            MetricKind::Mae => "mae",
        }
    }

    pub fn evaluate(self, scores: &[f64], labels: &[f64]) -> Result<f64> {
        match self {
            MetricKind::Auc => auc_macro(scores, labels),
            MetricKind::Mae => mae(scores, labels),
        }
    }
}

/// Two-class ROC AUC via the Mann-Whitney statistic with midranks for ties.
/// For binary labels this equals the macro average over both classes.
pub fn auc_macro(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
        return Err(Error::Validation(format!("AUC label {l} is not 0 or 1")));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1.0 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn mae(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predicted.len(),
            actual.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Validation("MAE over no rows".into()));
    }
    Ok(predicted.iter().zip(actual).map(|(p, y)| (p - y).abs()).sum::<f64>() / predicted.len() as f64)
}

/// Score of an uninformed predictor on `test_labels`: uniform(0, 1) scores
/// for classification, uniform draws over `label_range` for regression.
pub fn random_baseline(
    task: TaskKind,
    test_labels: &[f64],
    label_range: (f64, f64),
    rng: &mut Rng,
) -> Result<f64> {
    if test_labels.is_empty() {
        return Err(Error::Validation("random baseline over no rows".into()));
    }
    match task {
        TaskKind::Classification => {
            let scores: Vec<f64> = test_labels.iter().map(|_| rng.gen::<f64>()).collect();
            auc_macro(&scores, test_labels)
        }
        TaskKind::Regression => {
            let (lo, hi) = label_range;
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Validation(format!("label range [{lo}, {hi}]")));
            }
            let preds: Vec<f64> = test_labels
                .iter()
                .map(|_| if hi > lo { rng.gen_range(lo..=hi) } else { lo })
                .collect();
            mae(&preds, test_labels)
        }
    }
}

/// Per-repeat values of one method with their mean and sample standard
/// deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub target: String,
    pub metric: MetricKind,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MetricReport {
    pub fn new(method: String, target: String, metric: MetricKind, values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MetricReport {
            method,
            target,
            metric,
            values,
            mean,
            std,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn auc_examples() {
        assert_eq!(auc_macro(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc_macro(&[0.5; 4], &[0.0, 1.0, 0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(auc_macro(&[0.9, 0.1], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(auc_macro(&[0.1, 0.2], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert!(matches!(mae(&[], &[]), Err(Error::Validation(_))));
    }

    #[test]
    fn random_baseline_behaviour() {
        let labels: Vec<f64> = (0..4000).map(|i| f64::from(i % 2 == 0)).collect();
        let auc = random_baseline(TaskKind::Classification, &labels, (0.0, 1.0), &mut rng_from(1, &[])).unwrap();
        assert!((auc - 0.5).abs() < 0.05);
        let again = random_baseline(TaskKind::Classification, &labels, (0.0, 1.0), &mut rng_from(1, &[])).unwrap();
        assert_eq!(auc, again);
        let flat = random_baseline(TaskKind::Regression, &[2.5; 10], (2.5, 2.5), &mut rng_from(1, &[])).unwrap();
        assert_eq!(flat, 0.0);
    }

    #[test]
    fn report_statistics() {
        let r = MetricReport::new("x".into(), "t".into(), MetricKind::Auc, vec![0.5, 0.7]);
        assert!((r.mean - 0.6).abs() < 1e-15);
        assert!((r.std - 0.02f64.sqrt()).abs() < 1e-15);
    }
}
