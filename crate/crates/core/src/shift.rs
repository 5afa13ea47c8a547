//! Distribution-shift quantification with Cohen's-d and the branch plans
//! derived from it.
//!
//! Per-feature shift is the absolute pooled-SD standardized mean difference
//! between source and target. Modalities aggregate by the arithmetic mean of
//! their features. Branch shifts become adversarial weights by min-max
//! normalization, with an artificial zero appended when even the smallest
//! branch shift exceeds the small-effect threshold.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureTable, ModalityMap};
use crate::error::{Error, Result};

pub const SMALL_EFFECT: f64 = 0.2;
pub const MODERATE_EFFECT: f64 = 0.5;
pub const LARGE_EFFECT: f64 = 0.8;

/// Reported shift for a constant feature whose value moved between domains.
pub const DEGENERATE_SHIFT_CAP: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectSize {
    Negligible,
    Small,
    Moderate,
    Large,
}

impl EffectSize {
    pub fn classify(d: f64) -> Self {
        if d >= LARGE_EFFECT {
            EffectSize::Large
        } else if d >= MODERATE_EFFECT {
            EffectSize::Moderate
        } else if d >= SMALL_EFFECT {
            EffectSize::Small
        } else {
            EffectSize::Negligible
        }
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let ss = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    (mean, ss / (n - 1.0))
}

/// `|mean_a - mean_b| / pooled_sd` with Bessel-corrected sample variances.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Validation(format!(
            "Cohen's-d needs at least 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Validation("Cohen's-d over non-finite values".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    let gap = (ma - mb).abs();
    let scale = ma.abs().max(mb.abs()).max(1.0);
    if pooled <= 1e-12 * scale {
        if gap <= 1e-12 * scale {
            return Ok(0.0);
        }
        return Err(Error::DegenerateShift { gap });
    }
    Ok(gap / pooled)
}

/// Like [`cohens_d`] but maps a degenerate shift to `cap`.
pub fn cohens_d_capped(a: &[f64], b: &[f64], cap: f64) -> Result<f64> {
    match cohens_d(a, b) {
        Err(Error::DegenerateShift { .. }) => Ok(cap),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureShift {
    pub name: String,
    pub modality: String,
    pub cohens_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityShift {
    pub name: String,
    pub mean_cohens_d: f64,
    /// Indices into the analysed feature order.
    #[serde(skip)]
    pub features: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftReport {
    pub source_name: String,
    pub target_name: String,
    /// In the source table's feature order.
    pub per_feature: Vec<FeatureShift>,
    /// In order of first appearance.
    pub per_modality: Vec<ModalityShift>,
}

fn by_shift_desc(a_d: f64, a_name: &str, b_d: f64, b_name: &str) -> Ordering {
    b_d.partial_cmp(&a_d)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_name.cmp(b_name))
}

impl ShiftReport {
    /// Feature indices by descending Cohen's-d, ties by name.
    pub fn sorted_feature_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.per_feature.len()).collect();
        idx.sort_by(|&i, &j| {
            let (a, b) = (&self.per_feature[i], &self.per_feature[j]);
            by_shift_desc(a.cohens_d, &a.name, b.cohens_d, &b.name)
        });
        idx
    }

    /// Modality indices by descending mean Cohen's-d, ties by name.
    pub fn sorted_modality_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.per_modality.len()).collect();
        idx.sort_by(|&i, &j| {
            let (a, b) = (&self.per_modality[i], &self.per_modality[j]);
            by_shift_desc(a.mean_cohens_d, &a.name, b.mean_cohens_d, &b.name)
        });
        idx
    }

    pub fn feature_shifts(&self) -> Vec<f64> {
        self.per_feature.iter().map(|f| f.cohens_d).collect()
    }

    pub fn mean_shift(&self, features: &[usize]) -> f64 {
        features.iter().map(|&i| self.per_feature[i].cohens_d).sum::<f64>() / features.len() as f64
    }

    pub fn to_document(&self) -> ShiftDocument {
        ShiftDocument {
            source: self.source_name.clone(),
            target: self.target_name.clone(),
            features: self
                .sorted_feature_indices()
                .into_iter()
                .map(|i| self.per_feature[i].clone())
                .collect(),
            modalities: self
                .sorted_modality_indices()
                .into_iter()
                .map(|i| ModalityEntry {
                    name: self.per_modality[i].name.clone(),
                    mean_cohens_d: self.per_modality[i].mean_cohens_d,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }
}

/// JSON form of a [`ShiftReport`]: features in descending shift order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftDocument {
    pub source: String,
    pub target: String,
    pub features: Vec<FeatureShift>,
    pub modalities: Vec<ModalityEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityEntry {
    pub name: String,
    pub mean_cohens_d: f64,
}

pub fn analyze_shift(
    source: &FeatureTable,
    target: &FeatureTable,
    modalities: &ModalityMap,
) -> Result<ShiftReport> {
    let target = target.aligned_to(source.feature_names())?;
    let groups = modalities.groups(source.feature_names())?;
    let per_feature: Vec<FeatureShift> = (0..source.n_features())
        .into_par_iter()
        .map(|j| {
            let name = &source.feature_names()[j];
            let d = cohens_d_capped(&source.column(j), &target.column(j), DEGENERATE_SHIFT_CAP)
                .map_err(|e| Error::Validation(format!("feature `{name}`: {e}")))?;
            Ok(FeatureShift {
                name: name.clone(),
                modality: modalities.get(name).unwrap_or_default().to_string(),
                cohens_d: d,
            })
        })
        .collect::<Result<_>>()?;
    let per_modality = groups
        .into_iter()
        .map(|(name, features)| {
            let mean = features.iter().map(|&i| per_feature[i].cohens_d).sum::<f64>()
                / features.len() as f64;
            ModalityShift {
                name,
                mean_cohens_d: mean,
                features,
            }
        })
        .collect();
    Ok(ShiftReport {
        source_name: source.domain_name.clone(),
        target_name: target.domain_name.clone(),
        per_feature,
        per_modality,
    })
}

/// Min-max normalize branch shifts into adversarial weights.
///
/// An artificial zero joins the list when the smallest shift exceeds
/// [`SMALL_EFFECT`], so a uniformly large shift never maps to zero weight.
/// Equal shifts give every branch weight 1.
pub fn lambdas_from_shifts(shifts: &[f64]) -> Result<Vec<f64>> {
    if shifts.is_empty() {
        return Err(Error::Validation("no branch shifts to normalize".into()));
    }
    if let Some(s) = shifts.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::Validation(format!("branch shift {s} is negative or non-finite")));
    }
    let mut lo = shifts.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = shifts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo > SMALL_EFFECT {
        lo = 0.0;
    }
    let span = hi - lo;
    if span <= 0.0 {
        return Ok(vec![1.0; shifts.len()]);
    }
    Ok(shifts.iter().map(|s| ((s - lo) / span).clamp(0.0, 1.0)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setup {
    /// Branches by modality: highest-shift, lowest-shift, and the rest.
    Setup1,
    /// Branches by feature-level shift tertiles.
    Setup2,
    /// A single branch over every feature.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedBranch {
    /// Sorted feature indices.
    pub features: Vec<usize>,
    pub lambda: f64,
    pub raw_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchPlan {
    pub branches: Vec<PlannedBranch>,
    pub setup: Setup,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<usize>,
}

impl BranchPlan {
    fn from_groups(
        report: &ShiftReport,
        mut groups: Vec<Vec<usize>>,
        setup: Setup,
        alpha: Option<usize>,
    ) -> Result<Self> {
        for g in &mut groups {
            g.sort_unstable();
        }
        let raw: Vec<f64> = groups.iter().map(|g| report.mean_shift(g)).collect();
        let lambdas = lambdas_from_shifts(&raw)?;
        let plan = BranchPlan {
            branches: groups
                .into_iter()
                .zip(raw)
                .zip(lambdas)
                .map(|((features, raw_shift), lambda)| PlannedBranch {
                    features,
                    lambda,
                    raw_shift,
                })
                .collect(),
            setup,
            alpha,
        };
        plan.validate(report.per_feature.len())?;
        Ok(plan)
    }

    /// One branch over `n_features` features.
    pub fn single(n_features: usize, lambda: f64) -> Result<Self> {
        let plan = BranchPlan {
            branches: vec![PlannedBranch {
                features: (0..n_features).collect(),
                lambda,
                raw_shift: 0.0,
            }],
            setup: Setup::Single,
            alpha: None,
        };
        plan.validate(n_features)?;
        Ok(plan)
    }

    /// Same branches with every weight set to 1.
    pub fn uniform(&self) -> Self {
        let mut plan = self.clone();
        for b in &mut plan.branches {
            b.lambda = 1.0;
        }
        plan
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.lambda).collect()
    }

    /// Branch index sets must partition `0..n_features`; weights in `[0, 1]`.
    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Validation("branch plan has no branches".into()));
        }
        let mut owner = vec![None; n_features];
        for (b, branch) in self.branches.iter().enumerate() {
            if branch.features.is_empty() {
                return Err(Error::Validation(format!("branch {b} has no features")));
            }
            if !(0.0..=1.0).contains(&branch.lambda) {
                return Err(Error::Validation(format!(
                    "branch {b} weight {} outside [0, 1]",
                    branch.lambda
                )));
            }
            for &f in &branch.features {
                match owner.get_mut(f) {
                    None => {
                        return Err(Error::Validation(format!(
                            "branch {b} uses feature {f} of {n_features}"
                        )))
                    }
                    Some(Some(prev)) => {
                        return Err(Error::Validation(format!(
                            "feature {f} appears in branches {prev} and {b}"
                        )))
                    }
                    Some(slot) => *slot = Some(b),
                }
            }
        }
        if let Some(f) = owner.iter().position(Option::is_none) {
            return Err(Error::Validation(format!("feature {f} is not in any branch")));
        }
        Ok(())
    }
}

/// Modality branches: the `alpha` highest-shift modalities, the `alpha`
/// lowest, and everything else in between. Two modalities give two branches.
pub fn plan_setup1(report: &ShiftReport, alpha: usize) -> Result<BranchPlan> {
    let m = report.per_modality.len();
    if alpha == 0 {
        return Err(Error::Validation("alpha must be at least 1".into()));
    }
    if m < 2 {
        return Err(Error::Validation(format!(
            "modality branches need at least 2 modalities, got {m}"
        )));
    }
    let order = report.sorted_modality_indices();
    let collect = |mods: &[usize]| -> Vec<usize> {
        mods.iter()
            .flat_map(|&i| report.per_modality[i].features.iter().copied())
            .collect()
    };
    let groups = if m == 2 {
        if alpha != 1 {
            return Err(Error::Validation(format!(
                "alpha {alpha} is too large for 2 modalities"
            )));
        }
        vec![collect(&order[..1]), collect(&order[1..])]
    } else {
        if m < 2 * alpha + 1 {
            return Err(Error::Validation(format!(
                "alpha {alpha} needs at least {} modalities, got {m}",
                2 * alpha + 1
            )));
        }
        vec![
            collect(&order[..alpha]),
            collect(&order[alpha..m - alpha]),
            collect(&order[m - alpha..]),
        ]
    };
    BranchPlan::from_groups(report, groups, Setup::Setup1, Some(alpha))
}

/// Tertile sizes for `n` features, remainder assigned top-first.
pub fn tertile_sizes(n: usize) -> [usize; 3] {
    let base = n / 3;
    let rem = n % 3;
    [base + usize::from(rem > 0), base + usize::from(rem > 1), base]
}

/// Shift-tertile branches over features sorted by descending Cohen's-d.
pub fn plan_setup2(report: &ShiftReport) -> Result<BranchPlan> {
    let n = report.per_feature.len();
    if n < 3 {
        return Err(Error::Validation(format!(
            "shift tertiles need at least 3 features, got {n}"
        )));
    }
    let order = report.sorted_feature_indices();
    let [a, b, _] = tertile_sizes(n);
    let groups = vec![
        order[..a].to_vec(),
        order[a..a + b].to_vec(),
        order[a + b..].to_vec(),
    ];
    BranchPlan::from_groups(report, groups, Setup::Setup2, None)
}
