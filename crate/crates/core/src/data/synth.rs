//! Synthetic source/target pairs with controlled per-group covariate shift.
//!
//! Every feature of group `g` is `N(0, 1)` in the source domain and
//! `N(shift_g, 1)` in the target domain. A per-user intercept (centered and
//! unit-scaled across users) gives rows of the same user a shared offset
//! without moving the marginal. Labels are a deterministic function of the
//! informative features, identical in both domains, so only `p(x)` moves.
//! A coupled group mixes the linear label score into its source-domain
//! features, which keeps their unit-variance marginal but makes them
//! spurious proxies that stop working in the target domain.

use std::collections::HashSet;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureTable, ModalityMap};
use crate::error::{Error, Result};
use crate::models::TaskKind;
use crate::numeric::Matrix;
use crate::rng::{rng_from, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub name: String,
    pub features: usize,
    /// Target Cohen's-d between domains (mean gap in unit-variance features).
    pub shift: f64,
    /// Leading features of the group that enter the label rule.
    #[serde(default)]
    pub informative: usize,
    /// Source-domain correlation of every feature in the group with the
    /// linear label score. Target features carry no such coupling.
    #[serde(default)]
    pub coupling: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRuleSpec {
    #[serde(default)]
    pub intercept: f64,
    /// Coefficient of the squared linear score.
    #[serde(default)]
    pub quadratic: f64,
}

impl Default for LabelRuleSpec {
    fn default() -> Self {
        LabelRuleSpec {
            intercept: 0.0,
            quadratic: 0.0,
        }
    }
}

fn default_samples() -> usize {
    900
}
fn default_users() -> usize {
    30
}
fn default_user_effect() -> f64 {
    0.5
}
fn default_source() -> String {
    "source".into()
}
fn default_target() -> String {
    "target".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub groups: Vec<GroupSpec>,
    #[serde(default = "default_samples")]
    pub samples_per_domain: usize,
    #[serde(default = "default_users")]
    pub users_per_domain: usize,
    pub task: TaskKind,
    #[serde(default)]
    pub label_rule: LabelRuleSpec,
    /// Standard deviation share of the per-user intercept, in `[0, 1)`.
    #[serde(default = "default_user_effect")]
    pub user_effect: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_source")]
    pub source_name: String,
    #[serde(default = "default_target")]
    pub target_name: String,
}

impl SynthSpec {
    /// Three groups `high`, `mid`, `low` of ten features each with shifts
    /// 1.0, 0.5 and 0.05. The label depends on the low-shift group; in the
    /// source domain the high and mid groups also track the label score
    /// (coupling 0.5 and 0.25), a dependence the target domain lacks.
    pub fn three_group_benchmark(task: TaskKind, seed: u64) -> Self {
        let group = |name: &str, shift: f64, informative: usize, coupling: f64| GroupSpec {
            name: name.into(),
            features: 10,
            shift,
            informative,
            coupling,
        };
        SynthSpec {
            groups: vec![
                group("high", 1.0, 0, 0.5),
                group("mid", 0.5, 0, 0.25),
                group("low", 0.05, 4, 0.0),
            ],
            samples_per_domain: default_samples(),
            users_per_domain: default_users(),
            task,
            label_rule: LabelRuleSpec::default(),
            user_effect: default_user_effect(),
            seed,
            source_name: default_source(),
            target_name: default_target(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Validation("synthetic spec has no groups".into()));
        }
        let mut names = HashSet::new();
        for g in &self.groups {
            if g.name.is_empty() || !names.insert(g.name.as_str()) {
                return Err(Error::Validation(format!(
                    "group names must be unique and non-empty (`{}`)",
                    g.name
                )));
            }
            if g.features == 0 {
                return Err(Error::Validation(format!("group `{}` has no features", g.name)));
            }
            if !(g.shift.is_finite() && g.shift >= 0.0) {
                return Err(Error::Validation(format!(
                    "group `{}` shift {} must be finite and non-negative",
                    g.name, g.shift
                )));
            }
            if !(0.0..1.0).contains(&g.coupling) {
                return Err(Error::Validation(format!(
                    "group `{}` coupling {} outside [0, 1)",
                    g.name, g.coupling
                )));
            }
            if g.coupling > 0.0 && g.informative > 0 {
                return Err(Error::Validation(format!(
                    "group `{}` cannot be both informative and coupled",
                    g.name
                )));
            }
            if g.informative > g.features {
                return Err(Error::Validation(format!(
                    "group `{}` has {} informative of {} features",
                    g.name, g.informative, g.features
                )));
            }
        }
        if self.groups.iter().all(|g| g.informative == 0) {
            return Err(Error::Validation("label rule needs at least one informative feature".into()));
        }
        if self.users_per_domain < 4 {
            return Err(Error::Validation(format!(
                "need at least 4 users per domain, got {}",
                self.users_per_domain
            )));
        }
        if self.samples_per_domain < self.users_per_domain {
            return Err(Error::Validation(format!(
                "{} samples cannot cover {} users",
                self.samples_per_domain, self.users_per_domain
            )));
        }
        if !(0.0..1.0).contains(&self.user_effect) {
            return Err(Error::Validation(format!(
                "user effect {} outside [0, 1)",
                self.user_effect
            )));
        }
        if !self.label_rule.intercept.is_finite() || !self.label_rule.quadratic.is_finite() {
            return Err(Error::Validation("label rule coefficients must be finite".into()));
        }
        if self.source_name == self.target_name {
            return Err(Error::Validation("source and target names must differ".into()));
        }
        Ok(())
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.groups
            .iter()
            .flat_map(|g| (0..g.features).map(move |k| format!("{}_{k}", g.name)))
            .collect()
    }
}

/// The shared labelling function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub task: TaskKind,
    /// (feature index, weight); weights have unit L2 norm.
    pub weights: Vec<(usize, f64)>,
    pub intercept: f64,
    pub quadratic: f64,
}

impl LabelRule {
    pub fn score(&self, features: &[f64]) -> f64 {
        let s: f64 = self.weights.iter().map(|&(i, w)| w * features[i]).sum();
        self.intercept + s + self.quadratic * s * s
    }

    pub fn label(&self, features: &[f64]) -> f64 {
        let s = self.score(features);
        match self.task {
            TaskKind::Classification => f64::from(u8::from(s > 0.0)),
            TaskKind::Regression => s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub source: FeatureTable,
    pub target: FeatureTable,
    pub modalities: ModalityMap,
    pub rule: LabelRule,
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn generate_domain(
    spec: &SynthSpec,
    name: &str,
    shifts: &[f64],
    couplings: &[f64],
    rule: &LabelRule,
    rng: &mut Rng,
) -> Result<FeatureTable> {
    let n_users = spec.users_per_domain;
    let n_feat = shifts.len();
    // Centered, unit-variance user intercepts per feature.
    let mut intercepts = vec![vec![0.0; n_feat]; n_users];
    for row in intercepts.iter_mut() {
        for v in row.iter_mut() {
            *v = normal(rng);
        }
    }
    for j in 0..n_feat {
        let mean = intercepts.iter().map(|r| r[j]).sum::<f64>() / n_users as f64;
        let var = intercepts.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n_users as f64;
        let sd = var.sqrt();
        for r in intercepts.iter_mut() {
            r[j] = if sd > 0.0 { (r[j] - mean) / sd } else { 0.0 };
        }
    }
    let tau = spec.user_effect;
    let noise_scale = (1.0 - tau * tau).sqrt();
    let base = spec.samples_per_domain / n_users;
    let extra = spec.samples_per_domain % n_users;

    let mut data = Vec::with_capacity(spec.samples_per_domain * n_feat);
    let mut users = Vec::with_capacity(spec.samples_per_domain);
    let mut labels = Vec::with_capacity(spec.samples_per_domain);
    let mut row = vec![0.0; n_feat];
    for (u, intercept) in intercepts.iter().enumerate() {
        let count = base + usize::from(u < extra);
        let id = format!("{name}-u{u:03}");
        for _ in 0..count {
            for j in 0..n_feat {
                row[j] = shifts[j] + tau * intercept[j] + noise_scale * normal(rng);
            }
            let linear: f64 = rule.weights.iter().map(|&(i, w)| w * row[i]).sum();
            for (j, &rho) in couplings.iter().enumerate() {
                if rho > 0.0 {
                    row[j] = rho * linear + (1.0 - rho * rho).sqrt() * (row[j] - shifts[j]) + shifts[j];
                }
            }
            labels.push(rule.label(&row));
            data.extend_from_slice(&row);
            users.push(id.clone());
        }
    }
    FeatureTable::new(
        name,
        spec.feature_names(),
        Matrix::from_vec(users.len(), n_feat, data)?,
        users,
        labels,
    )
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rule_rng = rng_from(spec.seed, &[0x5275_6c65]);
    let mut weights = Vec::new();
    let mut offset = 0;
    for g in &spec.groups {
        for k in 0..g.informative {
            weights.push((offset + k, normal(&mut rule_rng)));
        }
        offset += g.features;
    }
    let norm = weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    for (_, w) in &mut weights {
        *w /= norm;
    }
    let rule = LabelRule {
        task: spec.task,
        weights,
        intercept: spec.label_rule.intercept,
        quadratic: spec.label_rule.quadratic,
    };

    let mut modalities = ModalityMap::new();
    let names = spec.feature_names();
    let mut shifts = Vec::with_capacity(names.len());
    let mut couplings = Vec::with_capacity(names.len());
    let mut it = names.iter();
    for g in &spec.groups {
        for _ in 0..g.features {
            modalities.insert(it.next().expect("name per feature").clone(), g.name.clone())?;
            shifts.push(g.shift);
            couplings.push(g.coupling);
        }
    }
    let zeros = vec![0.0; shifts.len()];
    let mut src_rng = rng_from(spec.seed, &[1]);
    let mut tgt_rng = rng_from(spec.seed, &[2]);
    let source = generate_domain(spec, &spec.source_name, &zeros, &couplings, &rule, &mut src_rng)?;
    let target = generate_domain(spec, &spec.target_name, &shifts, &zeros, &rule, &mut tgt_rng)?;
    Ok(SyntheticData {
        source,
        target,
        modalities,
        rule,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        let mut spec = SynthSpec::three_group_benchmark(TaskKind::Classification, 0);
        assert!(spec.validate().is_ok());
        spec.users_per_domain = 3;
        assert!(spec.validate().is_err());
        let mut spec = SynthSpec::three_group_benchmark(TaskKind::Classification, 0);
        spec.groups[0].shift = -1.0;
        assert!(spec.validate().is_err());
        let mut spec = SynthSpec::three_group_benchmark(TaskKind::Classification, 0);
        for g in &mut spec.groups {
            g.informative = 0;
        }
        assert!(spec.validate().is_err());
    }

    #[test]
    fn rows_split_evenly_over_users() {
        let mut spec = SynthSpec::three_group_benchmark(TaskKind::Regression, 4);
        spec.samples_per_domain = 95;
        spec.users_per_domain = 10;
        let data = generate_synthetic(&spec).unwrap();
        assert_eq!(data.source.n_rows(), 95);
        assert_eq!(data.source.users().len(), 10);
        assert_eq!(data.target.n_features(), 30);
        assert_eq!(data.modalities.len(), 30);
    }

    #[test]
    fn labels_follow_rule_in_both_domains() {
        let spec = SynthSpec::three_group_benchmark(TaskKind::Classification, 9);
        let data = generate_synthetic(&spec).unwrap();
        for t in [&data.source, &data.target] {
            for r in 0..t.n_rows() {
                assert_eq!(data.rule.label(t.features().row(r)), t.labels()[r]);
            }
        }
    }
}
