use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::FeatureTable;
use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_repeats")]
    pub n_repeats: usize,
}

fn default_train_fraction() -> f64 {
    0.7
}
fn default_repeats() -> usize {
    5
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: default_train_fraction(),
            n_repeats: default_repeats(),
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "train fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        if self.n_repeats == 0 {
            return Err(Error::Validation("need at least one split repeat".into()));
        }
        Ok(())
    }
}

/// Shuffle `users` and cut off `round(fraction · n)` of them (at least one
/// on each side) as the first set.
pub fn split_users(users: &[String], fraction: f64, rng: &mut Rng) -> Result<(Vec<String>, Vec<String>)> {
    if users.len() < 2 {
        return Err(Error::Validation(format!(
            "need at least 2 users to split, got {}",
            users.len()
        )));
    }
    let mut shuffled = users.to_vec();
    shuffled.shuffle(rng);
    let n_first = ((fraction * users.len() as f64).round() as usize).clamp(1, users.len() - 1);
    let second = shuffled.split_off(n_first);
    Ok((shuffled, second))
}

fn by_users(table: &FeatureTable, users: &[String]) -> FeatureTable {
    let set: HashSet<String> = users.iter().cloned().collect();
    table.select_users(&set)
}

/// One user-disjoint partition of a table.
#[derive(Debug, Clone)]
pub struct Split {
    pub train_users: Vec<String>,
    pub test_users: Vec<String>,
    pub train: FeatureTable,
    pub test: FeatureTable,
}

pub fn split_table(table: &FeatureTable, fraction: f64, rng: &mut Rng) -> Result<Split> {
    let (train_users, test_users) = split_users(&table.users(), fraction, rng)?;
    Ok(Split {
        train: by_users(table, &train_users),
        test: by_users(table, &test_users),
        train_users,
        test_users,
    })
}

/// `spec.n_repeats` independent user-disjoint train/test partitions.
pub fn make_splits(table: &FeatureTable, spec: &SplitSpec, rng: &mut Rng) -> Result<Vec<Split>> {
    spec.validate()?;
    (0..spec.n_repeats)
        .map(|_| split_table(table, spec.train_fraction, rng))
        .collect()
}

/// Per-feature z-scoring with statistics from one matrix. Features with zero
/// spread are only centered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::Validation("cannot standardize with no rows".into()));
        }
        let n = x.rows() as f64;
        let mut mean = vec![0.0; x.cols()];
        let mut scale = vec![1.0; x.cols()];
        for (j, (m, s)) in mean.iter_mut().zip(scale.iter_mut()).enumerate() {
            let col = x.col_values(j);
            *m = col.iter().sum::<f64>() / n;
            let var = if x.rows() > 1 {
                col.iter().map(|v| (v - *m).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            if var > 0.0 {
                *s = var.sqrt();
            }
        }
        Ok(Standardizer { mean, scale })
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "standardizer for {} features applied to {}",
                self.mean.len(),
                x.cols()
            )));
        }
        let mut out = x.clone();
        let d = x.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) / self.scale[j];
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn table(users: usize) -> FeatureTable {
        let ids: Vec<String> = (0..users * 3).map(|i| format!("u{}", i / 3)).collect();
        let rows = Matrix::from_vec(ids.len(), 1, (0..ids.len()).map(|i| i as f64).collect()).unwrap();
        let labels = vec![0.0; ids.len()];
        FeatureTable::new("d", vec!["f".into()], rows, ids, labels).unwrap()
    }

    #[test]
    fn ten_users_split_seven_three() {
        let t = table(10);
        let splits = make_splits(&t, &SplitSpec::default(), &mut rng_from(0, &[])).unwrap();
        assert_eq!(splits.len(), 5);
        for s in &splits {
            assert_eq!(s.train_users.len(), 7);
            assert_eq!(s.test_users.len(), 3);
            assert_eq!(s.train.n_rows() + s.test.n_rows(), t.n_rows());
            assert!(s.train_users.iter().all(|u| !s.test_users.contains(u)));
        }
    }

    #[test]
    fn single_user_is_rejected() {
        assert!(matches!(
            make_splits(&table(1), &SplitSpec::default(), &mut rng_from(0, &[])),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn standardizer_centers_constant_columns() {
        let x = Matrix::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let s = Standardizer::fit(&x).unwrap();
        let z = s.apply(&x).unwrap();
        assert_eq!(z.col_values(1), vec![0.0, 0.0]);
        assert!((z.get(0, 0) + z.get(1, 0)).abs() < 1e-15);
    }
}
