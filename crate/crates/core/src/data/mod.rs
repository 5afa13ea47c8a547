//! Tabular feature data with per-row user ids and labels, modality maps,
//! and the CSV interchange format.
//!
//! CSV layout: comma separated, UTF-8, header required. The reserved columns
//! `__user__` and `__label__` carry the user id and label; every other column
//! is a numeric feature. Modality maps are `feature=modality` lines with `#`
//! comments.

pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const USER_COLUMN: &str = "__user__";
pub const LABEL_COLUMN: &str = "__label__";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub domain_name: String,
    feature_names: Vec<String>,
    rows: Matrix,
    user_ids: Vec<String>,
    labels: Vec<f64>,
}

impl FeatureTable {
    pub fn new(
        domain_name: impl Into<String>,
        feature_names: Vec<String>,
        rows: Matrix,
        user_ids: Vec<String>,
        labels: Vec<f64>,
    ) -> Result<Self> {
        if rows.cols() != feature_names.len() {
            return Err(Error::Schema(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                rows.cols()
            )));
        }
        if user_ids.len() != rows.rows() || labels.len() != rows.rows() {
            return Err(Error::Schema(format!(
                "{} rows with {} user ids and {} labels",
                rows.rows(),
                user_ids.len(),
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = feature_names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::Schema(format!("duplicate feature name `{dup}`")));
        }
        if !rows.is_finite() || labels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("table contains non-finite values".into()));
        }
        Ok(FeatureTable {
            domain_name: domain_name.into(),
            feature_names,
            rows,
            user_ids,
            labels,
        })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn features(&self) -> &Matrix {
        &self.rows
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn n_rows(&self) -> usize {
        self.rows.rows()
    }

    pub fn n_features(&self) -> usize {
        self.rows.cols()
    }

    /// Column values of feature `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows.rows()).map(|r| self.rows.get(r, j)).collect()
    }

    /// Distinct user ids in order of first appearance.
    pub fn users(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.user_ids
            .iter()
            .filter(|u| seen.insert(u.as_str()))
            .cloned()
            .collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureTable {
        FeatureTable {
            domain_name: self.domain_name.clone(),
            feature_names: self.feature_names.clone(),
            rows: self.rows.select_rows(idx),
            user_ids: idx.iter().map(|&i| self.user_ids[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Rows belonging to any of `users`, in table order.
    pub fn select_users(&self, users: &HashSet<String>) -> FeatureTable {
        let idx: Vec<usize> = (0..self.n_rows())
            .filter(|&i| users.contains(&self.user_ids[i]))
            .collect();
        self.select_rows(&idx)
    }

    /// Reorder columns to `names`; fails if the name sets differ.
    pub fn aligned_to(&self, names: &[String]) -> Result<FeatureTable> {
        let index: BTreeMap<&str, usize> = self
            .feature_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut missing = Vec::new();
        let mut order = Vec::with_capacity(names.len());
        for n in names {
            match index.get(n.as_str()) {
                Some(&i) => order.push(i),
                None => missing.push(n.clone()),
            }
        }
        let wanted: HashSet<&str> = names.iter().map(String::as_str).collect();
        let extra: Vec<String> = self
            .feature_names
            .iter()
            .filter(|n| !wanted.contains(n.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Schema(format!(
                "feature sets differ: missing [{}], unexpected [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        Ok(FeatureTable {
            domain_name: self.domain_name.clone(),
            feature_names: names.to_vec(),
            rows: self.rows.select_cols(&order),
            user_ids: self.user_ids.clone(),
            labels: self.labels.clone(),
        })
    }

    pub fn with_features(&self, rows: Matrix) -> Result<FeatureTable> {
        FeatureTable::new(
            self.domain_name.clone(),
            self.feature_names.clone(),
            rows,
            self.user_ids.clone(),
            self.labels.clone(),
        )
    }
}

/// Feature name → modality name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModalityMap {
    entries: BTreeMap<String, String>,
}

impl ModalityMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, feature: impl Into<String>, modality: impl Into<String>) -> Result<()> {
        let feature = feature.into();
        let modality = modality.into();
        if feature.is_empty() || modality.is_empty() {
            return Err(Error::Schema(format!(
                "empty name in modality entry `{feature}={modality}`"
            )));
        }
        self.entries.insert(feature, modality);
        Ok(())
    }

    pub fn from_pairs<I, F, M>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (F, M)>,
        F: Into<String>,
        M: Into<String>,
    {
        let mut map = ModalityMap::new();
        for (f, m) in pairs {
            map.insert(f, m)?;
        }
        Ok(map)
    }

    pub fn get(&self, feature: &str) -> Option<&str> {
        self.entries.get(feature).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks every feature has a modality; lists offenders otherwise.
    pub fn check_covers(&self, features: &[String]) -> Result<()> {
        let missing: Vec<&str> = features
            .iter()
            .filter(|f| !self.entries.contains_key(f.as_str()))
            .map(String::as_str)
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(format!(
                "features without a modality: {}",
                missing.join(", ")
            )))
        }
    }

    /// Modality names in order of first appearance over `features`, each
    /// with the indices of its member features.
    pub fn groups(&self, features: &[String]) -> Result<Vec<(String, Vec<usize>)>> {
        self.check_covers(features)?;
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, f) in features.iter().enumerate() {
            let m = &self.entries[f];
            match groups.iter_mut().find(|(name, _)| name == m) {
                Some((_, idx)) => idx.push(i),
                None => groups.push((m.clone(), vec![i])),
            }
        }
        Ok(groups)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = ModalityMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (f, m) = line.split_once('=').ok_or_else(|| {
                Error::Schema(format!("map line {}: expected `feature=modality`", lineno + 1))
            })?;
            map.insert(f.trim(), m.trim())?;
        }
        Ok(map)
    }

    /// Serialize in the order of `features`.
    pub fn to_text(&self, features: &[String]) -> Result<String> {
        self.check_covers(features)?;
        let mut out = String::new();
        for f in features {
            out.push_str(f);
            out.push('=');
            out.push_str(&self.entries[f]);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct LoadedTable {
    pub table: FeatureTable,
    pub modalities: ModalityMap,
    /// Rows dropped because a cell was empty or `NA`/`NaN`.
    pub dropped_rows: usize,
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan")
}

/// Parse a feature CSV from text. `domain_name` labels the resulting table.
pub fn parse_csv(text: &str, domain_name: &str) -> Result<(FeatureTable, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let user_col = header
        .iter()
        .position(|h| h == USER_COLUMN)
        .ok_or_else(|| Error::Schema(format!("missing reserved column `{USER_COLUMN}`")))?;
    let label_col = header
        .iter()
        .position(|h| h == LABEL_COLUMN)
        .ok_or_else(|| Error::Schema(format!("missing reserved column `{LABEL_COLUMN}`")))?;
    let feature_cols: Vec<usize> = (0..header.len())
        .filter(|&i| i != user_col && i != label_col)
        .collect();
    let names: Vec<String> = feature_cols.iter().map(|&i| header[i].clone()).collect();

    let mut data = Vec::new();
    let mut users = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.iter().any(is_missing) {
            dropped += 1;
            continue;
        }
        let parse = |i: usize| -> Result<f64> {
            let cell = record[i].trim();
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::Schema(format!(
                        "row {}: column `{}` has non-numeric value `{cell}`",
                        line + 2,
                        header[i]
                    ))
                })
        };
        for &c in &feature_cols {
            data.push(parse(c)?);
        }
        labels.push(parse(label_col)?);
        users.push(record[user_col].trim().to_string());
    }
    let rows = Matrix::from_vec(users.len(), names.len(), data)?;
    Ok((FeatureTable::new(domain_name, names, rows, users, labels)?, dropped))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Load a feature CSV and its modality map. The table is named after the
/// CSV's file stem.
pub fn load_csv(path: &Path, modality_map_path: &Path) -> Result<LoadedTable> {
    let domain = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "domain".to_string());
    let (table, dropped_rows) = parse_csv(&read_text(path)?, &domain)?;
    let modalities = ModalityMap::parse(&read_text(modality_map_path)?)?;
    modalities.check_covers(table.feature_names())?;
    Ok(LoadedTable {
        table,
        modalities,
        dropped_rows,
    })
}

pub fn table_to_csv(table: &FeatureTable) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec![USER_COLUMN.to_string(), LABEL_COLUMN.to_string()];
    header.extend(table.feature_names().iter().cloned());
    writer.write_record(&header)?;
    for r in 0..table.n_rows() {
        let mut rec = vec![table.user_ids[r].clone(), table.labels[r].to_string()];
        rec.extend(table.rows.row(r).iter().map(f64::to_string));
        writer.write_record(&rec)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Schema(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Schema(e.to_string()))
}

/// Write `contents` to a sibling temp file and rename it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_csv(table: &FeatureTable, path: &Path) -> Result<()> {
    write_atomic(path, table_to_csv(table)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_file() {
        let (t, dropped) = parse_csv("__user__,__label__,f1\nu1,1,0.5\nu2,0,-1.5\n", "d").unwrap();
        assert_eq!(t.n_features(), 1);
        assert_eq!(t.n_rows(), 2);
        assert_eq!(dropped, 0);
        assert_eq!(t.column(0), vec![0.5, -1.5]);
        assert_eq!(t.users(), vec!["u1", "u2"]);
    }

    #[test]
    fn drops_incomplete_rows() {
        let (t, dropped) =
            parse_csv("__user__,__label__,f1,f2\nu1,1,0.5,\nu2,0,1,2\nu3,1,NA,3\n", "d").unwrap();
        assert_eq!(t.n_rows(), 1);
        assert_eq!(dropped, 2);
    }

    #[test]
    fn reserved_columns_required() {
        assert!(matches!(parse_csv("__label__,f1\n1,2\n", "d"), Err(Error::Schema(_))));
        assert!(matches!(parse_csv("__user__,f1\nu,2\n", "d"), Err(Error::Schema(_))));
    }

    #[test]
    fn modality_map_parsing_and_coverage() {
        let map = ModalityMap::parse("# header\nf1 = acc # trailing\n\nf2=wifi\n").unwrap();
        assert_eq!(map.get("f1"), Some("acc"));
        assert_eq!(map.get("f2"), Some("wifi"));
        let names = vec!["f1".to_string(), "f3".to_string()];
        match map.check_covers(&names) {
            Err(Error::Schema(msg)) => assert!(msg.contains("f3")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(ModalityMap::parse("f1\n").is_err());
        assert!(ModalityMap::parse("f1=\n").is_err());
    }

    #[test]
    fn groups_follow_feature_order() {
        let map = ModalityMap::from_pairs([("a", "x"), ("b", "y"), ("c", "x")]).unwrap();
        let names: Vec<String> = ["b", "a", "c"].iter().map(|s| s.to_string()).collect();
        let groups = map.groups(&names).unwrap();
        assert_eq!(groups, vec![("y".to_string(), vec![0]), ("x".to_string(), vec![1, 2])]);
    }

    #[test]
    fn alignment_reorders_and_detects_mismatch() {
        let (t, _) = parse_csv("__user__,__label__,a,b\nu,0,1,2\n", "d").unwrap();
        let names = vec!["b".to_string(), "a".to_string()];
        assert_eq!(t.aligned_to(&names).unwrap().features().data(), &[2.0, 1.0]);
        assert!(t.aligned_to(&["a".to_string()]).is_err());
    }
}
