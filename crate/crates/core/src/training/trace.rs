use serde::Serialize;

use super::Stage;
use crate::error::Result;

/// One epoch of one stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub task_loss: f64,
    pub domain_loss: Option<f64>,
    /// Effective coefficient per branch.
    pub lambdas: Vec<f64>,
    /// Validation task loss.
    pub val_metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageTrace {
    pub records: Vec<TraceRecord>,
}

impl StageTrace {
    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    /// Stages in order of first appearance.
    pub fn stages(&self) -> Vec<Stage> {
        let mut out: Vec<Stage> = Vec::new();
        for r in &self.records {
            if out.last() != Some(&r.stage) {
                out.push(r.stage);
            }
        }
        out
    }

    /// `stage,epoch,task_loss,domain_loss,lambda_branch_0..k,val_metric`,
    /// with as many coefficient columns as the widest record.
    pub fn to_csv(&self) -> Result<String> {
        let k = self.records.iter().map(|r| r.lambdas.len()).max().unwrap_or(0);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["stage".to_string(), "epoch".into(), "task_loss".into(), "domain_loss".into()];
        header.extend((0..k).map(|i| format!("lambda_branch_{i}")));
        header.push("val_metric".into());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.stage.id().to_string(),
                r.epoch.to_string(),
                r.task_loss.to_string(),
                r.domain_loss.map(|d| d.to_string()).unwrap_or_default(),
            ];
            row.extend((0..k).map(|i| r.lambdas.get(i).map(f64::to_string).unwrap_or_default()));
            row.push(r.val_metric.to_string());
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| crate::Error::Validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
