//! Versioned JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureSpec, ModelGraph};
use crate::data::{read_text, write_atomic};
use crate::error::{Error, Result};
use crate::shift::BranchPlan;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture: ArchitectureSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<BranchPlan>,
    pub graph: ModelGraph,
    /// Every parameter in graph order, kept for external tooling.
    pub flat_params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(architecture: ArchitectureSpec, plan: Option<BranchPlan>, graph: ModelGraph) -> Self {
        let flat_params = graph.flat_params();
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            architecture,
            plan,
            graph,
            flat_params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.format_version
            )));
        }
        let g = &ckpt.graph;
        let graph = ModelGraph::new(
            g.input_dim,
            g.task,
            g.branches.clone(),
            g.target_head.clone(),
            g.domain_head.clone(),
        )?;
        if graph.flat_params() != ckpt.flat_params {
            return Err(Error::Schema("checkpoint parameter arrays disagree".into()));
        }
        Ok(Checkpoint { graph, ..ckpt })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }
}
