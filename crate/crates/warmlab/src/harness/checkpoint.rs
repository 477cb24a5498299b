//! Versioned JSON checkpoints for exact mid-run resume.
//!
//! Everything mutable lives in the checkpoint: parameters, Adam moments,
//! and the data cursor. The schedule needs nothing saved — it is a pure
//! function of the step index — and the dataset is regenerated from config,
//! so the cursor is the only trace of data progress.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Tensor;
use crate::optim::AdamState;

use super::{HarnessError, RunConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

/// The full config is stored (not just a digest) so a mismatched resume can
/// say which field changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub step: u64,
    pub data_cursor: u64,
    pub params: Vec<Tensor>,
    pub adam: AdamState,
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), HarnessError> {
    let json = serde_json::to_string(checkpoint)?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Load a checkpoint and verify it belongs to `expected`'s run.
pub fn load_checkpoint(path: &Path, expected: &RunConfig) -> Result<Checkpoint, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)?;
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(HarnessError::Version {
            found: checkpoint.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let stored = serde_json::to_value(&checkpoint.config)?;
    let wanted = serde_json::to_value(expected)?;
    if let Some(path) = first_difference(&stored, &wanted, "config") {
        return Err(HarnessError::ConfigMismatch { path });
    }
    Ok(checkpoint)
}

/// Path of the first leaf where two JSON trees disagree, if any.
fn first_difference(a: &Value, b: &Value, path: &str) -> Option<String> {
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            // serde_json objects iterate in sorted key order, so the first
            // reported path is deterministic.
            for (key, va) in ma {
                match mb.get(key) {
                    Some(vb) => {
                        if let Some(hit) = first_difference(va, vb, &format!("{path}.{key}")) {
                            return Some(hit);
                        }
                    }
                    None => return Some(format!("{path}.{key}")),
                }
            }
            mb.keys()
                .find(|key| !ma.contains_key(*key))
                .map(|key| format!("{path}.{key}"))
        }
        (Value::Array(xs), Value::Array(ys)) => {
            if xs.len() != ys.len() {
                return Some(format!("{path}.length"));
            }
            xs.iter()
                .zip(ys)
                .enumerate()
                .find_map(|(i, (x, y))| first_difference(x, y, &format!("{path}[{i}]")))
        }
        _ => (a != b).then(|| path.to_string()),
    }
}
