//! Schedule sweeps: one base run, many warmup policies, shared seeds.
//!
//! Every variant trains the same model on the same data from the same
//! initialization — the schedule is the only difference — so final losses
//! and verdicts are directly comparable. Variants may run in parallel; each
//! owns its output directory and the summary keeps spec order regardless.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::harness::{
    init_state, train_from, write_artifacts, HarnessError, RunConfig, TrainOutcome,
};
use crate::schedule::ScheduleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepVariant {
    pub name: String,
    pub schedule: ScheduleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: RunConfig,
    pub variants: Vec<SweepVariant>,
    /// Default output directory; a caller-supplied one takes precedence.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.variants.is_empty() {
            return Err(HarnessError::InvalidConfig {
                field: "variants",
                reason: "need at least one variant".to_string(),
            });
        }
        for (i, variant) in self.variants.iter().enumerate() {
            if variant.name.is_empty()
                || !variant
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
                || variant.name.starts_with('.')
            {
                return Err(HarnessError::InvalidConfig {
                    field: "variants",
                    reason: format!(
                        "name `{}` (variant {i}) must be nonempty [A-Za-z0-9._-] and not start with a dot",
                        variant.name
                    ),
                });
            }
            if self.variants[..i].iter().any(|v| v.name == variant.name) {
                return Err(HarnessError::InvalidConfig {
                    field: "variants",
                    reason: format!("duplicate name `{}`", variant.name),
                });
            }
        }
        for variant in &self.variants {
            self.run_config(variant).validate()?;
        }
        Ok(())
    }

    /// The base config with this variant's schedule substituted in.
    pub fn run_config(&self, variant: &SweepVariant) -> RunConfig {
        RunConfig {
            schedule: variant.schedule.clone(),
            ..self.base.clone()
        }
    }
}

/// One line of the sweep summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummaryRow {
    pub variant: String,
    /// converged | diverged | inconclusive | error
    pub status: String,
    pub final_loss: f64,
    /// Step of the first gradient-norm spike, if the verdict carried any.
    pub first_spike_step: Option<u64>,
    /// SHA-256 of the initial parameter bytes; equal across variants by the
    /// shared-seed contract.
    pub init_hash: String,
    /// Failure description when status is `error`.
    pub error: Option<String>,
}

pub const SUMMARY_HEADER: &str = "variant,status,final_loss,first_spike_step,init_hash,error";

pub fn summary_to_csv(rows: &[SweepSummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let spike = r
            .first_spike_step
            .map(|s| s.to_string())
            .unwrap_or_default();
        let error = r
            .error
            .as_deref()
            .unwrap_or_default()
            .replace([',', '\n'], ";");
        out.push_str(&format!(
            "{},{},{:.16e},{},{},{}\n",
            r.variant, r.status, r.final_loss, spike, r.init_hash, error
        ));
    }
    out
}

/// SHA-256 over the little-endian bytes of every parameter, in order.
fn hash_params(params: &[crate::autodiff::Tensor]) -> String {
    let mut hasher = Sha256::new();
    for p in params {
        hasher.update(p.le_bytes());
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Run every variant, writing per-variant artifacts under
/// `out_dir/<name>/` and a `summary.csv` at the top. Individual run
/// failures become `error` rows instead of aborting the sweep.
pub fn run_sweep(
    spec: &SweepSpec,
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<SweepSummaryRow>, HarnessError> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let jobs = jobs.max(1).min(spec.variants.len());
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<SweepSummaryRow>>> =
        Mutex::new(vec![None; spec.variants.len()]);

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::Relaxed);
                let Some(variant) = spec.variants.get(index) else {
                    break;
                };
                let row = run_variant(spec, variant, out_dir).unwrap_or_else(|e| {
                    SweepSummaryRow {
                        variant: variant.name.clone(),
                        status: "error".to_string(),
                        final_loss: f64::NAN,
                        first_spike_step: None,
                        init_hash: String::new(),
                        error: Some(e.to_string()),
                    }
                });
                rows.lock().expect("summary lock")[index] = Some(row);
            });
        }
    });

    let rows: Vec<SweepSummaryRow> = rows
        .into_inner()
        .expect("summary lock")
        .into_iter()
        .map(|r| r.expect("every variant produces a row"))
        .collect();
    std::fs::write(out_dir.join("summary.csv"), summary_to_csv(&rows))?;
    Ok(rows)
}

fn run_variant(
    spec: &SweepSpec,
    variant: &SweepVariant,
    out_dir: &Path,
) -> Result<SweepSummaryRow, HarnessError> {
    let run = spec.run_config(variant);
    let dir = out_dir.join(&variant.name);
    std::fs::create_dir_all(&dir)?;

    let state = init_state(&run)?;
    let init_hash = hash_params(&state.params);
    let outcome: TrainOutcome = train_from(&run, state, Some(&dir))?;
    write_artifacts(&dir, &run, &outcome)?;

    Ok(SweepSummaryRow {
        variant: variant.name.clone(),
        status: outcome.verdict.status.as_str().to_string(),
        final_loss: outcome.verdict.final_loss,
        first_spike_step: outcome.verdict.evidence.first().map(|e| e.step),
        init_hash,
        error: None,
    })
}
