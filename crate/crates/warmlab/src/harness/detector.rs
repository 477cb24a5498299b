//! Gradient-norm divergence detection.
//!
//! Healthy runs keep the pre-clip gradient norm low throughout; runs that
//! are not going to converge throw large spikes well after the initial
//! steps. The detector turns that observation into a three-way verdict:
//! spikes past the threshold (or a non-finite loss) mean diverged, a trace
//! that stays under the baseline while the loss falls means converged, and
//! anything in between is inconclusive rather than guessed.

use serde::{Deserialize, Serialize};

use super::metrics::MetricsRow;
use super::{real, HarnessError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// A pre-clip gradient norm above this, after burn-in, is a spike.
    pub spike_threshold: f64,
    /// A healthy run stays at or below this after burn-in.
    pub baseline_threshold: f64,
    /// Steps at or below this are ignored: early norms run hot even in
    /// converging runs.
    pub burn_in_steps: u64,
    /// Spikes needed to call the run diverged.
    pub min_spikes: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            spike_threshold: 100.0,
            baseline_threshold: 25.0,
            burn_in_steps: 0,
            min_spikes: 1,
        }
    }
}

impl DetectorConfig {
    /// Defaults with burn-in set to 10% of the run length.
    pub fn for_total_steps(total_steps: u64) -> Self {
        Self {
            burn_in_steps: total_steps / 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.baseline_threshold > 0.0 && self.baseline_threshold.is_finite()) {
            return Err(HarnessError::InvalidConfig {
                field: "baseline_threshold",
                reason: format!("must be positive and finite, got {}", self.baseline_threshold),
            });
        }
        if !(self.spike_threshold > self.baseline_threshold && self.spike_threshold.is_finite()) {
            return Err(HarnessError::InvalidConfig {
                field: "spike_threshold",
                reason: format!(
                    "must exceed baseline_threshold {} and be finite, got {}",
                    self.baseline_threshold, self.spike_threshold
                ),
            });
        }
        if self.min_spikes == 0 {
            return Err(HarnessError::InvalidConfig {
                field: "min_spikes",
                reason: "must be at least 1".to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Converged,
    Diverged,
    Inconclusive,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::Diverged => "diverged",
            RunStatus::Inconclusive => "inconclusive",
        }
    }
}

/// One spike: the step and the pre-clip gradient norm observed there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub step: u64,
    #[serde(with = "real")]
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunVerdict {
    pub status: RunStatus,
    /// Every post-burn-in spike row, plus any rows with non-finite loss.
    pub evidence: Vec<SpikeEvent>,
    #[serde(with = "real")]
    pub final_loss: f64,
}

/// Classify a metrics log as converged, diverged, or inconclusive.
pub fn detect_divergence(
    log: &[MetricsRow],
    det: &DetectorConfig,
) -> Result<RunVerdict, HarnessError> {
    det.validate()?;
    if log.is_empty() {
        return Err(HarnessError::EmptyLog);
    }

    let is_spike = |row: &MetricsRow| {
        row.step > det.burn_in_steps
            && (row.grad_norm_preclip > det.spike_threshold || row.grad_norm_preclip.is_nan())
    };

    let mut evidence: Vec<SpikeEvent> = Vec::new();
    let mut spike_count = 0usize;
    let mut non_finite_loss = false;
    for row in log {
        let spike = is_spike(row);
        if spike {
            spike_count += 1;
        }
        if spike || !row.loss.is_finite() {
            evidence.push(SpikeEvent {
                step: row.step,
                grad_norm: row.grad_norm_preclip,
            });
            non_finite_loss |= !row.loss.is_finite();
        }
    }

    let final_loss = log.last().expect("log nonempty").loss;
    let status = if spike_count >= det.min_spikes || non_finite_loss {
        RunStatus::Diverged
    } else {
        let calm = log
            .iter()
            .filter(|r| r.step > det.burn_in_steps)
            .all(|r| r.grad_norm_preclip <= det.baseline_threshold);
        let first_loss = log[0].loss;
        if calm && final_loss < first_loss {
            RunStatus::Converged
        } else {
            RunStatus::Inconclusive
        }
    };

    Ok(RunVerdict {
        status,
        evidence,
        final_loss,
    })
}
