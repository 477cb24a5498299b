//! Deterministic end-to-end training runs.
//!
//! The loop wires the pieces together in the recipe's order: forward, loss,
//! backward, global-norm clip, Adam step at `lr_at(schedule, step)`. Steps
//! are numbered 1..=total_steps; everything observable (metrics, verdict,
//! checkpoints) is a pure function of the run config, wallclock aside.

mod checkpoint;
mod data;
mod detector;
mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use data::{gen_dataset, Dataset};
pub use detector::{detect_divergence, DetectorConfig, RunStatus, RunVerdict, SpikeEvent};
pub use metrics::{
    metrics_from_csv, metrics_to_csv, perplexity, val_to_csv, MetricsRow, ValRow,
    METRICS_HEADER,
};

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::model::{build, ModelError, StackConfig, ToyModel};
use crate::optim::{
    adam_step, clip_global_norm, global_grad_norm, AdamConfig, AdamState, ClipConfig, OptimError,
};
use crate::schedule::{lr_at_valid, ScheduleConfig, ScheduleError};

/// Fraction of samples held out when `holdout_split` is enabled.
const HOLDOUT_FRACTION: f64 = 0.10;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("metrics parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("divergence detector needs a nonempty log")]
    EmptyLog,

    #[error("checkpoint version {found} unsupported (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint does not match the run config at {path}")]
    ConfigMismatch { path: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Schedule(#[from] ScheduleError),

    #[error(transparent)]
    Optim(#[from] OptimError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub num_samples: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub noise_level: f64,
    /// Hold out the last 10% of samples as a fixed validation split.
    #[serde(default)]
    pub holdout_split: bool,
}

/// Everything a run needs, in one reproducible unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub clip: ClipConfig,
    #[serde(default)]
    pub model: StackConfig,
    pub data: DataConfig,
    pub total_steps: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub label_smoothing: f64,
    /// Micro-batches averaged into each optimizer step.
    #[serde(default = "default_grad_accum")]
    pub grad_accum: u64,
}

fn default_log_every() -> u64 {
    1
}

fn default_grad_accum() -> u64 {
    1
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.clip.validate()?;
        self.model.validate()?;
        if self.total_steps == 0 {
            return Err(HarnessError::InvalidConfig {
                field: "total_steps",
                reason: "must be at least 1".to_string(),
            });
        }
        if self.log_every == 0 {
            return Err(HarnessError::InvalidConfig {
                field: "log_every",
                reason: "must be at least 1".to_string(),
            });
        }
        if self.grad_accum == 0 {
            return Err(HarnessError::InvalidConfig {
                field: "grad_accum",
                reason: "must be at least 1".to_string(),
            });
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(HarnessError::InvalidConfig {
                field: "label_smoothing",
                reason: format!("must be in [0, 1), got {}", self.label_smoothing),
            });
        }
        if self.data.batch_size == 0 {
            return Err(HarnessError::InvalidConfig {
                field: "batch_size",
                reason: "must be at least 1".to_string(),
            });
        }
        if self.data.num_samples < self.model.num_classes {
            return Err(HarnessError::InvalidConfig {
                field: "num_samples",
                reason: format!(
                    "need at least one sample per class ({})",
                    self.model.num_classes
                ),
            });
        }
        if !(self.data.noise_level >= 0.0 && self.data.noise_level.is_finite()) {
            return Err(HarnessError::InvalidConfig {
                field: "noise_level",
                reason: format!("must be non-negative and finite, got {}", self.data.noise_level),
            });
        }
        if self.data.holdout_split && self.holdout_len() == 0 {
            return Err(HarnessError::InvalidConfig {
                field: "num_samples",
                reason: "too few samples for a holdout split".to_string(),
            });
        }
        Ok(())
    }

    fn holdout_len(&self) -> usize {
        if self.data.holdout_split {
            (self.data.num_samples as f64 * HOLDOUT_FRACTION).floor() as usize
        } else {
            0
        }
    }
}

/// All mutable training state; what a checkpoint captures.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub data_cursor: u64,
    pub params: Vec<Tensor>,
    pub adam: AdamState,
}

/// What a finished (or early-stopped) run hands back.
#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub val_metrics: Vec<ValRow>,
    pub verdict: RunVerdict,
    pub final_state: TrainState,
}

impl Checkpoint {
    pub fn from_state(run: &RunConfig, state: &TrainState) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: run.clone(),
            step: state.step,
            data_cursor: state.data_cursor,
            params: state.params.clone(),
            adam: state.adam.clone(),
        }
    }
}

/// Fresh state at step 0: initialized model, zeroed moments, cursor at 0.
pub fn init_state(run: &RunConfig) -> Result<TrainState, HarnessError> {
    run.validate()?;
    let model = build(&run.model)?;
    let params = model.param_tensors();
    let refs: Vec<&Tensor> = params.iter().collect();
    let adam = AdamState::zeros_like(&refs);
    Ok(TrainState {
        step: 0,
        data_cursor: 0,
        params,
        adam,
    })
}

/// Train from a fresh initialization.
pub fn train(run: &RunConfig, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome, HarnessError> {
    let state = init_state(run)?;
    train_from(run, state, checkpoint_dir)
}

/// Write a finished run's artifacts into `dir`: `metrics.csv`,
/// `verdict.json`, `checkpoint_final.json`, and `val.csv` when the run
/// evaluated a holdout split.
pub fn write_artifacts(
    dir: &Path,
    run: &RunConfig,
    outcome: &TrainOutcome,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), metrics_to_csv(&outcome.metrics))?;
    if !outcome.val_metrics.is_empty() {
        std::fs::write(dir.join("val.csv"), val_to_csv(&outcome.val_metrics))?;
    }
    std::fs::write(
        dir.join("verdict.json"),
        serde_json::to_string_pretty(&outcome.verdict)?,
    )?;
    save_checkpoint(
        &dir.join("checkpoint_final.json"),
        &Checkpoint::from_state(run, &outcome.final_state),
    )?;
    Ok(())
}

/// Resume from a checkpoint file, verifying it belongs to this run config.
pub fn resume(
    run: &RunConfig,
    checkpoint_path: &Path,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, HarnessError> {
    let checkpoint = load_checkpoint(checkpoint_path, run)?;
    let state = TrainState {
        step: checkpoint.step,
        data_cursor: checkpoint.data_cursor,
        params: checkpoint.params,
        adam: checkpoint.adam,
    };
    train_from(run, state, checkpoint_dir)
}

/// Run steps `state.step + 1 ..= total_steps`.
///
/// Early-stops when the loss or gradient norm goes non-finite: the
/// offending step is logged unconditionally (so the verdict has evidence)
/// and no optimizer step is taken on the broken gradients.
pub fn train_from(
    run: &RunConfig,
    state: TrainState,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, HarnessError> {
    run.validate()?;
    let dataset = gen_dataset(
        run.data.seed,
        run.data.num_samples,
        run.model.input_dim,
        run.model.num_classes,
        run.data.noise_level,
    )?;
    let train_len = dataset.len() - run.holdout_len();

    let mut model = build(&run.model)?;
    model.load_params(&state.params)?;
    let mut adam = state.adam;
    let mut cursor = state.data_cursor;
    let mut last_step = state.step;

    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut val_metrics: Vec<ValRow> = Vec::new();

    for step in (state.step + 1)..=run.total_steps {
        let started = Instant::now();
        let mut grads: Vec<Tensor> = model
            .param_refs()
            .iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        let mut loss_sum = 0.0;
        for _ in 0..run.grad_accum {
            let (batch, labels) = dataset.batch(cursor, run.data.batch_size, train_len);
            cursor = (cursor + run.data.batch_size as u64) % train_len as u64;
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &batch)?;
            let loss_node = tape.softmax_cross_entropy(pass.logits, &labels, run.label_smoothing)?;
            loss_sum += tape.value(loss_node).at(0);
            let tape_grads = tape.backward(loss_node)?;
            for (acc, node) in grads.iter_mut().zip(&pass.param_nodes) {
                let source = tape_grads.wrt(*node);
                for (a, s) in acc.data_mut().iter_mut().zip(source.data()) {
                    *a += s;
                }
            }
        }
        let inv = 1.0 / run.grad_accum as f64;
        let loss = loss_sum * inv;
        if run.grad_accum > 1 {
            for g in grads.iter_mut() {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
        }

        let lr = lr_at_valid(&run.schedule, step);
        let pre_norm = global_grad_norm(&grads);
        last_step = step;

        if !loss.is_finite() || !pre_norm.is_finite() {
            // Log the broken step no matter what log_every says, then stop:
            // there is no meaningful update to take from here.
            metrics.push(MetricsRow {
                step,
                lr,
                loss,
                perplexity: perplexity(loss),
                grad_norm_preclip: pre_norm,
                grad_norm_postclip: pre_norm,
                wallclock_ms: started.elapsed().as_millis() as u64,
            });
            break;
        }

        let clip = clip_global_norm(&mut grads, &run.clip)?;
        let mut refs = model.param_refs_mut();
        adam_step(&mut refs, &grads, &mut adam, &run.optimizer, lr)?;

        if step % run.log_every == 0 || step == run.total_steps {
            metrics.push(MetricsRow {
                step,
                lr,
                loss,
                perplexity: perplexity(loss),
                grad_norm_preclip: clip.pre_norm,
                grad_norm_postclip: clip.post_norm,
                wallclock_ms: started.elapsed().as_millis() as u64,
            });
            if train_len < dataset.len() {
                val_metrics.push(eval_holdout(&model, &dataset, train_len, step)?);
            }
        }

        if run.checkpoint_every > 0 && step % run.checkpoint_every == 0 {
            if let Some(dir) = checkpoint_dir {
                let snapshot = TrainState {
                    step,
                    data_cursor: cursor,
                    params: model.param_tensors(),
                    adam: adam.clone(),
                };
                let checkpoint = Checkpoint::from_state(run, &snapshot);
                save_checkpoint(&dir.join(format!("checkpoint_{step:08}.json")), &checkpoint)?;
            }
        }
    }

    let final_state = TrainState {
        step: last_step,
        data_cursor: cursor,
        params: model.param_tensors(),
        adam,
    };
    let detector = DetectorConfig::for_total_steps(run.total_steps);
    let verdict = if metrics.is_empty() {
        // Resuming at or past total_steps runs no new steps; nothing to judge.
        RunVerdict {
            status: RunStatus::Inconclusive,
            evidence: Vec::new(),
            final_loss: f64::NAN,
        }
    } else {
        detect_divergence(&metrics, &detector)?
    };

    Ok(TrainOutcome {
        metrics,
        val_metrics,
        verdict,
        final_state,
    })
}

/// Loss over the held-out tail with the current parameters (no smoothing —
/// validation measures the plain cross-entropy the perplexity curves track).
fn eval_holdout(
    model: &ToyModel,
    dataset: &Dataset,
    from: usize,
    step: u64,
) -> Result<ValRow, HarnessError> {
    let (batch, labels) = dataset.tail(from);
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &batch)?;
    let loss_node = tape.softmax_cross_entropy(pass.logits, &labels, 0.0)?;
    let loss = tape.value(loss_node).at(0);
    Ok(ValRow {
        step,
        loss,
        perplexity: perplexity(loss),
    })
}

/// Serde adapter for f64 fields that may hold NaN or infinities, which JSON
/// numbers cannot represent: non-finite values are written as strings.
pub(crate) mod real {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_str(&x.to_string())
        }
    }

    struct RealVisitor;

    impl Visitor<'_> for RealVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a number, or a string like \"NaN\" or \"inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            v.parse().map_err(|_| E::custom(format!("not a real: {v}")))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(RealVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{lr_at, ScheduleConfig, WarmupPolicy};

    /// A small, quick run that converges comfortably.
    fn tiny_run() -> RunConfig {
        RunConfig {
            schedule: ScheduleConfig {
                peak_lr: 2e-3,
                warmup_steps: 100,
                policy: WarmupPolicy::Exponential { alpha: 1.5 },
            },
            optimizer: AdamConfig::default(),
            clip: ClipConfig::default(),
            model: StackConfig {
                depth: 2,
                subcomponents_per_block: 2,
                width: 16,
                input_dim: 8,
                num_classes: 4,
                seed: 3,
                ..StackConfig::default()
            },
            data: DataConfig {
                seed: 5,
                num_samples: 64,
                batch_size: 8,
                noise_level: 0.05,
                holdout_split: false,
            },
            total_steps: 300,
            log_every: 10,
            checkpoint_every: 0,
            label_smoothing: 0.0,
            grad_accum: 1,
        }
    }

    #[test]
    fn zero_total_steps_is_rejected() {
        let mut run = tiny_run();
        run.total_steps = 0;
        assert!(matches!(
            run.validate(),
            Err(HarnessError::InvalidConfig { field: "total_steps", .. })
        ));
    }

    #[test]
    fn config_json_round_trips_with_defaults_filled() {
        let json = r#"{
            "schedule": {"peak_lr": 2e-4, "warmup_steps": 1000, "policy": {"type": "inverse_sqrt"}},
            "data": {"seed": 1, "num_samples": 50, "batch_size": 5},
            "total_steps": 10
        }"#;
        let run: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(run.log_every, 1);
        assert_eq!(run.grad_accum, 1);
        assert_eq!(run.optimizer, AdamConfig::default());
        assert_eq!(run.clip, ClipConfig::default());
        assert_eq!(run.model, StackConfig::default());
        run.validate().unwrap();
    }

    #[test]
    fn tiny_run_beats_the_untrained_baseline() {
        let run = tiny_run();
        let outcome = train(&run, None).unwrap();
        let baseline = (run.model.num_classes as f64).ln();
        let final_loss = outcome.metrics.last().unwrap().loss;
        assert!(
            final_loss < baseline,
            "final loss {final_loss} should beat ln(C) = {baseline}"
        );
        assert_eq!(outcome.final_state.step, run.total_steps);
    }

    #[test]
    fn runs_are_deterministic() {
        let run = tiny_run();
        let a = train(&run, None).unwrap();
        let b = train(&run, None).unwrap();
        let strip = |rows: &[MetricsRow]| {
            rows.iter()
                .map(|r| MetricsRow {
                    wallclock_ms: 0,
                    ..r.clone()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
        assert_eq!(a.final_state, b.final_state);
        assert_eq!(a.verdict, b.verdict);
    }

    #[test]
    fn lr_column_matches_the_schedule_bit_for_bit() {
        let run = tiny_run();
        let outcome = train(&run, None).unwrap();
        for row in &outcome.metrics {
            let expected = lr_at(&run.schedule, row.step).unwrap();
            assert_eq!(row.lr.to_bits(), expected.to_bits(), "step {}", row.step);
        }
    }

    #[test]
    fn metrics_respect_log_every_plus_final_step() {
        let mut run = tiny_run();
        run.total_steps = 25;
        run.log_every = 10;
        let outcome = train(&run, None).unwrap();
        let steps: Vec<u64> = outcome.metrics.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![10, 20, 25]);
    }

    #[test]
    fn metrics_consistency_invariants_hold() {
        let run = tiny_run();
        let outcome = train(&run, None).unwrap();
        for row in &outcome.metrics {
            let ppl = perplexity(row.loss);
            assert!((row.perplexity - ppl).abs() <= ppl.abs() * 1e-12);
            let cap = row.grad_norm_preclip.max(run.clip.max_norm);
            assert!(row.grad_norm_postclip <= cap * (1.0 + 1e-12));
        }
    }

    #[test]
    fn holdout_split_produces_val_rows() {
        let mut run = tiny_run();
        run.data.holdout_split = true;
        run.data.num_samples = 80;
        run.total_steps = 50;
        run.log_every = 25;
        let outcome = train(&run, None).unwrap();
        assert_eq!(outcome.val_metrics.len(), outcome.metrics.len());
        for v in &outcome.val_metrics {
            assert!(v.loss.is_finite());
            assert!((v.perplexity - perplexity(v.loss)).abs() <= v.perplexity * 1e-12);
        }
    }

    #[test]
    fn exploding_config_stops_early_with_diverged_verdict() {
        let mut run = tiny_run();
        run.model.init_scale = 1e120;
        run.model.depth = 6;
        run.model.subcomponents_per_block = 3;
        let outcome = train(&run, None).unwrap();
        assert_eq!(outcome.verdict.status, RunStatus::Diverged);
        assert!(!outcome.verdict.evidence.is_empty());
        // The offending step is recorded and the run stopped there.
        let last = outcome.metrics.last().unwrap();
        assert!(!last.loss.is_finite() || last.grad_norm_preclip.is_infinite());
        assert!(outcome.final_state.step < run.total_steps);
    }

    #[test]
    fn grad_accum_averages_micro_batches() {
        // One step, accumulation 2, batch 4 == one step with batch 8 when
        // the 8 rows are the first 8 rows in order: same mean gradient.
        let mut small = tiny_run();
        small.total_steps = 1;
        small.log_every = 1;
        small.grad_accum = 2;
        small.data.batch_size = 4;
        let a = train(&small, None).unwrap();

        let mut big = tiny_run();
        big.total_steps = 1;
        big.log_every = 1;
        big.grad_accum = 1;
        big.data.batch_size = 8;
        let b = train(&big, None).unwrap();

        // Same data rows, same model: accumulated mean loss and gradient
        // agree to rounding (summation order differs).
        let (ra, rb) = (&a.metrics[0], &b.metrics[0]);
        assert!((ra.loss - rb.loss).abs() <= 1e-12 * rb.loss.abs());
        assert!(
            (ra.grad_norm_preclip - rb.grad_norm_preclip).abs()
                <= 1e-9 * rb.grad_norm_preclip.abs()
        );
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = tiny_run();
        run.total_steps = 100;
        run.log_every = 5;
        run.checkpoint_every = 50;

        let full = train(&run, Some(dir.path())).unwrap();
        let ckpt_path = dir.path().join("checkpoint_00000050.json");
        assert!(ckpt_path.exists());

        let resumed = resume(&run, &ckpt_path, None).unwrap();
        let tail: Vec<MetricsRow> = full
            .metrics
            .iter()
            .filter(|r| r.step > 50)
            .cloned()
            .collect();
        let strip = |rows: &[MetricsRow]| {
            rows.iter()
                .map(|r| MetricsRow {
                    wallclock_ms: 0,
                    ..r.clone()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&resumed.metrics), strip(&tail));
        assert_eq!(resumed.final_state, full.final_state);
    }

    #[test]
    fn resume_rejects_an_altered_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = tiny_run();
        run.total_steps = 20;
        run.checkpoint_every = 10;
        train(&run, Some(dir.path())).unwrap();

        let mut altered = run.clone();
        altered.schedule.warmup_steps = 999;
        let err = resume(&altered, &dir.path().join("checkpoint_00000010.json"), None);
        assert!(matches!(err, Err(HarnessError::ConfigMismatch { .. })));
    }
}
