//! Step-indexed learning-rate schedules.
//!
//! Four warmup policies share a single inverse-square-root decay phase:
//! the LR rises from 0 to the peak `peak_lr` over `warmup_steps` steps
//! according to the policy, then decays as `peak_lr * sqrt(w / step)`.
//! All schedule math is pure `f64`; the same `(config, step)` pair always
//! yields the same bits.

use serde::{Deserialize, Serialize};

/// Warmup shape used during the first `warmup_steps` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WarmupPolicy {
    /// Linear ramp from 0 to the peak (the classic inverse-sqrt scheduler).
    #[serde(rename = "inverse_sqrt")]
    InverseSqrtLinear,
    /// Two chained linear ramps: 0 -> intermediate_lr over intermediate_steps,
    /// then intermediate_lr -> peak over the remaining warmup. The knee must
    /// lie on or below the straight 0-to-peak line (`intermediate_lr / peak_lr
    /// <= intermediate_steps / warmup_steps`) so the second ramp is at least
    /// as steep as the first.
    PiecewiseLinear {
        intermediate_lr: f64,
        intermediate_steps: u64,
    },
    /// `peak * (step / warmup)^alpha`.
    Polynomial { alpha: f64 },
    /// `peak * (e^(alpha * step / warmup) - 1) / (e^alpha - 1)`.
    Exponential { alpha: f64 },
}

impl WarmupPolicy {
    /// Short stable name, matching the serialized `type` tag.
    pub fn name(&self) -> &'static str {
        match self {
            WarmupPolicy::InverseSqrtLinear => "inverse_sqrt",
            WarmupPolicy::PiecewiseLinear { .. } => "piecewise_linear",
            WarmupPolicy::Polynomial { .. } => "polynomial",
            WarmupPolicy::Exponential { .. } => "exponential",
        }
    }
}

/// A complete schedule: peak LR, warmup horizon, and warmup shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub policy: WarmupPolicy,
}

/// Errors from schedule construction, evaluation, or comparison.
#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("invalid schedule config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("schedule parse error: {0}")]
    Parse(String),
    #[error("schedules are not comparable: {0}")]
    Comparison(String),
}

impl ScheduleConfig {
    /// Peak LR and warmup horizon used throughout this crate's defaults.
    pub const DEFAULT_PEAK_LR: f64 = 2e-4;
    pub const DEFAULT_WARMUP_STEPS: u64 = 50_000;
    pub const DEFAULT_ALPHA: f64 = 1.5;

    pub fn new(peak_lr: f64, warmup_steps: u64, policy: WarmupPolicy) -> Self {
        Self {
            peak_lr,
            warmup_steps,
            policy,
        }
    }

    /// Linear warmup with the default peak/horizon.
    pub fn default_inverse_sqrt() -> Self {
        Self::new(
            Self::DEFAULT_PEAK_LR,
            Self::DEFAULT_WARMUP_STEPS,
            WarmupPolicy::InverseSqrtLinear,
        )
    }

    /// Piecewise-linear warmup with intermediate point (w/2, peak/10).
    pub fn default_piecewise_linear() -> Self {
        Self::new(
            Self::DEFAULT_PEAK_LR,
            Self::DEFAULT_WARMUP_STEPS,
            WarmupPolicy::PiecewiseLinear {
                intermediate_lr: Self::DEFAULT_PEAK_LR / 10.0,
                intermediate_steps: Self::DEFAULT_WARMUP_STEPS / 2,
            },
        )
    }

    /// Polynomial warmup with alpha = 1.5.
    pub fn default_polynomial() -> Self {
        Self::new(
            Self::DEFAULT_PEAK_LR,
            Self::DEFAULT_WARMUP_STEPS,
            WarmupPolicy::Polynomial {
                alpha: Self::DEFAULT_ALPHA,
            },
        )
    }

    /// Exponential warmup with alpha = 1.5.
    pub fn default_exponential() -> Self {
        Self::new(
            Self::DEFAULT_PEAK_LR,
            Self::DEFAULT_WARMUP_STEPS,
            WarmupPolicy::Exponential {
                alpha: Self::DEFAULT_ALPHA,
            },
        )
    }

    /// All four default schedules, in a stable order.
    pub fn all_defaults() -> Vec<Self> {
        vec![
            Self::default_inverse_sqrt(),
            Self::default_piecewise_linear(),
            Self::default_polynomial(),
            Self::default_exponential(),
        ]
    }

    /// Check every config invariant; errors name the offending field.
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(ScheduleError::InvalidConfig {
                field: "peak_lr",
                reason: format!("must be positive and finite, got {}", self.peak_lr),
            });
        }
        if self.warmup_steps == 0 {
            return Err(ScheduleError::InvalidConfig {
                field: "warmup_steps",
                reason: "must be >= 1".to_string(),
            });
        }
        match &self.policy {
            WarmupPolicy::InverseSqrtLinear => {}
            WarmupPolicy::PiecewiseLinear {
                intermediate_lr,
                intermediate_steps,
            } => {
                if !(intermediate_lr.is_finite()
                    && *intermediate_lr > 0.0
                    && *intermediate_lr < self.peak_lr)
                {
                    return Err(ScheduleError::InvalidConfig {
                        field: "intermediate_lr",
                        reason: format!(
                            "must satisfy 0 < intermediate_lr < peak_lr ({}), got {}",
                            self.peak_lr, intermediate_lr
                        ),
                    });
                }
                if !(*intermediate_steps > 0 && *intermediate_steps < self.warmup_steps) {
                    return Err(ScheduleError::InvalidConfig {
                        field: "intermediate_steps",
                        reason: format!(
                            "must satisfy 0 < intermediate_steps < warmup_steps ({}), got {}",
                            self.warmup_steps, intermediate_steps
                        ),
                    });
                }
                // The knee must sit on or below the straight line from
                // (0, 0) to (warmup_steps, peak_lr), i.e. the first ramp
                // may not be steeper than the second. Otherwise the
                // max()-of-ramps evaluation keeps following the first ramp
                // past the knee, overshooting the peak — a shape the
                // two-phase policy was never meant to describe.
                if intermediate_lr * self.warmup_steps as f64
                    > self.peak_lr * *intermediate_steps as f64
                {
                    return Err(ScheduleError::InvalidConfig {
                        field: "intermediate_lr",
                        reason: format!(
                            "first ramp steeper than the second: intermediate_lr/peak_lr \
                             ({:e}) must not exceed intermediate_steps/warmup_steps ({:e})",
                            intermediate_lr / self.peak_lr,
                            *intermediate_steps as f64 / self.warmup_steps as f64
                        ),
                    });
                }
            }
            WarmupPolicy::Polynomial { alpha } | WarmupPolicy::Exponential { alpha } => {
                if !(alpha.is_finite() && *alpha > 0.0) {
                    return Err(ScheduleError::InvalidConfig {
                        field: "alpha",
                        reason: format!("must be positive and finite, got {alpha}"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// LR at an integer step.
///
/// Step 0 maps to 0 for every policy. Steps >= `warmup_steps` follow the
/// shared inverse-square-root decay, identical across policies bit for bit;
/// the warmup/decay boundary step itself belongs to the decay branch (both
/// branches agree there).
pub fn lr_at(config: &ScheduleConfig, step: u64) -> Result<f64, ScheduleError> {
    config.validate()?;
    Ok(lr_at_valid(config, step))
}

/// `lr_at` without revalidating; callers must hold a validated config.
pub(crate) fn lr_at_valid(config: &ScheduleConfig, step: u64) -> f64 {
    if step == 0 {
        return 0.0;
    }
    let eta = config.peak_lr;
    let w = config.warmup_steps as f64;
    let i = step as f64;
    if step >= config.warmup_steps {
        // Shared decay: every policy routes through this one expression.
        return eta * (w / i).sqrt();
    }
    match &config.policy {
        WarmupPolicy::InverseSqrtLinear => eta * (i / w),
        WarmupPolicy::PiecewiseLinear {
            intermediate_lr,
            intermediate_steps,
        } => {
            let eta_mid = *intermediate_lr;
            let w_mid = *intermediate_steps as f64;
            let first = eta_mid * (i / w_mid);
            let second = eta_mid + (eta - eta_mid) * (i - w_mid) / (w - w_mid);
            first.max(second)
        }
        WarmupPolicy::Polynomial { alpha } => eta * (i / w).powf(*alpha),
        WarmupPolicy::Exponential { alpha } => {
            // exp_m1 keeps the ratio stable as alpha -> 0, where the
            // policy degenerates to the linear ramp.
            eta * (alpha * (i / w)).exp_m1() / alpha.exp_m1()
        }
    }
}

/// A sampled schedule: strictly increasing steps and their exact LRs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTable {
    pub config: ScheduleConfig,
    pub rows: Vec<(u64, f64)>,
}

/// Sample the schedule at steps 0, stride, 2*stride, ... <= max_step.
pub fn schedule_table(
    config: &ScheduleConfig,
    max_step: u64,
    stride: u64,
) -> Result<ScheduleTable, ScheduleError> {
    config.validate()?;
    if stride == 0 {
        return Err(ScheduleError::InvalidConfig {
            field: "stride",
            reason: "must be >= 1".to_string(),
        });
    }
    let rows = (0..=max_step)
        .step_by(stride as usize)
        .map(|s| (s, lr_at_valid(config, s)))
        .collect();
    Ok(ScheduleTable {
        config: config.clone(),
        rows,
    })
}

impl ScheduleTable {
    /// CSV with header `step,lr`; LRs printed with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr\n");
        for (step, lr) in &self.rows {
            out.push_str(&format!("{step},{}\n", format_lr(*lr)));
        }
        out
    }
}

/// 17 significant digits: enough to round-trip any f64 exactly.
pub fn format_lr(lr: f64) -> String {
    format!("{lr:.16e}")
}

/// Which schedule leads after a crossover step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossDirection {
    /// `a` was below (or tied with) `b` before this step and is above after.
    AOvertakesB,
    /// `b` was below (or tied with) `a` before this step and is above after.
    BOvertakesA,
}

/// A step at which the sign of `lr_a - lr_b` flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crossover {
    pub step: u64,
    pub direction: CrossDirection,
}

// Steps where the two LRs agree to machine precision carry no sign.
fn diff_sign(la: f64, lb: f64) -> i8 {
    let d = la - lb;
    let scale = la.abs().max(lb.abs());
    if d.abs() <= scale * 1e-15 {
        0
    } else if d > 0.0 {
        1
    } else {
        -1
    }
}

/// Every integer step in `[start, end]` where `sign(lr_a - lr_b)` flips
/// relative to the previous step, skipping steps where the two schedules
/// agree to machine precision.
///
/// The two configs must share `peak_lr` and `warmup_steps`; the comparison
/// is only meaningful on a shared horizon.
pub fn crossovers(
    a: &ScheduleConfig,
    b: &ScheduleConfig,
    start: u64,
    end: u64,
) -> Result<Vec<Crossover>, ScheduleError> {
    a.validate()?;
    b.validate()?;
    if a.peak_lr != b.peak_lr || a.warmup_steps != b.warmup_steps {
        return Err(ScheduleError::Comparison(format!(
            "peak_lr/warmup_steps must match: ({}, {}) vs ({}, {})",
            a.peak_lr, a.warmup_steps, b.peak_lr, b.warmup_steps
        )));
    }
    if start > end {
        return Err(ScheduleError::InvalidConfig {
            field: "range",
            reason: format!("start {start} exceeds end {end}"),
        });
    }

    let mut found = Vec::new();
    // Baseline sign comes from the step just before the scan window.
    let baseline_step = start.saturating_sub(1);
    let mut last_sign = diff_sign(lr_at_valid(a, baseline_step), lr_at_valid(b, baseline_step));
    let scan_from = if start == 0 { 1 } else { start };
    for s in scan_from..=end {
        let sign = diff_sign(lr_at_valid(a, s), lr_at_valid(b, s));
        if sign == 0 {
            continue;
        }
        if last_sign != 0 && sign != last_sign {
            found.push(Crossover {
                step: s,
                direction: if sign > 0 {
                    CrossDirection::AOvertakesB
                } else {
                    CrossDirection::BOvertakesA
                },
            });
        }
        last_sign = sign;
    }
    Ok(found)
}

/// Serialize a config to its JSON document form.
pub fn serialize(config: &ScheduleConfig) -> String {
    serde_json::to_string_pretty(config).expect("schedule config serialization cannot fail")
}

/// Parse and validate a JSON schedule config.
pub fn deserialize(text: &str) -> Result<ScheduleConfig, ScheduleError> {
    let config: ScheduleConfig =
        serde_json::from_str(text).map_err(|e| ScheduleError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}
