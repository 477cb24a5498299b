//! Adam with bias correction, weight decay, and global-norm clipping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

/// Clipping leaves gradients alone when the global norm is within this
/// relative slack of the threshold. Rescaling at the exact boundary would
/// otherwise produce a norm a few ulps above `max_norm` and make
/// clip-after-clip differ bit-for-bit from a single clip.
const CLIP_BOUNDARY_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid optimizer config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("{what}: expected {expected} tensors, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("parameter {index}: shape {param:?} but gradient shape {grad:?}")]
    ShapeMismatch {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },

    #[error("gradient norm is non-finite ({norm})")]
    NonFiniteNorm { norm: f64 },

    #[error("learning rate must be finite and non-negative, got {value}")]
    InvalidLr { value: f64 },
}

/// Where weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// Decay applied directly to the parameters, outside the moment
    /// estimates (the AdamW form). This is the recipe's default.
    Decoupled,
    /// Classic L2: decay added to the gradient before the moments, so it is
    /// rescaled by the adaptive denominator like any other gradient term.
    CoupledL2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
            weight_decay: 0.001,
            weight_decay_mode: WeightDecayMode::Decoupled,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !beta_ok(self.beta1) {
            return Err(OptimError::InvalidConfig {
                field: "beta1",
                reason: format!("must be in [0, 1), got {}", self.beta1),
            });
        }
        if !beta_ok(self.beta2) {
            return Err(OptimError::InvalidConfig {
                field: "beta2",
                reason: format!("must be in [0, 1), got {}", self.beta2),
            });
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(OptimError::InvalidConfig {
                field: "epsilon",
                reason: format!("must be positive and finite, got {}", self.epsilon),
            });
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(OptimError::InvalidConfig {
                field: "weight_decay",
                reason: format!("must be non-negative and finite, got {}", self.weight_decay),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipConfig {
    pub max_norm: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { max_norm: 10.0 }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.max_norm > 0.0 && self.max_norm.is_finite()) {
            return Err(OptimError::InvalidConfig {
                field: "max_norm",
                reason: format!("must be positive and finite, got {}", self.max_norm),
            });
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
///
/// Serializable so checkpoints can resume mid-run with identical state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Fresh state (t = 0, zero moments) shaped like the given parameters.
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self { t: 0, m, v }
    }
}

/// Euclidean norm over the concatenation of all gradient entries.
///
/// Any non-finite entry (or an overflowing sum of squares) reports as
/// `+infinity`, which callers treat as a divergence signal rather than an
/// error at this layer.
pub fn global_grad_norm(grads: &[Tensor]) -> f64 {
    let mut sum_sq = 0.0;
    for g in grads {
        for &x in g.data() {
            if !x.is_finite() {
                return f64::INFINITY;
            }
            sum_sq += x * x;
        }
    }
    sum_sq.sqrt()
}

/// Result of [`clip_global_norm`]: the norm before and after scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipOutcome {
    pub pre_norm: f64,
    pub post_norm: f64,
    pub clipped: bool,
}

/// Scale all gradients by `max_norm / pre_norm` when the global norm exceeds
/// the threshold; otherwise leave them untouched. Direction is preserved —
/// every entry is multiplied by the same factor.
pub fn clip_global_norm(
    grads: &mut [Tensor],
    config: &ClipConfig,
) -> Result<ClipOutcome, OptimError> {
    config.validate()?;
    let pre_norm = global_grad_norm(grads);
    if !pre_norm.is_finite() {
        return Err(OptimError::NonFiniteNorm { norm: pre_norm });
    }
    if pre_norm <= config.max_norm * (1.0 + CLIP_BOUNDARY_SLACK) {
        return Ok(ClipOutcome {
            pre_norm,
            post_norm: pre_norm,
            clipped: false,
        });
    }
    let scale = config.max_norm / pre_norm;
    for g in grads.iter_mut() {
        for x in g.data_mut() {
            *x *= scale;
        }
    }
    let post_norm = global_grad_norm(grads);
    Ok(ClipOutcome {
        pre_norm,
        post_norm,
        clipped: true,
    })
}

/// One Adam update, in place.
///
/// With constant gradient `g` the bias-corrected moments satisfy `m_hat = g`
/// and `v_hat = g^2` at every step, so the update direction stays
/// `-lr * g / (|g| + eps)` — effectively `-lr * sign(g)` once `|g| >> eps`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &AdamConfig,
    lr: f64,
) -> Result<(), OptimError> {
    config.validate()?;
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(OptimError::InvalidLr { value: lr });
    }
    if grads.len() != params.len() {
        return Err(OptimError::LengthMismatch {
            what: "gradients",
            expected: params.len(),
            got: grads.len(),
        });
    }
    if state.m.len() != params.len() {
        return Err(OptimError::LengthMismatch {
            what: "optimizer state",
            expected: params.len(),
            got: state.m.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(OptimError::ShapeMismatch {
                index: i,
                param: p.shape().to_vec(),
                grad: g.shape().to_vec(),
            });
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let wd = config.weight_decay;

    for i in 0..params.len() {
        let p = params[i].data_mut();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let g_eff = match config.weight_decay_mode {
                WeightDecayMode::Decoupled => g[j],
                WeightDecayMode::CoupledL2 => g[j] + wd * p[j],
            };
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g_eff;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g_eff * g_eff;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let mut step = m_hat / (v_hat.sqrt() + config.epsilon);
            if let WeightDecayMode::Decoupled = config.weight_decay_mode {
                step += wd * p[j];
            }
            p[j] -= lr * step;
        }
    }
    Ok(())
}
