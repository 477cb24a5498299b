//! A toy residual stack for studying depth-driven gradient explosion.
//!
//! The network is `input projection -> L blocks -> linear head`, where each
//! block applies K subcomponents and every subcomponent is wrapped in a
//! residual connection: `x <- x + sub(x)`. A subcomponent is
//! `linear(relu(x))`, optionally with a pre-norm layer norm inside the
//! residual branch (`linear(relu(layer_norm(x)))`). Stacking many
//! unnormalized subcomponents lengthens the un-normalized signal path, which
//! is exactly the structure that makes deep stacks blow up.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("batch must be [n, {expected}], got shape {got:?}")]
    BatchShape { expected: usize, got: Vec<usize> },

    #[error("expected {expected} parameter tensors, got {got}")]
    ParamCount { expected: usize, got: usize },

    #[error("parameter {index}: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        index: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackConfig {
    /// Number of blocks (L).
    pub depth: usize,
    /// Residual subcomponents per block (K).
    pub subcomponents_per_block: usize,
    /// Hidden width (d).
    pub width: usize,
    /// Put a layer norm at the start of every residual branch.
    pub normalize_subcomponents: bool,
    /// Weights are drawn uniform in [-init_scale/sqrt(d), +init_scale/sqrt(d)].
    pub init_scale: f64,
    pub seed: u64,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            subcomponents_per_block: 3,
            width: 32,
            normalize_subcomponents: false,
            init_scale: 1.0,
            seed: 0,
            num_classes: 10,
            input_dim: 16,
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("depth", self.depth),
            ("subcomponents_per_block", self.subcomponents_per_block),
            ("width", self.width),
            ("num_classes", self.num_classes),
            ("input_dim", self.input_dim),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(ModelError::InvalidConfig {
                    field,
                    reason: "must be at least 1".to_string(),
                });
            }
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(ModelError::InvalidConfig {
                field: "init_scale",
                reason: format!("must be positive and finite, got {}", self.init_scale),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subcomponent {
    pub norm: Option<NormParams>,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub subs: Vec<Subcomponent>,
}

/// The toy network with all of its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: StackConfig,
    pub input_proj: Tensor,
    pub blocks: Vec<Block>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// Node handles from one recorded forward pass.
pub struct ForwardPass {
    pub logits: NodeId,
    /// Output of the last block, before the head.
    pub final_activation: NodeId,
    /// Parameter nodes in the same order as [`ToyModel::param_refs`].
    pub param_nodes: Vec<NodeId>,
    /// True when any block output or the logits contained a non-finite
    /// value. Reported, not fatal: divergence is an object of study.
    pub overflow: bool,
}

/// Deterministically initialize a model from its config.
///
/// Only weight matrices consume randomness, drawn in a fixed order (input
/// projection, then each block's subcomponent weights, then the head), so
/// equal seeds give bit-identical models.
pub fn build(config: &StackConfig) -> Result<ToyModel, ModelError> {
    config.validate()?;
    let d = config.width;
    let bound = config.init_scale / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draw = |rows: usize, cols: usize| {
        Tensor::from_fn_2d(rows, cols, |_, _| rng.random_range(-bound..=bound))
    };

    let input_proj = draw(config.input_dim, d);
    let mut blocks = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        let mut subs = Vec::with_capacity(config.subcomponents_per_block);
        for _ in 0..config.subcomponents_per_block {
            let weight = draw(d, d);
            let norm = config.normalize_subcomponents.then(|| NormParams {
                gain: Tensor::new(vec![d], vec![1.0; d]).expect("gain shape"),
                bias: Tensor::zeros(vec![d]),
            });
            subs.push(Subcomponent {
                norm,
                weight,
                bias: Tensor::zeros(vec![d]),
            });
        }
        blocks.push(Block { subs });
    }
    let head_weight = draw(d, config.num_classes);
    let head_bias = Tensor::zeros(vec![config.num_classes]);

    Ok(ToyModel {
        config: config.clone(),
        input_proj,
        blocks,
        head_weight,
        head_bias,
    })
}

impl ToyModel {
    /// Parameters in canonical order: input projection; per block and
    /// subcomponent (norm gain, norm bias if present, then weight, bias);
    /// head weight; head bias.
    pub fn param_refs(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = vec![&self.input_proj];
        for block in &self.blocks {
            for sub in &block.subs {
                if let Some(norm) = &sub.norm {
                    out.push(&norm.gain);
                    out.push(&norm.bias);
                }
                out.push(&sub.weight);
                out.push(&sub.bias);
            }
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn param_refs_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.input_proj];
        for block in &mut self.blocks {
            for sub in &mut block.subs {
                if let Some(norm) = &mut sub.norm {
                    out.push(&mut norm.gain);
                    out.push(&mut norm.bias);
                }
                out.push(&mut sub.weight);
                out.push(&mut sub.bias);
            }
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    /// Clones of all parameters, canonical order.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.param_refs().into_iter().cloned().collect()
    }

    /// Replace all parameters, shape-checked against the current layout.
    pub fn load_params(&mut self, params: &[Tensor]) -> Result<(), ModelError> {
        let mut refs = self.param_refs_mut();
        if params.len() != refs.len() {
            return Err(ModelError::ParamCount {
                expected: refs.len(),
                got: params.len(),
            });
        }
        for (index, (slot, incoming)) in refs.iter().zip(params).enumerate() {
            if slot.shape() != incoming.shape() {
                return Err(ModelError::ParamShape {
                    index,
                    expected: slot.shape().to_vec(),
                    got: incoming.shape().to_vec(),
                });
            }
        }
        for (slot, incoming) in refs.iter_mut().zip(params) {
            **slot = incoming.clone();
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.param_refs().iter().map(|t| t.numel()).sum()
    }

    /// Record a forward pass on the tape: projection, residual blocks, head.
    pub fn forward(&self, tape: &mut Tape, batch: &Tensor) -> Result<ForwardPass, ModelError> {
        if !batch.is_matrix() || batch.cols() != self.config.input_dim {
            return Err(ModelError::BatchShape {
                expected: self.config.input_dim,
                got: batch.shape().to_vec(),
            });
        }
        let mut param_nodes = Vec::new();
        let input_node = tape.leaf(batch.clone());
        let proj_node = tape.leaf(self.input_proj.clone());
        param_nodes.push(proj_node);

        let mut x = tape.matmul(input_node, proj_node)?;
        let mut overflow = false;
        for block in &self.blocks {
            for sub in &block.subs {
                let mut branch = x;
                if let Some(norm) = &sub.norm {
                    let gain = tape.leaf(norm.gain.clone());
                    let bias = tape.leaf(norm.bias.clone());
                    param_nodes.push(gain);
                    param_nodes.push(bias);
                    branch = tape.layer_norm(branch, gain, bias)?;
                }
                branch = tape.relu(branch);
                let weight = tape.leaf(sub.weight.clone());
                let bias = tape.leaf(sub.bias.clone());
                param_nodes.push(weight);
                param_nodes.push(bias);
                branch = tape.matmul(branch, weight)?;
                branch = tape.bias_add(branch, bias)?;
                x = tape.residual_add(x, branch)?;
            }
            overflow |= !tape.value(x).all_finite();
        }
        let final_activation = x;

        let head_w = tape.leaf(self.head_weight.clone());
        let head_b = tape.leaf(self.head_bias.clone());
        param_nodes.push(head_w);
        param_nodes.push(head_b);
        let scored = tape.matmul(final_activation, head_w)?;
        let logits = tape.bias_add(scored, head_b)?;
        overflow |= !tape.value(logits).all_finite();

        Ok(ForwardPass {
            logits,
            final_activation,
            param_nodes,
            overflow,
        })
    }
}

/// One averaged measurement from [`depth_gain_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub depth: usize,
    /// Mean Frobenius norm of the final block output.
    pub act_norm: f64,
    /// Mean Frobenius norm of the input-projection gradient.
    pub grad_norm: f64,
}

/// Measure how activation and gradient magnitudes scale with stack depth.
///
/// For each depth, `trials` models are built from distinct derived seeds and
/// run forward + backward on one fixed synthetic batch; the two norms are
/// averaged over trials. Deterministic given the base config.
pub fn depth_gain_probe(
    base: &StackConfig,
    depths: &[usize],
    trials: usize,
) -> Result<Vec<ProbeRow>, ModelError> {
    base.validate()?;
    if depths.is_empty() {
        return Err(ModelError::InvalidConfig {
            field: "depths",
            reason: "must be nonempty".to_string(),
        });
    }
    if depths.contains(&0) {
        return Err(ModelError::InvalidConfig {
            field: "depths",
            reason: "every depth must be at least 1".to_string(),
        });
    }
    if trials == 0 {
        return Err(ModelError::InvalidConfig {
            field: "trials",
            reason: "must be at least 1".to_string(),
        });
    }

    // One batch shared by every trial so depth is the only variable.
    const PROBE_BATCH_ROWS: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base.seed, u64::MAX, 0));
    let batch = Tensor::from_fn_2d(PROBE_BATCH_ROWS, base.input_dim, |_, _| {
        rng.sample(rand_distr::StandardNormal)
    });
    let labels: Vec<usize> = (0..PROBE_BATCH_ROWS).map(|i| i % base.num_classes).collect();

    let mut rows = Vec::with_capacity(depths.len());
    for &depth in depths {
        let mut act_total = 0.0;
        let mut grad_total = 0.0;
        for trial in 0..trials {
            let config = StackConfig {
                depth,
                seed: derive_seed(base.seed, depth as u64, trial as u64),
                ..base.clone()
            };
            let model = build(&config)?;
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &batch)?;
            let loss = tape.softmax_cross_entropy(pass.logits, &labels, 0.0)?;
            let grads = tape.backward(loss)?;
            act_total += tape.value(pass.final_activation).norm();
            grad_total += grads.wrt(pass.param_nodes[0]).norm();
        }
        rows.push(ProbeRow {
            depth,
            act_norm: act_total / trials as f64,
            grad_norm: grad_total / trials as f64,
        });
    }
    Ok(rows)
}

/// Render probe rows as CSV (`depth,act_norm,grad_norm`), reals at 17
/// significant digits.
pub fn probe_to_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from("depth,act_norm,grad_norm\n");
    for row in rows {
        out.push_str(&format!(
            "{},{:.16e},{:.16e}\n",
            row.depth, row.act_norm, row.grad_norm
        ));
    }
    out
}

/// Splitmix64-based seed derivation so related runs (probe trials, sweep
/// variants) get decorrelated streams without threading RNG state around.
pub(crate) fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
