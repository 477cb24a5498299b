//! Eager reverse-mode tape.
//!
//! Every op computes its value immediately and records enough on the tape to
//! run the chain rule backwards later. Node ids are indices into the tape, so
//! a node can only depend on nodes recorded before it and a single reverse
//! sweep visits everything in a valid order.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::AutodiffError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    BiasAdd {
        lhs: NodeId,
        bias: NodeId,
    },
    Mul {
        lhs: NodeId,
        rhs: NodeId,
    },
    MatMul {
        lhs: NodeId,
        rhs: NodeId,
    },
    Relu {
        input: NodeId,
    },
    LayerNorm {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        /// Cached per-row (mean, 1/sigma) from the forward pass.
        row_stats: Vec<(f64, f64)>,
    },
    Sum {
        input: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        smoothing: f64,
        /// Cached per-row softmax probabilities from the forward pass.
        probs: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Adjoints for every node of a tape, produced by [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to the given node.
    pub fn wrt(&self, id: NodeId) -> &Tensor {
        &self.adjoints[id.0]
    }
}

/// Records a forward computation and replays it backwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed for a node during the forward pass.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Record an input tensor. Leaves are what gradients are asked for.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, AutodiffError> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.push(Op::Add { lhs, rhs }, value))
    }

    /// `x + f(x)` around a subcomponent. Mathematically a plain add; kept as
    /// its own entry point so call sites read like the block structure.
    pub fn residual_add(&mut self, x: NodeId, fx: NodeId) -> Result<NodeId, AutodiffError> {
        self.add(x, fx)
    }

    /// Row-broadcast add: `[n, d] + [d]`.
    pub fn bias_add(&mut self, lhs: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (a, b) = (self.value(lhs), self.value(bias));
        if !a.is_matrix() || !b.is_vector() || a.cols() != b.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "bias_add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (n, d) = (a.rows(), a.cols());
        let mut data = Vec::with_capacity(n * d);
        for r in 0..n {
            for c in 0..d {
                data.push(a.at2(r, c) + b.at(c));
            }
        }
        let value = Tensor::new(vec![n, d], data)?;
        Ok(self.push(Op::BiasAdd { lhs, bias }, value))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, AutodiffError> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul { lhs, rhs }, value))
    }

    /// Matrix product `[m, k] x [k, n]`.
    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, AutodiffError> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let ail = a.at2(i, l);
                for j in 0..n {
                    data[i * n + j] += ail * b.at2(l, j);
                }
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::MatMul { lhs, rhs }, value))
    }

    /// Elementwise `max(x, 0)`. The subgradient at exactly zero is zero.
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("relu preserves shape");
        self.push(Op::Relu { input }, value)
    }

    /// Normalize each row of `[n, d]` to zero mean and unit variance, then
    /// scale and shift: `gain * (x - mean) / sqrt(var + eps) + bias`.
    pub fn layer_norm(
        &mut self,
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let x = self.value(input);
        let g = self.value(gain);
        let b = self.value(bias);
        if !x.is_matrix() || !g.is_vector() || !b.is_vector() {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let (n, d) = (x.rows(), x.cols());
        if g.numel() != d || b.numel() != d {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(n * d);
        let mut row_stats = Vec::with_capacity(n);
        for r in 0..n {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_sigma = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row_stats.push((mean, inv_sigma));
            for (c, &v) in row.iter().enumerate() {
                let xhat = (v - mean) * inv_sigma;
                data.push(g.at(c) * xhat + b.at(c));
            }
        }
        let value = Tensor::new(vec![n, d], data)?;
        Ok(self.push(
            Op::LayerNorm {
                input,
                gain,
                bias,
                row_stats,
            },
            value,
        ))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total = self.value(input).data().iter().sum();
        self.push(Op::Sum { input }, Tensor::scalar(total))
    }

    /// Mean softmax cross-entropy over rows of `[n, classes]` logits, with
    /// optional label smoothing. Stabilized by max subtraction per row.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        smoothing: f64,
    ) -> Result<NodeId, AutodiffError> {
        let z = self.value(logits);
        if !z.is_matrix() {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: z.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (n, classes) = (z.rows(), z.cols());
        if labels.len() != n {
            return Err(AutodiffError::LabelMismatch {
                rows: n,
                labels: labels.len(),
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(AutodiffError::InvalidSmoothing { value: smoothing });
        }
        let mut probs = vec![0.0; n * classes];
        let mut total = 0.0;
        for r in 0..n {
            let label = labels[r];
            if label >= classes {
                return Err(AutodiffError::LabelOutOfRange { row: r, label, classes });
            }
            let row = &z.data()[r * classes..(r + 1) * classes];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut denom = 0.0;
            for &v in row {
                denom += (v - max).exp();
            }
            let log_denom = denom.ln();
            // Target distribution: (1 - eps) on the label plus eps/classes
            // everywhere. Loss per row is -sum_j q_j * log p_j.
            let uniform = smoothing / classes as f64;
            let mut row_loss = 0.0;
            for c in 0..classes {
                let logp = (row[c] - max) - log_denom;
                probs[r * classes + c] = logp.exp();
                let q = uniform + if c == label { 1.0 - smoothing } else { 0.0 };
                row_loss -= q * logp;
            }
            total += row_loss;
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                smoothing,
                probs,
            },
            value,
        ))
    }

    /// Run the chain rule from a scalar node back to every node on the tape.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, AutodiffError> {
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode { index: loss.0 });
        }
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::NotScalar {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut adjoints: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        adjoints[loss.0].data_mut()[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            // The adjoint of this node is complete once every later node has
            // been processed; split the slice so we can read it while
            // accumulating into earlier adjoints.
            let (earlier, rest) = adjoints.split_at_mut(idx);
            let (out, _) = rest.split_first_mut().expect("split leaves current node");
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Add { lhs, rhs } => {
                    accumulate(&mut earlier[lhs.0], out.data());
                    accumulate(&mut earlier[rhs.0], out.data());
                }
                Op::BiasAdd { lhs, bias } => {
                    accumulate(&mut earlier[lhs.0], out.data());
                    let d = node.value.cols();
                    let gb = earlier[bias.0].data_mut();
                    for (i, &g) in out.data().iter().enumerate() {
                        gb[i % d] += g;
                    }
                }
                Op::Mul { lhs, rhs } => {
                    let (a, b) = (self.value(*lhs).data(), self.value(*rhs).data());
                    {
                        let ga = earlier[lhs.0].data_mut();
                        for i in 0..ga.len() {
                            ga[i] += out.data()[i] * b[i];
                        }
                    }
                    let gb = earlier[rhs.0].data_mut();
                    for i in 0..gb.len() {
                        gb[i] += out.data()[i] * a[i];
                    }
                }
                Op::MatMul { lhs, rhs } => {
                    let a = self.value(*lhs);
                    let b = self.value(*rhs);
                    let (m, k, n) = (a.rows(), a.cols(), b.cols());
                    {
                        // dA[i, l] += sum_j dC[i, j] * B[l, j]
                        let ga = earlier[lhs.0].data_mut();
                        for i in 0..m {
                            for l in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += out.data()[i * n + j] * b.at2(l, j);
                                }
                                ga[i * k + l] += acc;
                            }
                        }
                    }
                    // dB[l, j] += sum_i A[i, l] * dC[i, j]
                    let gb = earlier[rhs.0].data_mut();
                    for l in 0..k {
                        for i in 0..m {
                            let ail = a.at2(i, l);
                            for j in 0..n {
                                gb[l * n + j] += ail * out.data()[i * n + j];
                            }
                        }
                    }
                }
                Op::Relu { input } => {
                    let x = self.value(*input).data();
                    let gx = earlier[input.0].data_mut();
                    for i in 0..gx.len() {
                        if x[i] > 0.0 {
                            gx[i] += out.data()[i];
                        }
                    }
                }
                Op::LayerNorm {
                    input,
                    gain,
                    bias,
                    row_stats,
                } => {
                    let x = self.value(*input);
                    let g = self.value(*gain);
                    let (n, d) = (x.rows(), x.cols());
                    for r in 0..n {
                        let (mean, inv_sigma) = row_stats[r];
                        let xrow = &x.data()[r * d..(r + 1) * d];
                        let grow = &out.data()[r * d..(r + 1) * d];
                        // h = dL/dy * gain, expressed against xhat.
                        let mut mean_h = 0.0;
                        let mut mean_hxhat = 0.0;
                        for c in 0..d {
                            let xhat = (xrow[c] - mean) * inv_sigma;
                            let h = grow[c] * g.at(c);
                            mean_h += h;
                            mean_hxhat += h * xhat;
                        }
                        mean_h /= d as f64;
                        mean_hxhat /= d as f64;
                        {
                            let gx = earlier[input.0].data_mut();
                            for c in 0..d {
                                let xhat = (xrow[c] - mean) * inv_sigma;
                                let h = grow[c] * g.at(c);
                                gx[r * d + c] += (h - mean_h - xhat * mean_hxhat) * inv_sigma;
                            }
                        }
                        {
                            let gg = earlier[gain.0].data_mut();
                            for c in 0..d {
                                let xhat = (xrow[c] - mean) * inv_sigma;
                                gg[c] += grow[c] * xhat;
                            }
                        }
                        let gb = earlier[bias.0].data_mut();
                        for c in 0..d {
                            gb[c] += grow[c];
                        }
                    }
                }
                Op::Sum { input } => {
                    let g = out.data()[0];
                    for v in earlier[input.0].data_mut() {
                        *v += g;
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    smoothing,
                    probs,
                } => {
                    let z = self.value(*logits);
                    let (n, classes) = (z.rows(), z.cols());
                    let g = out.data()[0] / n as f64;
                    let uniform = smoothing / classes as f64;
                    let gz = earlier[logits.0].data_mut();
                    for r in 0..n {
                        for c in 0..classes {
                            let q = uniform
                                + if c == labels[r] { 1.0 - smoothing } else { 0.0 };
                            gz[r * classes + c] += g * (probs[r * classes + c] - q);
                        }
                    }
                }
            }
        }
        Ok(Gradients { adjoints })
    }
}

fn accumulate(target: &mut Tensor, source: &[f64]) {
    let t = target.data_mut();
    for i in 0..t.len() {
        t[i] += source[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn add_matches_elementwise_sum() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(vec![2, 2], vec![10.0, 20.0, 30.0, 40.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 22.0, 33.0, 44.0]);
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2, 2], vec![0.0; 4]));
        let b = tape.leaf(t(vec![2, 3], vec![0.0; 6]));
        match tape.add(a, b) {
            Err(AutodiffError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 2]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_matches_hand_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(t(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2, 3], vec![0.0; 6]));
        let b = tape.leaf(t(vec![2, 2], vec![0.0; 4]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(AutodiffError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2, 2], vec![1.0, -2.0, 3.0, -4.0]));
        let s = tape.sum(a);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(a).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2], vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(a),
            Err(AutodiffError::NotScalar { .. })
        ));
    }

    #[test]
    fn mul_backward_swaps_operands() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![3], vec![2.0, 3.0, 4.0]));
        let b = tape.leaf(t(vec![3], vec![5.0, 6.0, 7.0]));
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(a).data(), &[5.0, 6.0, 7.0]);
        assert_eq!(grads.wrt(b).data(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_backward_matches_hand_derivation() {
        // s = sum(A x B) gives dA = ones x B^T and dB = A^T x ones.
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(a).data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.wrt(b).data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn relu_zeroes_negatives_and_their_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![4], vec![-1.0, 0.0, 0.5, 2.0]));
        let r = tape.relu(a);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 0.5, 2.0]);
        let s = tape.sum(r);
        let grads = tape.backward(s).unwrap();
        // Subgradient at exactly zero is zero.
        assert_eq!(grads.wrt(a).data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn bias_add_broadcasts_rows_and_sums_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2, 3], vec![0.0; 6]));
        let b = tape.leaf(t(vec![3], vec![1.0, 2.0, 3.0]));
        let y = tape.bias_add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(b).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.wrt(a).data(), &[1.0; 6]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2, 4], vec![3.0; 8]));
        let gain = tape.leaf(t(vec![4], vec![1.0; 4]));
        let bias = tape.leaf(t(vec![4], vec![0.0; 4]));
        let y = tape.layer_norm(x, gain, bias).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_output_has_zero_mean_unit_variance() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1, 4], vec![1.0, 2.0, 3.0, 10.0]));
        let gain = tape.leaf(t(vec![4], vec![1.0; 4]));
        let bias = tape.leaf(t(vec![4], vec![0.0; 4]));
        let y = tape.layer_norm(x, gain, bias).unwrap();
        let row = tape.value(y).data();
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        // Variance of the output is var / (var + eps), just shy of one.
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_ce_uniform_logits_gives_ln_classes() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(vec![2, 4], vec![0.0; 8]));
        let loss = tape.softmax_cross_entropy(z, &[0, 3], 0.0).unwrap();
        let got = tape.value(loss).at(0);
        assert!((got - 4.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softmax_ce_is_shift_invariant() {
        let mut tape = Tape::new();
        let z1 = tape.leaf(t(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let z2 = tape.leaf(t(vec![1, 3], vec![1001.0, 1002.0, 1003.0]));
        let l1 = tape.softmax_cross_entropy(z1, &[2], 0.0).unwrap();
        let l2 = tape.softmax_cross_entropy(z2, &[2], 0.0).unwrap();
        let (a, b) = (tape.value(l1).at(0), tape.value(l2).at(0));
        assert!((a - b).abs() <= 1e-12 * a.abs());
        assert!(a.is_finite());
    }

    #[test]
    fn softmax_ce_gradient_is_probs_minus_target() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(vec![1, 3], vec![0.0, 0.0, 0.0]));
        let loss = tape.softmax_cross_entropy(z, &[1], 0.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(z).data();
        let third = 1.0 / 3.0;
        assert!((g[0] - third).abs() < 1e-15);
        assert!((g[1] - (third - 1.0)).abs() < 1e-15);
        assert!((g[2] - third).abs() < 1e-15);
    }

    #[test]
    fn softmax_ce_gradient_rows_sum_to_zero() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(vec![2, 3], vec![0.3, -1.2, 2.0, 0.1, 0.2, -0.5]));
        let loss = tape.softmax_cross_entropy(z, &[0, 2], 0.1).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(z).data();
        for r in 0..2 {
            let s: f64 = g[r * 3..(r + 1) * 3].iter().sum();
            assert!(s.abs() < 1e-15, "row {r} gradient sums to {s}");
        }
    }

    #[test]
    fn softmax_ce_rejects_bad_labels_and_smoothing() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(vec![2, 3], vec![0.0; 6]));
        assert!(matches!(
            tape.softmax_cross_entropy(z, &[0], 0.0),
            Err(AutodiffError::LabelMismatch { .. })
        ));
        assert!(matches!(
            tape.softmax_cross_entropy(z, &[0, 3], 0.0),
            Err(AutodiffError::LabelOutOfRange { row: 1, label: 3, classes: 3 })
        ));
        assert!(matches!(
            tape.softmax_cross_entropy(z, &[0, 1], 1.0),
            Err(AutodiffError::InvalidSmoothing { .. })
        ));
    }

    #[test]
    fn fan_out_accumulates_both_paths() {
        // y = sum(x * x) has gradient 2x; the same node feeds mul twice.
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![3], vec![1.0, -2.0, 3.0]));
        let p = tape.mul(x, x).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn residual_add_passes_gradient_to_both_branches() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1, 2], vec![1.0, 2.0]));
        let w = tape.leaf(t(vec![2, 2], vec![0.5, 0.0, 0.0, 0.5]));
        let fx = tape.matmul(x, w).unwrap();
        let y = tape.residual_add(x, fx).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        // dy/dx = I + W^T applied to ones: 1 + 0.5 on each coordinate.
        assert_eq!(grads.wrt(x).data(), &[1.5, 1.5]);
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.leaf(t(vec![2, 3], vec![0.3, -1.2, 2.0, 0.1, 0.2, -0.5]));
            let w = tape.leaf(t(vec![3, 3], vec![0.1, 0.2, -0.3, 0.4, -0.5, 0.6, 0.7, 0.8, -0.9]));
            let h = tape.matmul(x, w).unwrap();
            let r = tape.relu(h);
            let loss = tape.softmax_cross_entropy(r, &[0, 2], 0.05).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).at(0),
                grads.wrt(x).data().to_vec(),
                grads.wrt(w).data().to_vec(),
            )
        };
        let a = build();
        let b = build();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn values_survive_backward_for_replay() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1, 2], vec![1.0, 2.0]));
        let w = tape.leaf(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        let before = tape.value(y).clone();
        let _ = tape.backward(s).unwrap();
        let _ = tape.backward(s).unwrap();
        assert_eq!(tape.value(y), &before);
        assert_eq!(tape.len(), 4);
    }
}
