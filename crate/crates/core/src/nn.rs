//! The dense recommender head: an MLP over pooled embeddings and dense
//! features, plus the two supported losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    /// Piecewise linear; second-order terms vanish almost everywhere.
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Bce,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `in x out`
    pub weight: Tensor,
    /// `1 x out`
    pub bias: Tensor,
    pub activation: Activation,
}

/// Dense parameters `theta`, replicated on every worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub layers: Vec<Layer>,
}

/// Graph handles for one [`DenseParams`] instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNodes {
    pub layers: Vec<(NodeId, NodeId, Activation)>,
}

impl DenseNodes {
    /// Weight and bias ids in layer order.
    pub fn ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }

    pub fn with_ids(&self, ids: &[NodeId]) -> DenseNodes {
        DenseNodes {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(k, &(_, _, act))| (ids[2 * k], ids[2 * k + 1], act))
                .collect(),
        }
    }
}

impl DenseParams {
    /// Glorot-uniform weights and zero biases. `dims` lists layer widths
    /// starting with the input width; hidden layers use `hidden`, the last
    /// layer is linear (it produces logits).
    pub fn init(dims: &[usize], hidden: Activation, seed: u64) -> Result<Self, TensorError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "DenseParams::init",
                lhs: dims.to_vec(),
                rhs: vec![],
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (k, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            let activation = if k + 2 == dims.len() {
                Activation::Linear
            } else {
                hidden
            };
            layers.push(Layer {
                weight: Tensor::new(fan_in, fan_out, w)?,
                bias: Tensor::zeros(1, fan_out),
                activation,
            });
        }
        Ok(Self { layers })
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        for pair in self.layers.windows(2) {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(TensorError::ShapeMismatch {
                    op: "DenseParams",
                    lhs: pair[0].weight.shape().to_vec(),
                    rhs: pair[1].weight.shape().to_vec(),
                });
            }
        }
        for l in &self.layers {
            if l.bias.shape() != [1, l.weight.cols()] {
                return Err(TensorError::ShapeMismatch {
                    op: "DenseParams bias",
                    lhs: l.weight.shape().to_vec(),
                    rhs: l.bias.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters as `[w0, b0, w1, b1, ...]`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites parameters from a flat vector laid out as [`Self::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), TensorError> {
        if flat.len() != self.num_params() {
            return Err(TensorError::BadLength {
                shape: vec![self.num_params()],
                len: flat.len(),
            });
        }
        let mut at = 0;
        for l in &mut self.layers {
            for t in [&mut l.weight, &mut l.bias] {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[at..at + n]);
                at += n;
            }
        }
        Ok(())
    }

    pub fn to_graph(&self, graph: &mut Graph) -> DenseNodes {
        DenseNodes {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let w = graph.leaf(l.weight.clone());
                    let b = graph.leaf(l.bias.clone());
                    (w, b, l.activation)
                })
                .collect(),
        }
    }

    /// Straight evaluation without a tape.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, TensorError> {
        let mut h = input.clone();
        for l in &self.layers {
            let z = h.matmul(&l.weight)?;
            let z = z.zip(&l.bias.broadcast_rows(z.rows())?, "bias", |a, b| a + b)?;
            h = match l.activation {
                Activation::Tanh => z.map(f64::tanh),
                Activation::Relu => z.map(|x| x.max(0.0)),
                Activation::Linear => z,
            };
        }
        Ok(h)
    }
}

/// Records the MLP on `graph` and returns the output node (`batch x out`).
pub fn forward_mlp(
    graph: &mut Graph,
    params: &DenseNodes,
    input: NodeId,
) -> Result<NodeId, TensorError> {
    if let Some(&(w, _, _)) = params.layers.first() {
        let (x, w0) = (graph.value(input), graph.value(w));
        if x.cols() != w0.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "forward_mlp input",
                lhs: x.shape().to_vec(),
                rhs: w0.shape().to_vec(),
            });
        }
    }
    let mut h = input;
    for &(w, b, act) in &params.layers {
        let z = graph.matmul(h, w)?;
        let z = graph.add_row(z, b)?;
        h = match act {
            Activation::Tanh => graph.tanh(z)?,
            Activation::Relu => graph.relu(z)?,
            Activation::Linear => z,
        };
    }
    Ok(h)
}

/// Mean binary cross-entropy on logits: `mean(softplus(x) - y * x)`.
pub fn bce_loss(graph: &mut Graph, logits: NodeId, labels: &Tensor) -> Result<NodeId, TensorError> {
    graph.value(logits).same_shape(labels, "bce_loss")?;
    if let Some((index, &value)) = labels
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| v != 0.0 && v != 1.0)
    {
        return Err(TensorError::BadLabel { index, value });
    }
    let n = labels.len() as f64;
    let y = graph.constant(labels.clone());
    let sp = graph.softplus(logits)?;
    let yx = graph.mul(y, logits)?;
    let per = graph.sub(sp, yx)?;
    let total = graph.sum(per)?;
    graph.scale(total, 1.0 / n)
}

pub fn mse_loss(graph: &mut Graph, pred: NodeId, targets: &Tensor) -> Result<NodeId, TensorError> {
    graph.value(pred).same_shape(targets, "mse_loss")?;
    let n = targets.len() as f64;
    let y = graph.constant(targets.clone());
    let d = graph.sub(pred, y)?;
    let sq = graph.mul(d, d)?;
    let total = graph.sum(sq)?;
    graph.scale(total, 1.0 / n)
}

pub fn loss(
    kind: LossKind,
    graph: &mut Graph,
    pred: NodeId,
    labels: &Tensor,
) -> Result<NodeId, TensorError> {
    match kind {
        LossKind::Bce => bce_loss(graph, pred, labels),
        LossKind::Mse => mse_loss(graph, pred, labels),
    }
}
