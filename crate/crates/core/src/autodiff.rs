//! Append-only reverse-mode tape with higher-order gradients.
//!
//! Every operation is evaluated eagerly and its output cached on the node.
//! Backward rules are themselves expressed as tape operations, so the
//! gradient nodes returned by [`Graph::grad`] with `create_graph = true` can
//! be differentiated again. This is what full (second-order) MAML needs: the
//! query loss is a function of `theta - alpha * grad(L_sup)(theta)`.

use std::collections::HashMap;

use crate::tensor::{sigmoid, softplus, Tensor, TensorError};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    /// Differentiable input (parameter).
    Leaf,
    /// Input with no gradient.
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    BroadcastRows(NodeId, usize),
    SumRows(NodeId),
    ExpandScalar(NodeId, usize, usize),
    Sum(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
}

impl Op {
    fn inputs(&self) -> [Option<NodeId>; 2] {
        use Op::*;
        match *self {
            Leaf | Constant => [None, None],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => [Some(a), Some(b)],
            Transpose(a)
            | Scale(a, _)
            | AddScalar(a, _)
            | BroadcastRows(a, _)
            | SumRows(a)
            | ExpandScalar(a, _, _)
            | Sum(a)
            | Tanh(a)
            | Sigmoid(a)
            | Relu(a)
            | Softplus(a) => [Some(a), None],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
}

/// One tape per training iteration; confined to a single worker.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        debug_assert!(op.inputs().iter().flatten().all(|&i| i < self.nodes.len()));
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    fn check(&self, id: NodeId) -> Result<&Tensor, TensorError> {
        self.nodes
            .get(id)
            .map(|n| &n.value)
            .ok_or(TensorError::UnknownNode(id))
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.check(a)?.matmul(self.check(b)?)?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.check(a)?.transpose();
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.check(a)?.zip(self.check(b)?, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.check(a)?.zip(self.check(b)?, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.check(a)?.zip(self.check(b)?, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let v = self.check(a)?.map(|x| x * c);
        Ok(self.push(Op::Scale(a, c), v))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let v = self.check(a)?.map(|x| x + c);
        Ok(self.push(Op::AddScalar(a, c), v))
    }

    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId, TensorError> {
        let v = self.check(a)?.broadcast_rows(rows)?;
        Ok(self.push(Op::BroadcastRows(a, rows), v))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.check(a)?.sum_rows();
        Ok(self.push(Op::SumRows(a), v))
    }

    pub fn expand_scalar(
        &mut self,
        a: NodeId,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId, TensorError> {
        let s = self.check(a)?.item()?;
        Ok(self.push(
            Op::ExpandScalar(a, rows, cols),
            Tensor::filled(rows, cols, s),
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = Tensor::scalar(self.check(a)?.sum());
        Ok(self.push(Op::Sum(a), v))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.check(a)?.map(f64::tanh);
        Ok(self.push(Op::Tanh(a), v))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.check(a)?.map(sigmoid);
        Ok(self.push(Op::Sigmoid(a), v))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.check(a)?.map(|x| x.max(0.0));
        Ok(self.push(Op::Relu(a), v))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.check(a)?.map(softplus);
        Ok(self.push(Op::Softplus(a), v))
    }

    /// `a + b` where `b` is a `1 x cols` row added to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let rows = self.check(a)?.rows();
        let b = self.broadcast_rows(row, rows)?;
        self.add(a, b)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned nodes stay connected to the forward
    /// computation and can be differentiated again. Without it they are
    /// fresh constants. Ids in `wrt` that do not influence `output` get a
    /// zero constant.
    pub fn grad(
        &mut self,
        output: NodeId,
        wrt: &[NodeId],
        create_graph: bool,
    ) -> Result<HashMap<NodeId, NodeId>, TensorError> {
        let out = self.check(output)?;
        if out.shape() != [1, 1] {
            return Err(TensorError::NotScalar {
                op: "grad",
                shape: out.shape().to_vec(),
            });
        }
        for &w in wrt {
            self.check(w)?;
        }

        // Nodes on a path from some wrt node to the output.
        let mut depends = vec![false; output + 1];
        for &w in wrt {
            if w <= output {
                depends[w] = true;
            }
        }
        for id in 0..=output {
            if depends[id] {
                continue;
            }
            depends[id] = self.nodes[id]
                .op
                .inputs()
                .iter()
                .flatten()
                .any(|&i| depends[i]);
        }

        let mut adjoint: HashMap<NodeId, NodeId> = HashMap::new();
        let seed = self.constant(Tensor::scalar(1.0));
        adjoint.insert(output, seed);

        for id in (0..=output).rev() {
            if !depends[id] {
                continue;
            }
            let Some(&g) = adjoint.get(&id) else {
                continue;
            };
            let op = self.nodes[id].op;
            for (input, contrib) in self.backward(id, op, g, &depends)? {
                let acc = match adjoint.get(&input) {
                    Some(&prev) => self.add(prev, contrib)?,
                    None => contrib,
                };
                adjoint.insert(input, acc);
            }
        }

        let mut result = HashMap::with_capacity(wrt.len());
        for &w in wrt {
            let node = match adjoint.get(&w) {
                Some(&g) if create_graph => g,
                Some(&g) => {
                    let v = self.nodes[g].value.clone();
                    self.constant(v)
                }
                None => {
                    let v = &self.nodes[w].value;
                    let z = Tensor::zeros(v.rows(), v.cols());
                    self.constant(z)
                }
            };
            result.insert(w, node);
        }
        Ok(result)
    }

    /// Vector-Jacobian contributions of node `id` to its inputs.
    fn backward(
        &mut self,
        id: NodeId,
        op: Op,
        g: NodeId,
        depends: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>, TensorError> {
        let needs = |n: NodeId| depends[n];
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    let bt = self.transpose(b)?;
                    out.push((a, self.matmul(g, bt)?));
                }
                if needs(b) {
                    let at = self.transpose(a)?;
                    out.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => out.push((a, self.transpose(g)?)),
            Op::Add(a, b) => {
                if needs(a) {
                    out.push((a, g));
                }
                if needs(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    out.push((a, g));
                }
                if needs(b) {
                    out.push((b, self.scale(g, -1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    out.push((a, self.mul(g, b)?));
                }
                if needs(b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(a, c) => out.push((a, self.scale(g, c)?)),
            Op::AddScalar(a, _) => out.push((a, g)),
            Op::BroadcastRows(a, _) => out.push((a, self.sum_rows(g)?)),
            Op::SumRows(a) => {
                let rows = self.nodes[a].value.rows();
                out.push((a, self.broadcast_rows(g, rows)?));
            }
            Op::ExpandScalar(a, _, _) => out.push((a, self.sum(g)?)),
            Op::Sum(a) => {
                let (r, c) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                out.push((a, self.expand_scalar(g, r, c)?));
            }
            Op::Tanh(a) => {
                // g * (1 - y^2), y being this node's own output
                let yy = self.mul(id, id)?;
                let neg = self.scale(yy, -1.0)?;
                let d = self.add_scalar(neg, 1.0)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::Sigmoid(a) => {
                let neg = self.scale(id, -1.0)?;
                let one_minus = self.add_scalar(neg, 1.0)?;
                let d = self.mul(id, one_minus)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::Relu(a) => {
                // zero curvature: the step mask is a constant
                let mask = self.nodes[a].value.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                out.push((a, self.mul(g, m)?));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a)?;
                out.push((a, self.mul(g, s)?));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.leaf(s(3.0));
        let y = g.mul(x, x).unwrap();
        let d = g.grad(y, &[x], false).unwrap();
        assert_eq!(g.value(d[&x]).item().unwrap(), 6.0);
    }

    #[test]
    fn cube_second_derivative() {
        let mut g = Graph::new();
        let x = g.leaf(s(2.0));
        let x2 = g.mul(x, x).unwrap();
        let y = g.mul(x2, x).unwrap();
        let d1 = g.grad(y, &[x], true).unwrap()[&x];
        assert_eq!(g.value(d1).item().unwrap(), 12.0);
        let d2 = g.grad(d1, &[x], false).unwrap()[&x];
        assert_eq!(g.value(d2).item().unwrap(), 12.0);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 1));
        assert!(matches!(
            g.grad(x, &[x], false),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn unrelated_wrt_gets_zero() {
        let mut g = Graph::new();
        let x = g.leaf(s(1.5));
        let z = g.leaf(Tensor::zeros(2, 3));
        let y = g.tanh(x).unwrap();
        let d = g.grad(y, &[z], false).unwrap();
        assert_eq!(g.value(d[&z]), &Tensor::zeros(2, 3));
    }

    #[test]
    fn gradient_pass_is_append_only() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(1, 2, vec![0.3, -0.7]).unwrap());
        let t = g.tanh(x).unwrap();
        let y = g.sum(t).unwrap();
        let before: Vec<Tensor> = (0..g.len()).map(|i| g.value(i).clone()).collect();
        let d = g.grad(y, &[x], true).unwrap()[&x];
        let dd = g.sum(d).unwrap();
        g.grad(dd, &[x], true).unwrap();
        for (i, v) in before.iter().enumerate() {
            assert_eq!(g.value(i), v);
        }
        for (i, n) in g.nodes.iter().enumerate() {
            assert!(n.op.inputs().iter().flatten().all(|&p| p < i));
        }
    }

    #[test]
    fn relu_has_zero_curvature() {
        let mut g = Graph::new();
        let x = g.leaf(s(0.5));
        let r = g.relu(x).unwrap();
        let y = g.mul(r, x).unwrap();
        let d1 = g.grad(y, &[x], true).unwrap()[&x];
        assert_eq!(g.value(d1).item().unwrap(), 1.0);
    }
}
