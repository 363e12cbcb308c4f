use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::ops::{apply_primitive, vjp, Primitive};
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum NodeKind {
    Leaf { name: Option<String> },
    Op { kind: Primitive, inputs: Vec<Var> },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    kind: NodeKind,
    requires_grad: bool,
}

/// Append-only record of one forward pass. Inputs always precede the nodes
/// that consume them, so append order is a topological order.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Its `requires_grad` flag decides whether it is a
    /// differentiation target.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, None)
    }

    /// Adds a non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value.with_grad(false), None)
    }

    /// Adds a named leaf; `trainable` sets `requires_grad`.
    pub fn param(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Var {
        self.push_leaf(value.with_grad(trainable), Some(name.to_string()))
    }

    fn push_leaf(&mut self, value: Tensor<T>, name: Option<String>) -> Var {
        let requires_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            kind: NodeKind::Leaf { name },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Names of all named leaves recorded so far.
    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().filter_map(|n| match &n.kind {
            NodeKind::Leaf { name: Some(name) } => Some(name.as_str()),
            _ => None,
        })
    }

    /// Smallest distance from any recorded ReLU input to the kink at zero, or
    /// `None` when the tape has no ReLU. Finite-difference checks need this
    /// to stay well above the probe step.
    pub fn kink_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                NodeKind::Op {
                    kind: Primitive::Relu,
                    inputs,
                } => Some(
                    self.nodes[inputs[0].0]
                        .value
                        .data()
                        .iter()
                        .fold(f64::INFINITY, |m, x| m.min(x.as_f64().abs())),
                ),
                _ => None,
            })
            .reduce(f64::min)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Evaluates `kind` on the given nodes and appends the result.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = apply_primitive(&kind, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: out.with_grad(requires_grad),
            kind: NodeKind::Op {
                kind,
                inputs: inputs.to_vec(),
            },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let value = &self.nodes[loss.0].value;
        if value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", value.shape()),
            ));
        }
        self.backward_seeded(loss, vec![T::one()])
    }

    /// Reverse sweep with an explicit output cotangent.
    pub fn backward_with_seed(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.shape(output)),
            ));
        }
        self.backward_seeded(output, seed.data().to_vec())
    }

    fn backward_seeded(&self, output: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed);
        }
        let mut leaves = HashMap::new();
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.kind {
                NodeKind::Leaf { .. } => {
                    let g = grads[idx].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                    leaves.insert(
                        Var(idx),
                        Tensor::new(node.value.shape().to_vec(), g).expect("gradient matches leaf shape"),
                    );
                }
                NodeKind::Op { kind, inputs } => {
                    let Some(g) = grads[idx].take() else { continue };
                    let in_values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                    let input_grads = vjp(kind, &in_values, &node.value, &g, &needs);
                    for (v, ig) in inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        match &mut grads[v.0] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        // Leaves appended after `output` cannot influence it.
        for idx in output.0 + 1..self.nodes.len() {
            let node = &self.nodes[idx];
            if node.requires_grad && matches!(node.kind, NodeKind::Leaf { .. }) {
                leaves.insert(Var(idx), Tensor::zeros(node.value.shape()));
            }
        }
        let names = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.kind {
                NodeKind::Leaf { name: Some(name) } if n.requires_grad => Some((name.clone(), Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves, names })
    }
}

/// Gradients of every differentiable leaf, keyed by node handle.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    leaves: HashMap<Var, Tensor<T>>,
    names: HashMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` for nodes that are not differentiable leaves.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|v| self.leaves.get(v))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    /// Named gradients, consuming the map.
    pub fn into_named(mut self) -> HashMap<String, Tensor<T>> {
        self.names
            .into_iter()
            .filter_map(|(name, v)| self.leaves.remove(&v).map(|g| (name, g)))
            .collect()
    }
}

/// Convenience wrappers so model code reads as expressions.
impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Gelu, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softplus, &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul { trans_b: false }, &[a, b])
    }
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul { trans_b: true }, &[a, b])
    }
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Primitive::Permute(perm.to_vec()), &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::SumAxis(axis), &[a])
    }
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::MeanAxis(axis), &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::LogSumExp, &[a])
    }
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.apply(Primitive::LayerNorm { eps }, &[a])
    }
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::L2Normalize, &[a])
    }
    pub fn conv3d(&mut self, x: Var, w: Var, stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
        self.apply(Primitive::Conv3d { stride, padding }, &[x, w])
    }
    pub fn index_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.apply(Primitive::IndexRows(idx.to_vec()), &[a])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, parts)
    }
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mse, &[a, b])
    }
}
