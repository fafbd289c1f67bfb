//! Dense tensors and a reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation executed on it. Parameters enter the
//! tape as borrowed leaves, so many tapes can read the same weights at once
//! (one tape per keypoint), and [`Tape::backward`] replays the record in
//! reverse to produce [`Gradients`] for every leaf.

mod checkpoint;
mod conv;
mod ops;

use std::borrow::Cow;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, save_checkpoint, load_checkpoint, write_checkpoint};
pub use conv::{conv_output_size, conv_transpose_output_size};
pub use ops::CustomBackward;

/// Row-major dense array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Zero-mean Gaussian with `std = sqrt(2 / fan_in)`.
    pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, x) in buf.iter_mut().zip(g) {
            *b += x;
        }
        Ok(())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    requires_grad: bool,
    op: ops::Op<'a>,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so every node's inputs have
/// smaller indices than the node itself and a reverse sweep visits each node
/// after all of its consumers.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a borrowed tensor as a leaf. Gradients are tracked when the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, tensor: &'a Tensor) -> Var {
        self.push_node(
            tensor.shape.clone(),
            Cow::Borrowed(&tensor.data),
            tensor.requires_grad,
            ops::Op::Leaf,
        )
    }

    /// Records an owned tensor as a leaf.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push_node(tensor.shape, Cow::Owned(tensor.data), requires_grad, ops::Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn tensor(&self, var: Var) -> Tensor {
        let node = &self.nodes[var.0];
        Tensor {
            shape: node.shape.clone(),
            data: node.value.to_vec(),
            requires_grad: node.requires_grad,
            grad: None,
        }
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_node(
        &mut self,
        shape: Vec<usize>,
        value: Cow<'a, [f64]>,
        requires_grad: bool,
        op: ops::Op<'a>,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, value: Vec<f64>, op: ops::Op<'a>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(shape, Cow::Owned(value), requires_grad, op)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.shape.clone()));
        }
        self.backward_with_seed(loss, &[1.0])
    }

    /// Reverse sweep from an arbitrary output with upstream gradient `seed`.
    pub fn backward_with_seed(&self, output: Var, seed: &[f64]) -> Result<Gradients> {
        let node = &self.nodes[output.0];
        if seed.len() != node.value.len() {
            return Err(Error::shape(format!(
                "seed of length {} for output of shape {:?}",
                seed.len(),
                node.shape
            )));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        let mut leaves: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if node.requires_grad {
            pending[output.0] = Some(seed.to_vec());
        }
        for id in (0..=output.0).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if let ops::Op::Leaf = node.op {
                leaves[id] = Some(grad);
                continue;
            }
            let inputs = node.op.inputs();
            let wanted: Vec<bool> = inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = node.op.backward(self, &node.value, &grad, &wanted);
            for ((input, g), want) in inputs.iter().zip(input_grads).zip(wanted) {
                let Some(g) = g else { continue };
                if !want {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[input.0].value.len());
                match &mut pending[input.0] {
                    Some(acc) => {
                        for (a, x) in acc.iter_mut().zip(&g) {
                            *a += x;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Leaf gradients produced by a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the leaf is unreachable from the output or does not
    /// require gradients.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, zero-filled when it received none.
    pub fn wrt(&self, tape: &Tape<'_>, var: Var) -> Vec<f64> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(var).len()],
        }
    }
}

#[cfg(test)]
mod tests;
