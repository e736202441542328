//! Dynamic reverse-mode differentiation tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Nodes are appended in
//! execution order, so the node list is always a valid topological order and
//! `backward` is a single reverse sweep.

use crate::params::{ParamId, ParamSet};
use crate::tensor::{Primitive, Result, Tensor, TensorError};

/// Handle to a node of a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    op: Option<(Primitive, Vec<Var>)>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Tape variables for every parameter of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

/// Result of [`Tape::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of every trainable bound parameter into `params`.
    pub fn accumulate_into(&self, params: &mut ParamSet, bindings: &Bindings) {
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            if let Some(g) = self.wrt(bindings.vars[i]) {
                p.tensor.accumulate_grad(g);
            }
        }
    }
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

    fn push(&mut self, value: Tensor, op: Option<(Primitive, Vec<Var>)>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None, true)
    }

    /// Records every parameter as a leaf; non-trainable ones as constants.
    pub fn bind(&mut self, params: &ParamSet) -> Bindings {
        let vars = params
            .iter()
            .map(|(_, p)| {
                let mut value = p.tensor.clone();
                value.set_grad(None);
                self.push(value, None, p.trainable)
            })
            .collect();
        Bindings { vars }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn apply(&mut self, primitive: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(TensorError::ForeignVar(bad.0));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = primitive.forward(&values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = requires_grad.then(|| (primitive, inputs.to_vec()));
        Ok(self.push(out, op, requires_grad))
    }

    /// Reverse sweep from a scalar `loss`. Fan-out gradients are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::ForeignVar(loss.0));
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some((primitive, inputs)) = &node.op else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = primitive.backward(&values, &node.value, &upstream);
            for (input, g) in inputs.iter().zip(input_grads) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // keep the gradient of interior nodes available for inspection
            grads[id] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::BatchMatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(Primitive::Scale(factor), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, end }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        self.apply(Primitive::ClampMin(lo), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Softmax { axis }, &[a])
    }

    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::L2Norm { axis }, &[a])
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Sum { axis }, &[a])
    }

    pub fn squash(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Squash { axis }, &[a])
    }

    /// Sums every entry down to a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.sum(flat, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq, 0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_summed_matmul() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(&[vec![1.0, 1.0]]).unwrap());
        let w = tape.leaf(Tensor::filled(&[2, 2], 1.0));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
        assert!(grads.wrt(x).is_none());
    }

    #[test]
    fn fan_out_gradients_add() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -1.2]));
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.exp(x).unwrap();
        let both = tape.add(a, b).unwrap();
        let loss = tape.sum(both, 0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(x).unwrap();
        assert!((g[0] - (2.0 + 0.3f64.exp())).abs() < 1e-15);
        assert!((g[1] - (2.0 + (-1.2f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_and_empty_errors() {
        let tape = Tape::new();
        assert_eq!(tape.backward(Var(0)).err(), Some(TensorError::EmptyTape));
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(tape.backward(x).err(), Some(TensorError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn bound_parameters_receive_grads() {
        let mut params = ParamSet::new();
        let w = params.insert("w", Tensor::vector(vec![1.5, -2.0]), true).unwrap();
        params.insert("frozen", Tensor::vector(vec![1.0, 1.0]), false).unwrap();
        let mut tape = Tape::new();
        let b = tape.bind(&params);
        let frozen = b.var(params.id("frozen").unwrap());
        let prod = tape.mul(b.var(w), frozen).unwrap();
        let loss = tape.sum(prod, 0).unwrap();
        let grads = tape.backward(loss).unwrap();
        grads.accumulate_into(&mut params, &b);
        assert_eq!(params.get(w).tensor.grad().unwrap(), &[1.0, 1.0]);
        assert!(params.by_name("frozen").unwrap().tensor.grad().is_none());
    }
}
