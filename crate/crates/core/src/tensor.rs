//! Dense row-major `f64` tensors and the primitive operations the tape records.
//!
//! Every primitive has a forward rule (`Primitive::forward`) and a backward
//! rule (`Primitive::backward`). No broadcasting is performed: operands of the
//! elementwise primitives must have identical shapes, and scalar scaling is
//! the only implicit alignment.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("{op}: expected {expected} operand(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("slice {start}..{end} out of range for extent {extent}")]
    Slice {
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("shape {shape:?} needs {expected} values, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape is empty")]
    EmptyTape,
    #[error("variable {0} was not recorded on this tape")]
    ForeignVar(usize),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish_non_exhaustive()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }

    /// Adds `g` into the stored gradient, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn set_grad(&mut self, g: Option<Vec<f64>>) {
        if let Some(g) = &g {
            assert_eq!(g.len(), self.data.len(), "gradient length");
        }
        self.grad = g;
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Name-only view of a primitive, used when primitives are selected by string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    MatMul,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Concat,
    Slice,
    Reshape,
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    L2Norm,
    Sum,
    Exp,
    Log,
    ClampMin,
    Squash,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 19] = [
        Self::MatMul,
        Self::BatchMatMul,
        Self::Add,
        Self::Sub,
        Self::Mul,
        Self::Scale,
        Self::Concat,
        Self::Slice,
        Self::Reshape,
        Self::Sigmoid,
        Self::Tanh,
        Self::Relu,
        Self::Softmax,
        Self::L2Norm,
        Self::Sum,
        Self::Exp,
        Self::Log,
        Self::ClampMin,
        Self::Squash,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::MatMul => "matmul",
            Self::BatchMatMul => "bmm",
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Scale => "scale",
            Self::Concat => "concat",
            Self::Slice => "slice",
            Self::Reshape => "reshape",
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
            Self::Relu => "relu",
            Self::Softmax => "softmax",
            Self::L2Norm => "l2-norm",
            Self::Sum => "sum",
            Self::Exp => "exp",
            Self::Log => "log",
            Self::ClampMin => "clamp-min",
            Self::Squash => "squash",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        let normalized = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == normalized)
            .ok_or_else(|| TensorError::UnknownPrimitive(s.to_string()))
    }
}

/// A primitive together with its static arguments.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    /// `[b, m, k] x [b, k, n] -> [b, m, n]`
    BatchMatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Reshape(Vec<usize>),
    Sigmoid,
    Tanh,
    Relu,
    Softmax { axis: usize },
    /// Euclidean norm along `axis`; the axis is removed.
    L2Norm { axis: usize },
    /// Sum along `axis`; the axis is removed.
    Sum { axis: usize },
    Exp,
    Log,
    ClampMin(f64),
    /// Capsule squash applied to every vector laid out along `axis`.
    Squash { axis: usize },
}

/// `(outer, extent, inner)` strides for iterating along one axis.
fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    out.remove(axis);
    out
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c += a * b` for row-major `a: m x k`, `b: k x n`.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, b)| *c += aip * b);
        }
    }
}

/// `c += a * b^T` for `a: m x n`, `b: k x n`, `c: m x k`.
fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c += a^T * b` for `a: m x k`, `b: m x n`, `c: k x n`.
fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, b)| *c += aip * b);
        }
    }
}

/// Squash factor `‖x‖ / (1 + ‖x‖²)`, so that `squash(x) = factor · x`.
fn squash_factor(norm: f64) -> f64 {
    norm / (1.0 + norm * norm)
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Self::MatMul => PrimitiveKind::MatMul,
            Self::BatchMatMul => PrimitiveKind::BatchMatMul,
            Self::Add => PrimitiveKind::Add,
            Self::Sub => PrimitiveKind::Sub,
            Self::Mul => PrimitiveKind::Mul,
            Self::Scale(_) => PrimitiveKind::Scale,
            Self::Concat { .. } => PrimitiveKind::Concat,
            Self::Slice { .. } => PrimitiveKind::Slice,
            Self::Reshape(_) => PrimitiveKind::Reshape,
            Self::Sigmoid => PrimitiveKind::Sigmoid,
            Self::Tanh => PrimitiveKind::Tanh,
            Self::Relu => PrimitiveKind::Relu,
            Self::Softmax { .. } => PrimitiveKind::Softmax,
            Self::L2Norm { .. } => PrimitiveKind::L2Norm,
            Self::Sum { .. } => PrimitiveKind::Sum,
            Self::Exp => PrimitiveKind::Exp,
            Self::Log => PrimitiveKind::Log,
            Self::ClampMin(_) => PrimitiveKind::ClampMin,
            Self::Squash { .. } => PrimitiveKind::Squash,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().name()
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Self::Concat { .. } => None,
            Self::MatMul | Self::BatchMatMul | Self::Add | Self::Sub | Self::Mul => Some(2),
            _ => Some(1),
        }
    }

    fn check_arity(&self, got: usize) -> Result<()> {
        match self.arity() {
            Some(expected) if expected != got => Err(TensorError::Arity {
                op: self.name(),
                expected,
                got,
            }),
            None if got == 0 => Err(TensorError::Arity {
                op: self.name(),
                expected: 1,
                got,
            }),
            _ => Ok(()),
        }
    }

    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.check_arity(inputs.len())?;
        let op = self.name();
        let x = inputs[0];
        let unary = |f: &dyn Fn(f64) -> f64| Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        };
        let out = match self {
            Self::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
                    return Err(TensorError::ShapeMismatch {
                        op,
                        left: a.shape.clone(),
                        right: b.shape.clone(),
                    });
                }
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                let mut data = vec![0.0; m * n];
                gemm_acc(&a.data, &b.data, &mut data, m, k, n);
                Tensor {
                    shape: vec![m, n],
                    data,
                    grad: None,
                }
            }
            Self::BatchMatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.rank() != 3
                    || b.rank() != 3
                    || a.shape[0] != b.shape[0]
                    || a.shape[2] != b.shape[1]
                {
                    return Err(TensorError::ShapeMismatch {
                        op,
                        left: a.shape.clone(),
                        right: b.shape.clone(),
                    });
                }
                let (bs, m, k, n) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
                let mut data = vec![0.0; bs * m * n];
                for i in 0..bs {
                    gemm_acc(
                        &a.data[i * m * k..(i + 1) * m * k],
                        &b.data[i * k * n..(i + 1) * k * n],
                        &mut data[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                Tensor {
                    shape: vec![bs, m, n],
                    data,
                    grad: None,
                }
            }
            Self::Add | Self::Sub | Self::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                same_shape(op, a, b)?;
                let f: fn(f64, f64) -> f64 = match self {
                    Self::Add => |x, y| x + y,
                    Self::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                Tensor {
                    shape: a.shape.clone(),
                    data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
                    grad: None,
                }
            }
            Self::Scale(s) => unary(&|v| v * s),
            Self::Concat { axis } => {
                let axis = *axis;
                axis_split(op, &x.shape, axis)?;
                let mut extent = 0;
                for t in inputs {
                    let mismatch = t.rank() != x.rank()
                        || t
                            .shape
                            .iter()
                            .zip(&x.shape)
                            .enumerate()
                            .any(|(d, (a, b))| d != axis && a != b);
                    if mismatch {
                        return Err(TensorError::ShapeMismatch {
                            op,
                            left: x.shape.clone(),
                            right: t.shape.clone(),
                        });
                    }
                    extent += t.shape[axis];
                }
                let mut shape = x.shape.clone();
                shape[axis] = extent;
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut data = Vec::with_capacity(outer * extent * inner);
                for o in 0..outer {
                    for t in inputs {
                        let block = t.shape[axis] * inner;
                        data.extend_from_slice(&t.data[o * block..(o + 1) * block]);
                    }
                }
                Tensor {
                    shape,
                    data,
                    grad: None,
                }
            }
            Self::Slice { axis, start, end } => {
                let (outer, n, inner) = axis_split(op, &x.shape, *axis)?;
                if start >= end || *end > n {
                    return Err(TensorError::Slice {
                        start: *start,
                        end: *end,
                        extent: n,
                    });
                }
                let mut shape = x.shape.clone();
                shape[*axis] = end - start;
                let mut data = Vec::with_capacity(outer * (end - start) * inner);
                for o in 0..outer {
                    let base = o * n * inner;
                    data.extend_from_slice(&x.data[base + start * inner..base + end * inner]);
                }
                Tensor {
                    shape,
                    data,
                    grad: None,
                }
            }
            Self::Reshape(shape) => {
                let n: usize = shape.iter().product();
                if n != x.numel() || shape.contains(&0) {
                    return Err(TensorError::ShapeMismatch {
                        op,
                        left: x.shape.clone(),
                        right: shape.clone(),
                    });
                }
                Tensor {
                    shape: shape.clone(),
                    data: x.data.clone(),
                    grad: None,
                }
            }
            Self::Sigmoid => unary(&sigmoid),
            Self::Tanh => unary(&f64::tanh),
            Self::Relu => unary(&|v| v.max(0.0)),
            Self::Exp => unary(&f64::exp),
            Self::Log => unary(&f64::ln),
            Self::ClampMin(lo) => unary(&|v| v.max(*lo)),
            Self::Softmax { axis } => {
                let (outer, n, inner) = axis_split(op, &x.shape, *axis)?;
                let mut data = vec![0.0; x.numel()];
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + r;
                        let max = (0..n).map(|i| x.data[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for i in 0..n {
                            let e = (x.data[idx(i)] - max).exp();
                            data[idx(i)] = e;
                            total += e;
                        }
                        for i in 0..n {
                            data[idx(i)] /= total;
                        }
                    }
                }
                Tensor {
                    shape: x.shape.clone(),
                    data,
                    grad: None,
                }
            }
            Self::L2Norm { axis } | Self::Sum { axis } => {
                let (outer, n, inner) = axis_split(op, &x.shape, *axis)?;
                let squared = matches!(self, Self::L2Norm { .. });
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for i in 0..n {
                        let src = &x.data[(o * n + i) * inner..(o * n + i + 1) * inner];
                        let dst = &mut data[o * inner..(o + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += if squared { v * v } else { v };
                        }
                    }
                }
                if squared {
                    data.iter_mut().for_each(|v| *v = v.sqrt());
                }
                Tensor {
                    shape: removed_axis(&x.shape, *axis),
                    data,
                    grad: None,
                }
            }
            Self::Squash { axis } => {
                let (outer, n, inner) = axis_split(op, &x.shape, *axis)?;
                let mut data = vec![0.0; x.numel()];
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + r;
                        let norm = (0..n).map(|i| x.data[idx(i)].powi(2)).sum::<f64>().sqrt();
                        let f = squash_factor(norm);
                        for i in 0..n {
                            data[idx(i)] = f * x.data[idx(i)];
                        }
                    }
                }
                Tensor {
                    shape: x.shape.clone(),
                    data,
                    grad: None,
                }
            }
        };
        Ok(out)
    }

    /// Gradients with respect to each input, given the upstream gradient of
    /// the output. `inputs` and `output` are the values seen in `forward`.
    pub fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &[f64]) -> Vec<Vec<f64>> {
        let x = inputs[0];
        let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..x.numel()).map(|i| upstream[i] * f(i)).collect()
        };
        match self {
            Self::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                gemm_nt_acc(upstream, &b.data, &mut ga, m, n, k);
                gemm_tn_acc(&a.data, upstream, &mut gb, m, k, n);
                vec![ga, gb]
            }
            Self::BatchMatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (bs, m, k, n) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
                let mut ga = vec![0.0; bs * m * k];
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let g = &upstream[i * m * n..(i + 1) * m * n];
                    gemm_nt_acc(g, &b.data[i * k * n..(i + 1) * k * n], &mut ga[i * m * k..(i + 1) * m * k], m, n, k);
                    gemm_tn_acc(&a.data[i * m * k..(i + 1) * m * k], g, &mut gb[i * k * n..(i + 1) * k * n], m, k, n);
                }
                vec![ga, gb]
            }
            Self::Add => vec![upstream.to_vec(), upstream.to_vec()],
            Self::Sub => vec![upstream.to_vec(), upstream.iter().map(|g| -g).collect()],
            Self::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                vec![
                    upstream.iter().zip(&b.data).map(|(g, v)| g * v).collect(),
                    upstream.iter().zip(&a.data).map(|(g, v)| g * v).collect(),
                ]
            }
            Self::Scale(s) => vec![upstream.iter().map(|g| g * s).collect()],
            Self::Concat { axis } => {
                let axis = *axis;
                let outer: usize = output.shape[..axis].iter().product();
                let inner: usize = output.shape[axis + 1..].iter().product();
                let row = output.shape[axis] * inner;
                let mut grads: Vec<Vec<f64>> = inputs.iter().map(|t| Vec::with_capacity(t.numel())).collect();
                for o in 0..outer {
                    let mut offset = o * row;
                    for (t, g) in inputs.iter().zip(grads.iter_mut()) {
                        let block = t.shape[axis] * inner;
                        g.extend_from_slice(&upstream[offset..offset + block]);
                        offset += block;
                    }
                }
                grads
            }
            Self::Slice { axis, start, end } => {
                let n = x.shape[*axis];
                let inner: usize = x.shape[axis + 1..].iter().product();
                let outer: usize = x.shape[..*axis].iter().product();
                let width = (end - start) * inner;
                let mut g = vec![0.0; x.numel()];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    g[base..base + width].copy_from_slice(&upstream[o * width..(o + 1) * width]);
                }
                vec![g]
            }
            Self::Reshape(_) => vec![upstream.to_vec()],
            Self::Sigmoid => vec![elementwise(&|i| {
                let y = output.data[i];
                y * (1.0 - y)
            })],
            Self::Tanh => vec![elementwise(&|i| 1.0 - output.data[i].powi(2))],
            Self::Relu => vec![elementwise(&|i| if x.data[i] > 0.0 { 1.0 } else { 0.0 })],
            Self::Exp => vec![elementwise(&|i| output.data[i])],
            Self::Log => vec![elementwise(&|i| 1.0 / x.data[i])],
            Self::ClampMin(lo) => vec![elementwise(&|i| if x.data[i] > *lo { 1.0 } else { 0.0 })],
            Self::Softmax { axis } => {
                let (outer, n, inner) = axis_split("softmax", &x.shape, *axis).expect("checked in forward");
                let mut g = vec![0.0; x.numel()];
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + r;
                        let dot: f64 = (0..n).map(|i| upstream[idx(i)] * output.data[idx(i)]).sum();
                        for i in 0..n {
                            g[idx(i)] = output.data[idx(i)] * (upstream[idx(i)] - dot);
                        }
                    }
                }
                vec![g]
            }
            Self::L2Norm { axis } | Self::Sum { axis } => {
                let (outer, n, inner) = axis_split("reduce", &x.shape, *axis).expect("checked in forward");
                let norm = matches!(self, Self::L2Norm { .. });
                let mut g = vec![0.0; x.numel()];
                for o in 0..outer {
                    for i in 0..n {
                        for r in 0..inner {
                            let src = (o * n + i) * inner + r;
                            let red = o * inner + r;
                            g[src] = if norm {
                                let y = output.data[red];
                                if y > 0.0 {
                                    upstream[red] * x.data[src] / y
                                } else {
                                    0.0
                                }
                            } else {
                                upstream[red]
                            };
                        }
                    }
                }
                vec![g]
            }
            Self::Squash { axis } => {
                // d/dx [f(n) x] = f(n) I + (f'(n)/n) x x^T, f(n) = n/(1+n^2)
                let (outer, n, inner) = axis_split("squash", &x.shape, *axis).expect("checked in forward");
                let mut g = vec![0.0; x.numel()];
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + r;
                        let sq: f64 = (0..n).map(|i| x.data[idx(i)].powi(2)).sum();
                        let norm = sq.sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let f = squash_factor(norm);
                        let df_over_n = (1.0 - sq) / ((1.0 + sq) * (1.0 + sq)) / norm;
                        let xg: f64 = (0..n).map(|i| x.data[idx(i)] * upstream[idx(i)]).sum();
                        for i in 0..n {
                            g[idx(i)] = f * upstream[idx(i)] + df_over_n * xg * x.data[idx(i)];
                        }
                    }
                }
                vec![g]
            }
        }
    }
}

/// Applies a primitive outside any tape.
pub fn apply_primitive(primitive: &Primitive, operands: &[&Tensor]) -> Result<Tensor> {
    primitive.forward(operands)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let a = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let out = apply_primitive(&Primitive::MatMul, &[&eye, &a]).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn sigmoid_at_origin() {
        let out = apply_primitive(&Primitive::Sigmoid, &[&Tensor::scalar(0.0)]).unwrap();
        assert_eq!(out.item(), Some(0.5));
    }

    #[test]
    fn softmax_symmetric() {
        let out = apply_primitive(&Primitive::Softmax { axis: 0 }, &[&Tensor::vector(vec![1.0; 3])]).unwrap();
        for v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = apply_primitive(&Primitive::MatMul, &[&a, &b]).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"));
    }

    #[test]
    fn unknown_primitive() {
        assert_eq!("conv3d".parse::<PrimitiveKind>(), Err(TensorError::UnknownPrimitive("conv3d".into())));
        assert_eq!("l2_norm".parse::<PrimitiveKind>(), Ok(PrimitiveKind::L2Norm));
        for kind in PrimitiveKind::ALL {
            assert_eq!(kind.name().parse::<PrimitiveKind>(), Ok(kind));
        }
    }

    #[test]
    fn concat_and_slice_along_inner_axis() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = apply_primitive(&Primitive::Concat { axis: 1 }, &[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = apply_primitive(&Primitive::Slice { axis: 1, start: 1, end: 3 }, &[&c]).unwrap();
        assert_eq!(s, b);
        let bad = apply_primitive(&Primitive::Slice { axis: 1, start: 2, end: 4 }, &[&c]);
        assert!(matches!(bad, Err(TensorError::Slice { .. })));
    }

    #[test]
    fn reductions_drop_the_axis() {
        let x = t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]);
        let n = apply_primitive(&Primitive::L2Norm { axis: 1 }, &[&x]).unwrap();
        assert_eq!(n.shape(), &[2]);
        assert_eq!(n.data(), &[5.0, 0.0]);
        let s = apply_primitive(&Primitive::Sum { axis: 0 }, &[&x]).unwrap();
        assert_eq!(s.data(), &[3.0, 4.0]);
    }

    #[test]
    fn squash_zero_is_zero() {
        let x = Tensor::zeros(&[1, 4]);
        let out = apply_primitive(&Primitive::Squash { axis: 1 }, &[&x]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let g = Primitive::Squash { axis: 1 }.backward(&[&x], &out, &[1.0; 4]);
        assert!(g[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn new_rejects_bad_lengths() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0]),
            Err(TensorError::DataLength { expected: 4, got: 1, .. })
        ));
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn forward_is_bitwise_pure() {
        let a = t(&[2, 3], &[0.1, -0.7, 1.3, 2.0, -1.9, 0.4]);
        let b = t(&[3, 2], &[1.1, 0.2, -0.3, 0.9, 0.05, -1.2]);
        let first = apply_primitive(&Primitive::MatMul, &[&a, &b]).unwrap();
        let second = apply_primitive(&Primitive::MatMul, &[&a, &b]).unwrap();
        assert_eq!(
            first.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            second.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
