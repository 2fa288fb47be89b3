//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`] holding its value and the
//! handles of its inputs. Inputs always precede their consumers, so a single
//! reverse sweep over the node list visits each node exactly once in a valid
//! order. Values are stored as matrices; a `h x w x c` tensor lives on the
//! tape as its `(h*w) x c` reshape.

use std::rc::Rc;

use crate::multiscale::SpatialMap;
use crate::tensor::{Matrix, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: maps (output grad, input values,
/// output value) to one gradient per input.
pub type CustomBackward = Rc<dyn Fn(&Matrix, &[&Matrix], &Matrix) -> Vec<Matrix>>;

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Exp(Var),
    Relu(Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    Reshape(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, sigma: Vec<f64>, denom: Vec<f64> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Spatial { x: Var, map: Rc<SpatialMap> },
    Sum(Var),
    SumSquares(Var),
    Custom { name: &'static str, inputs: Vec<Var>, backward: CustomBackward },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::Exp(..) => "exp",
            Op::Relu(..) => "relu",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBias(..) => "add_bias",
            Op::Reshape(..) => "reshape",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Spatial { .. } => "spatial_map",
            Op::Sum(..) => "sum",
            Op::SumSquares(..) => "sum_squares",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of leaves produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` if it was not a trainable leaf. A trainable
    /// leaf the loss does not reach gets an all-zero gradient.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }

    /// Copy the gradient of `var` into `tensor.grad`.
    pub fn fill_tensor(&self, var: Var, tensor: &mut Tensor) {
        tensor.grad = self.get(var).map(|g| g.data().to_vec());
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

    /// Drop every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = &self.nodes[v.0].value;
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Matrix) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Record a tensor as a leaf, honouring its `requires_grad` flag.
    pub fn tensor(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t.reshape_to_matrix(), t.requires_grad)
    }

    /// Read a node back as an `h x w x c` tensor.
    pub fn to_tensor(&self, v: Var, h: usize, w: usize) -> Result<Tensor> {
        Tensor::reshape_to_tensor(self.value(v).clone(), h, w)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "hadamard", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Hadamard(a, b), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    /// Rectifier; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Adds a scalar to every entry. The only broadcasting op.
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// Adds the `1 x cols` row `bias` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: x.shape(),
                right: b.shape(),
            });
        }
        let mut value = x.clone();
        let cols = value.cols();
        for row in value.data_mut().chunks_exact_mut(cols) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let rg = self.rg(&[a, bias]);
        self.push(value, Op::AddBias(a, bias), rg)
    }

    /// Reinterpret the row-major data with a new `rows x cols` shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() * x.cols() != rows * cols {
            return Err(TensorError::Invalid {
                op: "reshape",
                msg: format!("{:?} cannot become {rows}x{cols}", x.shape()),
            });
        }
        let value = Matrix::new(rows, cols, x.data().to_vec())?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Row-wise `D^{-1} exp(x)` with `D` the row sums. Each row is shifted by
    /// its maximum before exponentiating; the shift cancels in the ratio.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = x.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * cols..(i + 1) * cols];
            let mut sum = 0.0;
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let value = Matrix::new(rows, cols, out)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Per-row `(x - mean) / (std + eps)` with the population standard
    /// deviation and no affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        if cols == 0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: "zero-width rows".into(),
            });
        }
        let mut out = vec![0.0; rows * cols];
        let mut sigma = Vec::with_capacity(rows);
        let mut denom = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = var.sqrt();
            let d = s + eps;
            for (o, v) in out[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                // A constant row has a zero numerator; keep it zero even when eps = 0.
                *o = if s == 0.0 { 0.0 } else { (v - mean) / d };
            }
            sigma.push(s);
            denom.push(d);
        }
        let value = Matrix::new(rows, cols, out)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::LayerNormRows { x: a, sigma, denom }, rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.rows() {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {}", start + len, x.rows()),
            });
        }
        let cols = x.cols();
        let value = Matrix::new(len, cols, x.data()[start * cols..(start + len) * cols].to_vec())?;
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceRows { x: a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of {}", start + len, x.cols()),
            });
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for i in 0..x.rows() {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let value = Matrix::new(x.rows(), len, data)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols { x: a, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                msg: "no inputs".into(),
            });
        };
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            if m.cols() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(*first).shape(),
                    right: m.shape(),
                });
            }
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let value = Matrix::new(rows, cols, data)?;
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Apply a fixed linear map over the spatial (row) axis, channel by channel.
    pub fn spatial(&mut self, a: Var, map: Rc<SpatialMap>) -> Result<Var> {
        let value = map.apply_matrix(self.value(a))?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Spatial { x: a, map }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Matrix::filled(1, 1, s), Op::Sum(a), rg)
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        let rg = self.rg(&[a]);
        self.push(Matrix::filled(1, 1, s), Op::SumSquares(a), rg)
    }

    /// Squared Euclidean distance `||a - b||^2`.
    pub fn sse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        self.sum_squares(d)
    }

    /// Record an op with a caller-supplied value and backward rule.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Matrix,
        backward: CustomBackward,
    ) -> Result<Var> {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                name,
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Reverse sweep from the scalar `loss`. Returns gradients for every
    /// trainable leaf and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(TensorError::NotScalar { rows, cols });
        }
        if !self.requires_grad(loss) {
            return Err(TensorError::Detached);
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = |v: &Var| &nodes[v.0].value;
            let mut acc = |v: Var, d: Matrix| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if nodes[a.0].requires_grad {
                        acc(*a, g.matmul_nt(val(b))?);
                    }
                    if nodes[b.0].requires_grad {
                        acc(*b, val(a).matmul_tn(&g)?);
                    }
                }
                Op::MatMulNt(a, b) => {
                    // y = a b^T: da = g b, db = g^T a
                    if nodes[a.0].requires_grad {
                        acc(*a, g.matmul(val(b))?);
                    }
                    if nodes[b.0].requires_grad {
                        acc(*b, g.matmul_tn(val(a))?);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|x| -x));
                }
                Op::Hadamard(a, b) => {
                    acc(*a, g.zip_map(val(b), "hadamard", |x, y| x * y)?);
                    acc(*b, g.zip_map(val(a), "hadamard", |x, y| x * y)?);
                }
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, "exp", |x, y| x * y)?),
                Op::Relu(a) => acc(*a, g.zip_map(val(a), "relu", |x, y| if y > 0.0 { x } else { 0.0 })?),
                Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let (r, c) = nodes[a.0].value.shape();
                    acc(*a, Matrix::new(r, c, g.into_data())?);
                }
                Op::AddBias(a, b) => {
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for (k, v) in g.data().iter().enumerate() {
                        db[k % cols] += v;
                    }
                    acc(*b, Matrix::new(1, cols, db)?);
                    acc(*a, g);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (rows, cols) = y.shape();
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            dx[i * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*a, Matrix::new(rows, cols, dx)?);
                }
                Op::LayerNormRows { x, sigma, denom } => {
                    let xv = val(x);
                    let (rows, cols) = xv.shape();
                    let n = cols as f64;
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let (xr, gr) = (xv.row(i), g.row(i));
                        if sigma[i] == 0.0 {
                            continue;
                        }
                        let mean = xr.iter().sum::<f64>() / n;
                        let gmean = gr.iter().sum::<f64>() / n;
                        let gd: f64 = xr.iter().zip(gr).map(|(v, q)| (v - mean) * q).sum();
                        let s = denom[i];
                        let coef = gd / (s * s * n * sigma[i]);
                        for j in 0..cols {
                            dx[i * cols + j] = (gr[j] - gmean) / s - coef * (xr[j] - mean);
                        }
                    }
                    acc(*x, Matrix::new(rows, cols, dx)?);
                }
                Op::SliceRows { x, start } => {
                    let (r, c) = nodes[x.0].value.shape();
                    let mut dx = Matrix::zeros(r, c);
                    dx.data_mut()[start * c..start * c + g.data().len()].copy_from_slice(g.data());
                    acc(*x, dx);
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = nodes[x.0].value.shape();
                    let mut dx = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..g.cols() {
                            dx.set(i, start + j, g.get(i, j));
                        }
                    }
                    acc(*x, dx);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let r = nodes[p.0].value.rows();
                        let piece = g.data()[offset * cols..(offset + r) * cols].to_vec();
                        acc(*p, Matrix::new(r, cols, piece)?);
                        offset += r;
                    }
                }
                Op::Spatial { x, map } => acc(*x, map.apply_transpose_matrix(&g)?),
                Op::Sum(a) => {
                    let (r, c) = nodes[a.0].value.shape();
                    acc(*a, Matrix::filled(r, c, g.data()[0]));
                }
                Op::SumSquares(a) => {
                    let s = 2.0 * g.data()[0];
                    acc(*a, val(a).map(|v| s * v));
                }
                Op::Custom { inputs, backward, .. } => {
                    let ins: Vec<&Matrix> = inputs.iter().map(val).collect();
                    let ds = backward(&g, &ins, &node.value);
                    for (v, d) in inputs.iter().zip(ds) {
                        acc(*v, d);
                    }
                }
            }
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match n.op {
                Op::Leaf if n.requires_grad => {
                    Some(g.unwrap_or_else(|| Matrix::zeros(n.value.rows(), n.value.cols())))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.param(m(1, 3, &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn hadamard_with_ones_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(m(2, 2, &[0.5, -3.0, 7.0, 1e-3])).unwrap();
        let ones = tape.constant(Matrix::filled(2, 2, 1.0)).unwrap();
        let y = tape.hadamard(x, ones).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
        assert!(tape.is_empty());
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let data = [0.3, -1.2, 2.5, 0.0];
        let x = tape.param(m(2, 2, &data)).unwrap();
        let sq = tape.hadamard(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap().data(), &want[..]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(m(1, 2, &[1.0, 2.0])).unwrap();
        assert_eq!(tape.backward(x).unwrap_err(), TensorError::NotScalar { rows: 1, cols: 2 });

        let mut tape = Tape::new();
        let c = tape.constant(m(1, 2, &[1.0, 2.0])).unwrap();
        let s = tape.sum(c).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), TensorError::Detached);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(m(1, 1, &[1000.0])).unwrap();
        assert_eq!(tape.exp(x).unwrap_err(), TensorError::NonFinite { op: "exp" });
    }

    #[test]
    fn shape_mismatch_is_error_not_broadcast() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::zeros(2, 3)).unwrap();
        let b = tape.constant(Matrix::zeros(1, 3)).unwrap();
        assert!(matches!(tape.add(a, b), Err(TensorError::ShapeMismatch { op: "add", .. })));
        assert!(tape.matmul(a, a).is_err());
        // the dedicated bias op does accept a row
        assert!(tape.add_bias(a, b).is_ok());
    }

    #[test]
    fn unreached_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(m(1, 1, &[2.0])).unwrap();
        let unused = tape.param(m(1, 2, &[1.0, 1.0])).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(m(1, 4, &[3.0; 4])).unwrap();
        let y = tape.layer_norm_rows(x, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn fill_tensor_copies_gradient() {
        let mut t = Tensor::from_fn(1, 2, 1, |_, j, _| j as f64).with_grad();
        let mut tape = Tape::new();
        let x = tape.tensor(&t).unwrap();
        let s = tape.sum_squares(x).unwrap();
        let g = tape.backward(s).unwrap();
        g.fill_tensor(x, &mut t);
        assert_eq!(t.grad.as_deref(), Some(&[0.0, 2.0][..]));
    }
}
