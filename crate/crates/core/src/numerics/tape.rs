//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node to a [`Tape`]. Node inputs always have a
//! smaller index than the node itself, so walking the node list backwards is
//! a reverse topological order and each operation is visited exactly once.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGradient,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Im2Col {
        x: Var,
        geom: ConvGeom,
    },
    Col2Im {
        x: Var,
        geom: ConvGeom,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGradient => "stop_gradient",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Square(_) => "square",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Sqrt(_) => "sqrt",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Im2Col { .. } => "im2col",
            Op::Col2Im { .. } => "col2im",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Values `stop_gradient` returns instead of its input, in call order.
    replay: Option<std::collections::VecDeque<Tensor>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient buffer for `var`, or `None` when no path reached it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when no path reached `var`.
    pub fn tensor(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match self.get(var) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, t.shape(), &[]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose `stop_gradient` calls return `values` in order, as if
    /// the stopped quantities were constants fixed elsewhere.
    pub fn with_stop_gradient_replay(values: Vec<Tensor>) -> Self {
        Self {
            nodes: Vec::new(),
            replay: Some(values.into()),
        }
    }

    /// Outputs of every `stop_gradient` call so far, in call order.
    pub fn stop_gradient_values(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGradient))
            .map(|n| n.value.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded operations in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients are tracked when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Identity in the forward pass; blocks every gradient to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = match self.replay.as_mut().and_then(|q| q.pop_front()) {
            Some(v) => {
                assert_eq!(v.shape(), self.value(x).shape(), "replayed stop_gradient value has the wrong shape");
                v
            }
            None => self.value(x).clone(),
        };
        self.nodes.push(Node {
            value,
            op: Op::StopGradient,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", ta)?;
        let (k2, n) = matrix_dims("matmul", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        matrix_dims("transpose", self.value(a))?;
        let value = self.value(a).transpose();
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn zip_with(&mut self, op: Op, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), "mul", a, b, |x, y| x * y)
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.len() != n {
            return Err(Error::shape("add_row", ta.shape(), tr.shape()));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (v, r) in chunk.iter_mut().zip(tr.data()) {
                *v += r;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    fn map(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(Op::Scale(a, c), a, |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(Op::AddScalar(a), a, |x| x + c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(Op::Square(a), a, |x| x * x)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(Op::Gelu(a), a, kernels::gelu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(Op::Relu(a), a, |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(Op::Tanh(a), a, f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(Op::Exp(a), a, f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(Op::Ln(a), a, f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(Op::Sqrt(a), a, f64::sqrt)
    }

    /// Softmax along `axis` of a matrix (`1` = within each row).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => self.masked_softmax(x, None),
            0 => {
                let t = self.transpose(x)?;
                let s = self.masked_softmax(t, None)?;
                self.transpose(s)
            }
            _ => Err(Error::invalid(format!("softmax axis {axis} on a matrix"))),
        }
    }

    /// Row-wise softmax where entries with `mask == false` receive
    /// probability exactly zero (equivalent to `-inf` logits).
    pub fn masked_softmax(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let tx = self.value(x);
        matrix_dims("softmax", tx)?;
        let n = tx.cols();
        if let Some(m) = &mask {
            if m.len() != tx.len() {
                return Err(Error::shape("softmax mask", tx.shape(), &[m.len()]));
            }
        }
        let mut data = tx.data().to_vec();
        for (r, row) in data.chunks_mut(n.max(1)).enumerate() {
            let mrow = mask.as_ref().map(|m| &m[r * n..(r + 1) * n]);
            kernels::softmax_row(row, mrow);
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, n) = matrix_dims("cross_entropy", tl)?;
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", tl.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::invalid(format!("cross_entropy target {bad} >= {n} classes")));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(n).zip(targets) {
            kernels::softmax_row(row, None);
            loss -= row[t].max(f64::MIN_POSITIVE).ln();
        }
        let value = Tensor::scalar(loss / m as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Per-row layer normalization with affine parameters of length `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm", tx.shape(), self.value(gamma).shape()));
        }
        let m = tx.rows();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                xhat[r * n + j] = (row[j] - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % n] + b[i % n])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Unfolds `[long_len × C]` into convolution patches `[short_len × K·C]`.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != [geom.long_len, geom.channels] {
            return Err(Error::shape("im2col", tx.shape(), &[geom.long_len, geom.channels]));
        }
        let mut out = vec![0.0; geom.short_len * geom.col_width()];
        geom.im2col(tx.data(), &mut out);
        let value = Tensor::new(vec![geom.short_len, geom.col_width()], out)?;
        Ok(self.push(value, Op::Im2Col { x, geom }, &[x]))
    }

    /// Folds patches `[short_len × K·C]` back into `[long_len × C]` by
    /// overlap-add; the adjoint of [`im2col`](Self::im2col).
    pub fn col2im(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != [geom.short_len, geom.col_width()] {
            return Err(Error::shape("col2im", tx.shape(), &[geom.short_len, geom.col_width()]));
        }
        let mut out = vec![0.0; geom.long_len * geom.channels];
        geom.col2im(tx.data(), &mut out);
        let value = Tensor::new(vec![geom.long_len, geom.channels], out)?;
        Ok(self.push(value, Op::Col2Im { x, geom }, &[x]))
    }

    /// Embedding lookup: selects rows of `table` in the order of `idx`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, n) = matrix_dims("gather_rows", tt)?;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= rows {
                return Err(Error::invalid(format!("gather index {i} >= {rows} rows")));
            }
            data.extend_from_slice(tt.row(i));
        }
        let value = Tensor::new(vec![idx.len(), n], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix_dims("slice_cols", tx)?;
        if start + len > n {
            return Err(Error::shape("slice_cols", tx.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![m, len], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix_dims("slice_rows", tx)?;
        if start + len > m {
            return Err(Error::shape("slice_rows", tx.shape(), &[start, len]));
        }
        let value = Tensor::new(vec![len, n], tx.data()[start * n..(start + len) * n].to_vec())?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero parts"))?;
        let m = matrix_dims("concat_cols", self.value(*first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = matrix_dims("concat_cols", self.value(*p))?;
            if pm != m {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), self.value(*p).shape()));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero parts"))?;
        let n = matrix_dims("concat_rows", self.value(*first))?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for p in parts {
            let (pm, pn) = matrix_dims("concat_rows", self.value(*p))?;
            if pn != n {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), self.value(*p).shape()));
            }
            data.extend_from_slice(self.value(*p).data());
            m += pm;
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sums each row of a matrix into an `m×1` column.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, _) = matrix_dims("row_sum", tx)?;
        let data = (0..m).map(|r| tx.row(r).iter().sum()).collect();
        let value = Tensor::new(vec![m, 1], data)?;
        Ok(self.push(value, Op::RowSum(x), &[x]))
    }

    /// Mean squared difference of two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::shape("backward", lt.shape(), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if wants(*a) {
                    acc(*a, &mut |ga| kernels::gemm(m, n, k, g, false, tb.data(), true, ga, 1.0));
                }
                if wants(*b) {
                    acc(*b, &mut |gb| kernels::gemm(k, m, n, ta.data(), true, g, false, gb, 1.0));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[j * m + i] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *x += y * w;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *x += y * w;
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let n = out.cols();
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(n.max(1)) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }),
            Op::AddScalar(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Square(a) => {
                let ta = val(*a);
                acc(*a, &mut |ga| elementwise(ga, g, ta.data(), |x| 2.0 * x));
            }
            Op::Gelu(a) => {
                let ta = val(*a);
                acc(*a, &mut |ga| elementwise(ga, g, ta.data(), kernels::gelu_grad));
            }
            Op::Relu(a) => {
                let ta = val(*a);
                acc(*a, &mut |ga| elementwise(ga, g, ta.data(), |x| if x > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::Tanh(a) => acc(*a, &mut |ga| elementwise(ga, g, out.data(), |y| 1.0 - y * y)),
            Op::Exp(a) => acc(*a, &mut |ga| elementwise(ga, g, out.data(), |y| y)),
            Op::Ln(a) => {
                let ta = val(*a);
                acc(*a, &mut |ga| elementwise(ga, g, ta.data(), |x| 1.0 / x));
            }
            Op::Sqrt(a) => acc(*a, &mut |ga| elementwise(ga, g, out.data(), |y| 0.5 / y)),
            Op::Softmax { x } => {
                let n = out.cols();
                acc(*x, &mut |gx| {
                    for ((gr, yr), dr) in g.chunks(n).zip(out.data().chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = val(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            let p = probs[r * n + j] - if j == t { 1.0 } else { 0.0 };
                            gl[r * n + j] += scale * p;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gam = val(*gamma).data();
                acc(*gamma, &mut |gg| {
                    for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                });
                acc(*x, &mut |gx| {
                    let nf = n as f64;
                    for (r, ((gr, xr), dr)) in g.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            sum_d += d;
                            sum_dx += d * xr[j];
                        }
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            dr[j] += inv_std[r] / nf * (nf * d - sum_d - xr[j] * sum_dx);
                        }
                    }
                });
            }
            Op::Im2Col { x, geom } => acc(*x, &mut |gx| geom.col2im(g, gx)),
            Op::Col2Im { x, geom } => acc(*x, &mut |gx| {
                let mut cols = vec![0.0; gx.len()];
                geom.im2col(g, &mut cols);
                add_into(gx, &cols);
            }),
            Op::GatherRows { table, idx } => {
                let n = out.cols();
                acc(*table, &mut |gt| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gt[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (m, len) = (out.shape()[0], out.shape()[1]);
                let n = val(*x).cols();
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        add_into(&mut gx[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = out.cols();
                acc(*x, &mut |gx| add_into(&mut gx[start * n..start * n + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    acc(*p, &mut |gp| {
                        for r in 0..m {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    acc(*p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let c = g[0] / val(*x).len().max(1) as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += c));
            }
            Op::RowSum(x) => {
                let n = val(*x).cols();
                acc(*x, &mut |gx| {
                    for (r, chunk) in gx.chunks_mut(n.max(1)).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += g[r]);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn elementwise(dst: &mut [f64], g: &[f64], at: &[f64], deriv: impl Fn(f64) -> f64) {
    for ((d, gi), x) in dst.iter_mut().zip(g).zip(at) {
        *d += gi * deriv(*x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selection() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[&[1.0, 0.0]]));
        let b = tape.constant(t(&[&[2.0], &[5.0]]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[0.0, 0.0, 0.0]]));
        let s = tape.softmax(x, 1).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[&[1000.0, 0.0]]));
        let s = tape.softmax(x, 1).unwrap();
        let d = tape.value(s).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-15 && d[1] < 1e-300);

        let x = tape.constant(t(&[&[2f64.ln(), 1f64.ln()]]));
        let s = tape.softmax(x, 1).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 2.0], &[3.0, -1.0], &[0.5, 0.0]]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s);
        for j in 0..2 {
            let col: f64 = (0..3).map(|i| v.get2(i, j)).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stop_gradient_examples() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::row_vector(vec![1.0, 2.0]));
        let s = tape.stop_gradient(x);
        assert_eq!(tape.value(s).data(), &[1.0, 2.0]);

        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let s = tape.stop_gradient(x);
        let y = tape.mul(s, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0]);

        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let sq = tape.square(x);
        let s = tape.stop_gradient(sq);
        let y = tape.add_scalar(s, 1.0);
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.tensor(x).data(), &[0.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + x  => dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let xx = tape.mul(x, x).unwrap();
        let y = tape.add(xx, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[7.0]);
    }

    #[test]
    fn cross_entropy_value() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[&[0.0, 0.0], &[2f64.ln(), 0.0]]));
        let ce = tape.cross_entropy(l, &[0, 0]).unwrap();
        let expected = (2f64.ln() + (1.5f64).ln()) / 2.0;
        assert!((tape.value(ce).item() - expected).abs() < 1e-15);
        assert!(tape.cross_entropy(l, &[0, 2]).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 5.0, 2.0]]));
        let s = tape.masked_softmax(x, Some(vec![true, false, true])).unwrap();
        let d = tape.value(s).data();
        assert_eq!(d[1], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }
}
