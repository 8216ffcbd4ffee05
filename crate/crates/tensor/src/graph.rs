//! Tape of recorded operations with reverse-mode differentiation.
//!
//! Every op appends one node holding its output value, the op kind and the
//! input handles. Nodes are appended in evaluation order, so the tape is a
//! topological order by construction and `backward` walks it once in reverse.

use std::sync::Arc;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels;
use crate::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction applied by the loss ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Transpose(Var),
    Gather { table: Var, ids: Vec<usize> },
    Sigmoid(Var),
    Gelu(Var),
    LeakyRelu(Var, T),
    Softmax { input: Var, axis: usize },
    LayerNorm { input: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Sum(Var),
    Mean(Var),
    Mse { pred: Var, target: Var },
    BceLogits { logits: Var, targets: Vec<T>, reduction: Reduction },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T>, reduction: Reduction },
    L2Norm(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation and differentiates it.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * k * x * x);
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push_unchecked(Arc::new(value), op, requires_grad))
    }

    fn push_unchecked(&mut self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Non-finite inputs are rejected.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// Adds a shared trainable tensor without copying it.
    pub fn param(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Adds a shared tensor that takes no gradient.
    pub fn frozen(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
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

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return shape_err(op, format!("expected a matrix, got shape {:?}", s));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- linear algebra ----

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return shape_err("matmul", format!("inner dims {} vs {}", k, k2));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_vec([m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_nt")?;
        let (n, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return shape_err("matmul_nt", format!("inner dims {} vs {}", k, k2));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_vec([m, n], out)?, Op::MatMulNT(a, b), rg, "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Transpose(a), rg, "transpose")
    }

    // ---- elementwise ----

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg, "add")
    }

    /// Adds a row vector (`[n]` or `[1, n]`) to every row of `a: m×n`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.mat_dims(a, "add_row")?;
        if self.value(bias).len() != n {
            return shape_err("add_row", format!("bias {:?} for {} columns", self.shape(bias), n));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(a).clone();
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x += b[i % n];
        }
        let rg = self.rg(&[a, bias]);
        self.push(t, Op::AddRow(a, bias), rg, "add_row")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg, "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg, "sigmoid")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| gelu_parts(x).0);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg, "gelu")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { slope * x });
        let rg = self.rg(&[a]);
        self.push(t, Op::LeakyRelu(a, slope), rg, "leaky_relu")
    }

    // ---- structural ----

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {} for rank {}", axis, base.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return shape_err("concat", format!("{:?} vs {:?} on axis {}", s, base, axis));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let val = self.value(v);
                let len = val.shape()[axis] * inner;
                out.extend_from_slice(&val.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.rg(inputs);
        self.push(
            Tensor::from_vec(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err("slice", format!("[{}, {}) on axis {} of {:?}", start, start + len, axis, s));
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec(shape, out)?, Op::Slice { input: a, axis, start }, rg, "slice")
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.mat_dims(table, "gather")?;
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "gather",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(src.row(id));
        }
        let rg = self.rg(&[table]);
        self.push(
            Tensor::from_vec([ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "gather",
        )
    }

    // ---- normalization ----

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return shape_err("softmax", format!("axis {} for shape {:?}", axis, s));
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let mut out = self.value(a).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * ext * inner + k * inner + i;
                let mx = (0..ext).map(|k| d[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..ext {
                    let e = (d[idx(k)] - mx).exp();
                    d[idx(k)] = e;
                    z += e;
                }
                for k in 0..ext {
                    d[idx(k)] /= z;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax { input: a, axis }, rg, "softmax")
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xs = self.value(x);
        let (rows, d) = (xs.rows(), xs.cols());
        if d == 0 {
            return shape_err("layer_norm", "empty normalized axis");
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return shape_err(
                "layer_norm",
                format!("gain {:?}/bias {:?} for width {}", self.shape(gain), self.shape(bias), d),
            );
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let dt = T::lit(d as f64);
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = xs.row(r);
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::from_vec(xs.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            t,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return shape_err("mean", "empty input");
        }
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let (p, t) = (self.value(pred), self.value(target));
        if p.is_empty() {
            return shape_err("mse", "empty input");
        }
        let s = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / T::lit(p.len() as f64);
        let rg = self.rg(&[pred, target]);
        self.push(Tensor::scalar(s), Op::Mse { pred, target }, rg, "mse")
    }

    /// Binary cross-entropy of `sigmoid(logits)` against 0/1 (or soft) targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T], reduction: Reduction) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return shape_err("bce_with_logits", format!("{} logits, {} targets", z.len(), targets.len()));
        }
        let mut s = T::zero();
        for (&x, &y) in z.data().iter().zip(targets) {
            s += x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln();
        }
        if reduction == Reduction::Mean && !targets.is_empty() {
            s /= T::lit(targets.len() as f64);
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(s),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
                reduction,
            },
            rg,
            "bce_with_logits",
        )
    }

    /// Categorical cross-entropy of row-wise softmax(logits) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
        let z = self.value(logits);
        let (rows, c) = (z.rows(), z.cols());
        if rows != targets.len() {
            return shape_err("cross_entropy", format!("{} rows, {} targets", rows, targets.len()));
        }
        let mut probs = Vec::with_capacity(rows * c);
        let mut s = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: c,
                });
            }
            let row = z.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            s += lse - row[t];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        if reduction == Reduction::Mean && rows > 0 {
            s /= T::lit(rows as f64);
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(s),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                reduction,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Euclidean norm over all elements.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).data().iter().map(|&x| x * x).sum::<T>().sqrt();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(n), Op::L2Norm(a), rg, "l2_norm")
    }

    // ---- differentiation ----

    /// Accumulates d(loss)/d(leaf) into every leaf that requires a gradient.
    /// Calling it again without [`zero_grad`](Self::zero_grad) adds to the
    /// stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            if let Op::Leaf = self.nodes[i].op {
                let shape = self.nodes[i].value.shape().to_vec();
                match &mut self.leaf_grads[i] {
                    Some(acc) => {
                        for (a, &d) in acc.data_mut().iter_mut().zip(&g) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(Tensor::from_vec(shape, g)?),
                }
            }
        }
        if self.leaf_grads.iter().flatten().any(|t| !t.is_finite()) {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| kernels::matmul_nt(g, vb, s, m, n, k));
                acc(*b, &mut |s| kernels::matmul_tn(va, g, s, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| kernels::matmul_nn(g, vb, s, m, n, k));
                acc(*b, &mut |s| kernels::matmul_tn(g, va, s, m, n, k));
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                let n = self.value(*b).len();
                acc(*b, &mut |s| {
                    for (k, &d) in g.iter().enumerate() {
                        s[k % n] += d;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (x, &d) in s.iter_mut().zip(g) {
                        *x -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                for (x, &d) in s.iter_mut().zip(g) {
                    *x += d * *c;
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k] * (T::one() - out[k]);
                }
            }),
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * gelu_parts(x[k]).1;
                    }
                })
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += if x[k] > T::zero() { g[k] } else { *slope * g[k] };
                    }
                })
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.shape(v)[*axis];
                    acc(v, &mut |s| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            add_into(&mut s[o * ext * inner..(o + 1) * ext * inner], &g[src..src + ext * inner]);
                        }
                    });
                    offset += ext;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, ext, inner) = split_axis(self.shape(*input), *axis);
                let len = node.value.shape()[*axis];
                acc(*input, &mut |s| {
                    for o in 0..outer {
                        let dst = o * ext * inner + start * inner;
                        add_into(&mut s[dst..dst + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                acc(*table, &mut |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let (outer, ext, inner) = split_axis(node.value.shape(), *axis);
                acc(*input, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| o * ext * inner + k * inner + i;
                            let dotp: T = (0..ext).map(|k| g[idx(k)] * out[idx(k)]).sum();
                            for k in 0..ext {
                                s[idx(k)] += out[idx(k)] * (g[idx(k)] - dotp);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let gv = self.value(*gain).data();
                let dt = T::lit(d as f64);
                acc(*input, &mut |s| {
                    for r in 0..rows {
                        let base = r * d;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = g[base + j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xhat[base + j];
                        }
                        m1 /= dt;
                        m2 /= dt;
                        for j in 0..d {
                            let dxh = g[base + j] * gv[j];
                            s[base + j] += rstd[r] * (dxh - m1 - xhat[base + j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |s| {
                    for (k, &d_) in g.iter().enumerate() {
                        s[k % d] += d_ * xhat[k];
                    }
                });
                acc(*bias, &mut |s| {
                    for (k, &d_) in g.iter().enumerate() {
                        s[k % d] += d_;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| {
                for x in s.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = T::lit(self.value(*a).len() as f64);
                acc(*a, &mut |s| {
                    for x in s.iter_mut() {
                        *x += g[0] / n;
                    }
                })
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let c = T::lit(2.0) * g[0] / T::lit(p.len() as f64);
                acc(*pred, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += c * (p[k] - t[k]);
                    }
                });
                acc(*target, &mut |s| {
                    for k in 0..s.len() {
                        s[k] -= c * (p[k] - t[k]);
                    }
                });
            }
            Op::BceLogits {
                logits,
                targets,
                reduction,
            } => {
                let z = self.value(*logits).data();
                let c = match reduction {
                    Reduction::Sum => g[0],
                    Reduction::Mean => g[0] / T::lit(targets.len().max(1) as f64),
                };
                acc(*logits, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += c * (sigmoid(z[k]) - targets[k]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                reduction,
            } => {
                let cols = self.value(*logits).cols();
                let c = match reduction {
                    Reduction::Sum => g[0],
                    Reduction::Mean => g[0] / T::lit(targets.len().max(1) as f64),
                };
                acc(*logits, &mut |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..cols {
                            let y = if j == t { T::one() } else { T::zero() };
                            s[r * cols + j] += c * (probs[r * cols + j] - y);
                        }
                    }
                });
            }
            Op::L2Norm(a) => {
                let x = self.value(*a).data();
                let n = out[0];
                if n > T::zero() {
                    acc(*a, &mut |s| {
                        for k in 0..s.len() {
                            s[k] += g[0] * x[k] / n;
                        }
                    });
                }
            }
        }
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
