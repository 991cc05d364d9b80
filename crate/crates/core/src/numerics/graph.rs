//! Reverse-mode differentiation over a fixed primitive set.
//!
//! Every op appends one node to the tape; nodes only reference earlier
//! nodes, so the tape order is already topological. `backward` walks it once
//! in reverse, accumulating gradients additively where a value fans out.
//! Nodes whose inputs are all constants carry `requires_grad == false` and
//! are skipped entirely on the way back.

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm_nn, gemm_nt, gemm_tn, softmax_in_place, Scalar, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mse { x: Var, target: Tensor<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of every `requires_grad` leaf, indexed by its [`Var`].
#[derive(Debug)]
pub struct LeafGrads<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> LeafGrads<T> {
    /// Gradient for a trainable leaf; an exact zero tensor when the loss
    /// never reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, op_name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{op_name} output")));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::LayerNorm { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mse { x, .. } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "param")?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        self.push(value, Op::MatMulNt(a, b), "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.push(value, Op::Add(a, b), "add")
    }

    /// Adds vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.row_broadcast(a, b, "add_row", |x, y| x + y)?;
        self.push(value, Op::AddRow(a, b), "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, "mul")?;
        let value = x.zip_map(y, |p, q| p * q);
        self.push(value, Op::Mul(a, b), "mul")
    }

    /// Multiplies every row of `a` elementwise by vector `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.row_broadcast(a, b, "mul_row", |x, y| x * y)?;
        self.push(value, Op::MulRow(a, b), "mul_row")
    }

    fn row_broadcast(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if y.shape().len() != 1 || y.numel() != x.cols() {
            return Err(self.dim_err(op, a, b));
        }
        let mut out = x.clone();
        let c = x.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bj) in row.iter_mut().zip(y.data()) {
                *o = f(*o, bj);
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let value = self.value(a).map(|x| x * f);
        self.push(value, Op::Scale(a, factor), "scale")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (c, k, half) = (T::of(GELU_C), T::of(0.044_715), T::of(0.5));
        let value = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a), "gelu")
    }

    /// Row softmax. With `causal`, entry `(i, j)` of a square score matrix is
    /// masked out for `j > i`.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        if causal && (x.shape().len() != 2 || x.rows() != c) {
            return Err(Error::Shape(format!(
                "causal softmax needs a square matrix, got {:?}",
                x.shape()
            )));
        }
        let mut value = x.clone();
        for (i, row) in value.data_mut().chunks_mut(c).enumerate() {
            let visible = if causal { i + 1 } else { c };
            softmax_in_place(row, visible);
        }
        self.push(value, Op::Softmax(a), "softmax")
    }

    /// Normalizes every row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let n = T::of(c as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for row in value.data_mut().chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        self.push(value, Op::LayerNorm { x: a, inv_std }, "layer_norm")
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let rows = t.rows();
        let c = t.cols();
        if ids.is_empty() {
            return Err(Error::Shape("gather with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= rows {
                return Err(Error::Shape(format!(
                    "gather index {id} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), c], data)?;
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            "gather",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(self.dim_err("concat_rows", first, p));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        self.push(value, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let r = self.value(first).rows();
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows() != r) {
            return Err(self.dim_err("concat_cols", first, bad));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        self.push(value, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if len == 0 || start + len > x.rows() {
            return Err(Error::Shape(format!(
                "rows {start}..{} out of range for {:?}",
                start + len,
                x.shape()
            )));
        }
        let c = x.cols();
        let value = Tensor::new(vec![len, c], x.data()[start * c..(start + len) * c].to_vec())?;
        self.push(value, Op::SliceRows { x: a, start }, "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        if len == 0 || start + len > c {
            return Err(Error::Shape(format!(
                "cols {start}..{} out of range for {:?}",
                start + len,
                x.shape()
            )));
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for i in 0..x.rows() {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![x.rows(), len], data)?;
        self.push(value, Op::SliceCols { x: a, start }, "slice_cols")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push(value, Op::Reshape(a), "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), "sum")
    }

    /// Mean of squared differences against a constant target.
    pub fn mse(&mut self, a: Var, target: &Tensor<T>) -> Result<Var> {
        let x = self.value(a);
        x.same_shape(target, "mse")?;
        let n = T::of(x.numel() as f64);
        let total = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum::<T>();
        let value = Tensor::scalar(total / n);
        self.push(
            value,
            Op::Mse {
                x: a,
                target: target.clone(),
            },
            "mse",
        )
    }

    /// Summed negative log-likelihood of `targets[i]` under softmax of row `i`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let c = x.cols();
        if x.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: {} rows for {} targets",
                x.rows(),
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Shape(format!("target {t} out of range for {c} classes")));
        }
        let mut probs = x.clone();
        let mut nll = T::zero();
        for (row, (src, &t)) in probs
            .data_mut()
            .chunks_mut(c)
            .zip(x.data().chunks(c).zip(targets))
        {
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = src.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            nll += lse - src[t];
            softmax_in_place(row, c);
        }
        self.push(
            Tensor::scalar(nll),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Back-propagates from a scalar `loss`, returning gradients for every
    /// trainable leaf. Leaves the loss does not depend on get exact zeros.
    pub fn backward(&self, loss: Var) -> Result<LeafGrads<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(lv.shape()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                (node.requires_grad && matches!(node.op, Op::Leaf)).then(|| {
                    grads[i]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
                })
            })
            .collect();
        Ok(LeafGrads { grads: leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, q, s) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); p * q];
                    gemm_nt(g.data(), bv.data(), &mut da, p, s, q);
                    self.accumulate(grads, *a, Tensor::new(vec![p, q], da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); q * s];
                    gemm_tn(av.data(), g.data(), &mut db, p, q, s);
                    self.accumulate(grads, *b, Tensor::new(vec![q, s], db)?);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, q, s) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); p * q];
                    gemm_nn(g.data(), bv.data(), &mut da, p, s, q);
                    self.accumulate(grads, *a, Tensor::new(vec![p, q], da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); s * q];
                    gemm_tn(g.data(), av.data(), &mut db, p, s, q);
                    self.accumulate(grads, *b, Tensor::new(vec![s, q], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, column_sums(g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                if self.requires_grad(*a) {
                    let mut da = g.clone();
                    for row in da.data_mut().chunks_mut(c) {
                        for (d, &w) in row.iter_mut().zip(bv.data()) {
                            *d *= w;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, column_sums(&g.zip_map(av, |x, y| x * y)));
                }
            }
            Op::Scale(a, f) => {
                let f = T::of(*f);
                self.accumulate(grads, *a, g.map(|x| x * f));
            }
            Op::Gelu(a) => {
                let (c, k, half) = (T::of(GELU_C), T::of(0.044_715), T::of(0.5));
                let three = T::of(3.0);
                let dx = g.zip_map(self.value(*a), |gy, x| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let d = half * (T::one() + t)
                        + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                    gy * d
                });
                self.accumulate(grads, *a, dx);
            }
            Op::Softmax(x) => {
                let c = y.cols();
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (d, &p) in drow.iter_mut().zip(yrow) {
                        *d = p * (*d - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, inv_std } => {
                let c = y.cols();
                let n = T::of(c as f64);
                let mut dx = g.clone();
                for ((drow, yrow), &s) in dx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(inv_std)
                {
                    let mean_g = drow.iter().copied().sum::<T>() / n;
                    let mean_gy = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for (d, &yy) in drow.iter_mut().zip(yrow) {
                        *d = s * (*d - mean_g - yy * mean_gy);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let c = t.cols();
                let mut dt = Tensor::zeros(t.shape());
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * c..(id + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(g.row(i)) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let len = self.value(p).numel();
                    if self.requires_grad(p) {
                        let part = g.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, p, Tensor::new(shape, part)?);
                    }
                    offset += len;
                    debug_assert_eq!(offset % c, 0);
                }
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let mut start = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            data.extend_from_slice(&g.row(i)[start..start + pc]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![r, pc], data)?);
                    }
                    start += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let c = src.cols();
                let mut dx = Tensor::zeros(src.shape());
                dx.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let (c, len) = (src.cols(), g.cols());
                let mut dx = Tensor::zeros(src.shape());
                for i in 0..src.rows() {
                    dx.data_mut()[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape)?);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let k = T::of(2.0) * g.item() / T::of(xv.numel() as f64);
                self.accumulate(grads, *x, xv.zip_map(target, |p, q| k * (p - q)));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let gv = g.item();
                let c = probs.cols();
                let mut dx = probs.clone();
                for (row, &t) in dx.data_mut().chunks_mut(c).zip(targets) {
                    row[t] -= T::one();
                    for d in row.iter_mut() {
                        *d *= gv;
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
        }
        Ok(())
    }
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let c = g.cols();
    let mut out = Tensor::zeros(&[c]);
    for row in g.data().chunks(c) {
        for (o, &v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` with respect to every coordinate of `x`.
    fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let h = 1e-5;
        Tensor::from_fn(x.shape(), |i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>) {
        for (x, y) in a.data().iter().zip(b.data()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
            assert!(rel < 1e-4, "analytic {x} vs numeric {y}");
        }
    }

    /// Checks d(loss)/d(x) for a graph built by `build` against finite differences.
    fn check(shape: &[usize], seed: u64, build: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_tensor(&mut rng, shape);
        let eval = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.param(x.clone()).unwrap();
            let l = build(&mut g, v).unwrap();
            g.value(l).item()
        };
        let mut g = Graph::new();
        let v = g.param(x0.clone()).unwrap();
        let loss = build(&mut g, v).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_close(grads.get(v).unwrap(), &numeric_grad(&x0, &eval));
    }

    #[test]
    fn sum_gives_ones_and_square_norm_gives_twice() {
        let w = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let mut g = Graph::new();
        let v = g.param(w.clone()).unwrap();
        let l = g.sum(v).unwrap();
        assert_eq!(g.backward(l).unwrap().get(v).unwrap(), &Tensor::ones(&[2, 3]));

        let mut g = Graph::new();
        let v = g.param(w.clone()).unwrap();
        let sq = g.mul(v, v).unwrap();
        let l = g.sum(sq).unwrap();
        assert_eq!(g.backward(l).unwrap().get(v).unwrap(), &w.map(|x| 2.0 * x));
    }

    #[test]
    fn unused_param_gets_exact_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::ones(&[2])).unwrap();
        let b = g.param(Tensor::ones(&[3])).unwrap();
        let l = g.sum(a).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(b).unwrap(), &Tensor::zeros(&[3]));
        assert!(grads.get(l).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones(&[2, 2])).unwrap();
        let p = g.param(Tensor::ones(&[2, 2])).unwrap();
        let m = g.matmul(c, p).unwrap();
        let l = g.sum(m).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[1], 3.0)).unwrap();
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // 2x^2
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 12.0);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::<f32>::new();
        assert!(g.constant(Tensor::full(&[1], f32::INFINITY)).is_err());
        let x = g.param(Tensor::full(&[1], f32::MAX)).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let row = rand_tensor(&mut rng, &[3]);
        let target = rand_tensor(&mut rng, &[2, 3]);

        check(&[2, 3], 1, |g, x| {
            let bv = g.constant(b.clone())?;
            let y = g.matmul(x, bv)?;
            let y = g.gelu(y)?;
            g.sum(y)
        });
        check(&[3, 4], 2, |g, x| {
            let a = g.constant(target.clone())?;
            let y = g.matmul(a, x)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        });
        check(&[4, 3], 3, |g, x| {
            let a = g.constant(target.clone())?;
            let y = g.matmul_nt(a, x)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        });
        check(&[3, 3], 4, |g, x| {
            let s = g.softmax(x, true)?;
            let w = g.constant(b.clone().reshape(&[3, 4]).unwrap())?;
            let y = g.matmul(s, w)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        });
        check(&[2, 3], 5, |g, x| {
            let n = g.layer_norm(x)?;
            let r = g.constant(row.clone())?;
            let n = g.mul_row(n, r)?;
            g.mse(n, &target)
        });
        check(&[3], 6, |g, x| {
            let t = g.constant(target.clone())?;
            let y = g.mul_row(t, x)?;
            let y = g.add_row(y, x)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        });
        check(&[4, 3], 7, |g, x| {
            let rows = g.gather(x, &[1, 3, 1])?;
            let l = g.cross_entropy(rows, &[0, 2, 1])?;
            g.scale(l, 0.7)
        });
        check(&[3, 4], 8, |g, x| {
            let left = g.slice_cols(x, 0, 2)?;
            let right = g.slice_cols(x, 2, 2)?;
            let top = g.slice_rows(x, 1, 2)?;
            let cat = g.concat_cols(&[right, left])?;
            let all = g.concat_rows(&[cat, top])?;
            let flat = g.reshape(all, &[5, 4])?;
            let sq = g.mul(flat, flat)?;
            g.sum(sq)
        });
    }
}
