//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Tape`] is the computation record: every operation appends one node
//! whose inputs already live on the tape, so node order is a topological
//! order and the backward pass is a single reverse sweep. Nodes are never
//! mutated after they are pushed, which makes [`Tape::backward`] repeatable.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::{gemm, kron as kron_raw, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, producing a `1 × cols` row.
    Rows,
    /// Reduce over columns, producing a `rows × 1` column.
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ScalarAffine { x: Var, w: Var, b: Var },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    Powf(Var, f64),
    MaskedSoftmax(Var),
    Mean(Var, Axis),
    Sum(Var),
    MatPow(Var, u32),
    Kron(Var, Var),
    Embedding { table: Var, ids: Vec<usize> },
    Affine { x: Var, w: Var, b: Var },
    Transpose(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    SmoothL1(Var),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

/// The computation record.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like its value when `v` is unreachable.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| tape.value(v).zeros_like())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn smooth_l1_value(x: f64) -> f64 {
    let a = libm::fabs(x);
    if a <= 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_derivative(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Records a leaf; it participates in differentiation iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let grad = t.requires_grad();
        self.push(t, Op::Leaf, grad)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, ac) = self.dims(a, "matmul")?;
        let (br, _) = self.dims(b, "matmul")?;
        if ac != br {
            return Err(mismatch("matmul", self.value(a), self.value(b)));
        }
        let out = gemm(self.value(a), false, self.value(b), false);
        let grad = self.g(a) || self.g(b);
        Ok(self.push(out, Op::MatMul(a, b), grad))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch(op, self.value(a), self.value(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let grad = self.g(a) || self.g(b);
        Ok(self.push(out, Op::Add(a, b), grad))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let grad = self.g(a) || self.g(b);
        Ok(self.push(out, Op::Sub(a, b), grad))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let grad = self.g(a) || self.g(b);
        Ok(self.push(out, Op::Mul(a, b), grad))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let grad = self.g(x);
        self.push(out, Op::Scale(x, c), grad)
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn offset(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(mismatch("offset", self.value(x), c));
        }
        let out = self.value(x).zip_map(c, |a, b| a + b);
        let grad = self.g(x);
        Ok(self.push(out, Op::Offset(x), grad))
    }

    /// Elementwise `w·x + b` where `w` and `b` are `1 × 1`.
    pub fn scalar_affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        for s in [w, b] {
            if self.value(s).numel() != 1 {
                return Err(mismatch("scalar_affine", self.value(s), &Tensor::scalar(0.0)));
            }
        }
        let (wv, bv) = (self.value(w).item(), self.value(b).item());
        let out = self.value(x).map(|v| wv * v + bv);
        let grad = self.g(x) || self.g(w) || self.g(b);
        Ok(self.push(out, Op::ScalarAffine { x, w, b }, grad))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let grad = self.g(x);
        self.push(out, Op::Sigmoid(x), grad)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(libm::tanh);
        let grad = self.g(x);
        self.push(out, Op::Tanh(x), grad)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let grad = self.g(x);
        self.push(out, Op::Relu(x), grad)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let grad = self.g(x);
        self.push(out, Op::LeakyRelu(x, slope), grad)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(libm::fabs);
        let grad = self.g(x);
        self.push(out, Op::Abs(x), grad)
    }

    /// Elementwise power `x^e`; inputs must be positive when `e` is fractional.
    pub fn powf(&mut self, x: Var, e: f64) -> Var {
        let out = self.value(x).map(|v| libm::pow(v, e));
        let grad = self.g(x);
        self.push(out, Op::Powf(x, e), grad)
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked
    /// entries are exactly zero in the output.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims(x, "masked_softmax")?;
        if mask.len() != r * c {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                left: vec![r, c],
                right: vec![mask.len()],
            });
        }
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::EmptySoftmaxSupport { row: i });
            }
            let mut z = 0.0;
            for j in 0..c {
                if m[j] {
                    let e = libm::exp(row[j] - mx);
                    out[i * c + j] = e;
                    z += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let grad = self.g(x);
        Ok(self.push(Tensor::matrix(r, c, out), Op::MaskedSoftmax(x), grad))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        self.masked_softmax(x, &vec![true; n])
    }

    pub fn mean(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let (r, c) = self.dims(x, "mean")?;
        let xv = self.value(x).data();
        let out = match axis {
            Axis::Rows => {
                if r == 0 {
                    return Err(invalid("mean over zero rows"));
                }
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        acc[j] += xv[i * c + j];
                    }
                }
                Tensor::matrix(1, c, acc.into_iter().map(|v| v / r as f64).collect())
            }
            Axis::Cols => {
                if c == 0 {
                    return Err(invalid("mean over zero columns"));
                }
                let acc = (0..r)
                    .map(|i| xv[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
                    .collect();
                Tensor::matrix(r, 1, acc)
            }
        };
        let grad = self.g(x);
        Ok(self.push(out, Op::Mean(x, axis), grad))
    }

    /// Sum of all entries as a `1 × 1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let grad = self.g(x);
        self.push(Tensor::scalar(s), Op::Sum(x), grad)
    }

    /// `x^p` by repeated multiplication; `x^0` is the identity.
    pub fn matpow(&mut self, x: Var, p: u32) -> Result<Var> {
        let (r, c) = self.dims(x, "matpow")?;
        if r != c {
            return Err(mismatch("matpow", self.value(x), &self.value(x).transpose()));
        }
        let mut acc = Tensor::eye(r);
        for _ in 0..p {
            acc = gemm(&acc, false, self.value(x), false);
        }
        let grad = self.g(x);
        Ok(self.push(acc, Op::MatPow(x, p), grad))
    }

    pub fn kron(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kron_raw(self.value(a), self.value(b))?;
        let grad = self.g(a) || self.g(b);
        Ok(self.push(out, Op::Kron(a, b), grad))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.dims(table, "embedding")?;
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::UnknownToken(id));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let grad = self.g(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            grad,
        ))
    }

    /// `x · w + 1 · b` with `b` a `1 × n` row repeated over the rows of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (_, xc) = self.dims(x, "affine")?;
        let (wr, wc) = self.dims(w, "affine")?;
        if xc != wr {
            return Err(mismatch("affine", self.value(x), self.value(w)));
        }
        if self.value(b).shape() != [1, wc] {
            return Err(mismatch("affine bias", self.value(b), self.value(w)));
        }
        let mut out = gemm(self.value(x), false, self.value(w), false);
        let bv = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(wc) {
            for (o, bb) in row.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        let grad = self.g(x) || self.g(w) || self.g(b);
        Ok(self.push(out, Op::Affine { x, w, b }, grad))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.dims(x, "transpose")?;
        let out = self.value(x).transpose();
        let grad = self.g(x);
        Ok(self.push(out, Op::Transpose(x), grad))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x, "slice_rows")?;
        if start > end || end > r {
            return Err(Error::OutOfRange {
                what: "slice_rows",
                index: end,
                limit: r,
            });
        }
        let out = Tensor::matrix(
            end - start,
            c,
            self.value(x).data()[start * c..end * c].to_vec(),
        );
        let grad = self.g(x);
        Ok(self.push(out, Op::SliceRows { x, start }, grad))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x, "slice_cols")?;
        if start > end || end > c {
            return Err(Error::OutOfRange {
                what: "slice_cols",
                index: end,
                limit: c,
            });
        }
        let w = end - start;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + end]);
        }
        let grad = self.g(x);
        Ok(self.push(Tensor::matrix(r, w, out), Op::SliceCols { x, start }, grad))
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        let (r, _) = self.dims(first, "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p, "concat_cols")?;
            if pr != r {
                return Err(mismatch("concat_cols", self.value(first), self.value(p)));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pv = self.value(p);
                out.extend_from_slice(pv.row_slice(i));
            }
        }
        let grad = parts.iter().any(|&p| self.g(p));
        Ok(self.push(
            Tensor::matrix(r, total, out),
            Op::ConcatCols(parts.to_vec()),
            grad,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        let (_, c) = self.dims(first, "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p, "concat_rows")?;
            if pc != c {
                return Err(mismatch("concat_rows", self.value(first), self.value(p)));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let grad = parts.iter().any(|&p| self.g(p));
        Ok(self.push(
            Tensor::matrix(rows, c, out),
            Op::ConcatRows(parts.to_vec()),
            grad,
        ))
    }

    /// Row-wise layer normalisation with `1 × d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x, "layer_norm")?;
        for p in [gain, bias] {
            if self.value(p).shape() != [1, c] {
                return Err(mismatch("layer_norm", self.value(x), self.value(p)));
            }
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let grad = self.g(x) || self.g(gain) || self.g(bias);
        Ok(self.push(
            Tensor::matrix(r, c, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: Tensor::matrix(r, c, xhat),
                inv_std,
            },
            grad,
        ))
    }

    /// Mean softmax cross-entropy of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits, "cross_entropy")?;
        if targets.len() != r {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: vec![r, c],
                right: vec![targets.len()],
            });
        }
        if r == 0 {
            return Err(invalid("cross entropy over zero rows"));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &lv[i * c..(i + 1) * c];
            let t = targets[i];
            if t >= c {
                return Err(Error::UnknownToken(t));
            }
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| libm::exp(v - mx)).sum();
            let lz = libm::log(z) + mx;
            loss += lz - row[t];
            for j in 0..c {
                probs[i * c + j] = libm::exp(row[j] - lz);
            }
        }
        let grad = self.g(logits);
        Ok(self.push(
            Tensor::scalar(loss / r as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs: Tensor::matrix(r, c, probs),
            },
            grad,
        ))
    }

    /// Elementwise smooth-L1.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        let out = self.value(x).map(smooth_l1_value);
        let grad = self.g(x);
        self.push(out, Op::SmoothL1(x), grad)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().with_grad(false).reshape(vec![rows, cols])?;
        let grad = self.g(x);
        Ok(self.push(out, Op::Reshape(x), grad))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0).reshape(lv.shape().to_vec())?);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.g(*a) {
                    acc(*a, gemm(g, false, val(*b), true));
                }
                if self.g(*b) {
                    acc(*b, gemm(val(*a), true, g, false));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.g(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if self.g(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::Offset(x) => acc(*x, g.clone()),
            Op::ScalarAffine { x, w, b } => {
                let wv = val(*w).item();
                if self.g(*x) {
                    acc(*x, g.map(|v| v * wv));
                }
                if self.g(*w) {
                    let s: f64 = g.data().iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                    acc(*w, Tensor::scalar(s).reshape(val(*w).shape().to_vec()).unwrap());
                }
                if self.g(*b) {
                    acc(*b, Tensor::scalar(g.sum()).reshape(val(*b).shape().to_vec()).unwrap());
                }
            }
            Op::Sigmoid(x) => acc(*x, g.zip_map(out, |gg, y| gg * y * (1.0 - y))),
            Op::Tanh(x) => acc(*x, g.zip_map(out, |gg, y| gg * (1.0 - y * y))),
            Op::Relu(x) => acc(*x, g.zip_map(val(*x), |gg, v| if v > 0.0 { gg } else { 0.0 })),
            Op::LeakyRelu(x, s) => {
                let s = *s;
                acc(*x, g.zip_map(val(*x), |gg, v| if v > 0.0 { gg } else { s * gg }));
            }
            Op::Abs(x) => acc(
                *x,
                g.zip_map(val(*x), |gg, v| {
                    if v > 0.0 {
                        gg
                    } else if v < 0.0 {
                        -gg
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Powf(x, e) => {
                let e = *e;
                acc(*x, g.zip_map(val(*x), |gg, v| gg * e * libm::pow(v, e - 1.0)));
            }
            Op::MaskedSoftmax(x) => {
                let (r, c) = (out.rows(), out.cols());
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out.data()[i * c..(i + 1) * c];
                    let gy = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = y[j] * (gy[j] - dot);
                    }
                }
                acc(*x, Tensor::matrix(r, c, dx));
            }
            Op::Mean(x, axis) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                let mut dx = vec![0.0; r * c];
                match axis {
                    Axis::Rows => {
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] = g.data()[j] / r as f64;
                            }
                        }
                    }
                    Axis::Cols => {
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] = g.data()[i] / c as f64;
                            }
                        }
                    }
                }
                acc(*x, Tensor::matrix(r, c, dx));
            }
            Op::Sum(x) => {
                let gv = g.item();
                acc(*x, val(*x).map(|_| gv));
            }
            Op::MatPow(x, p) => {
                let a = val(*x);
                let n = a.rows();
                let p = *p as usize;
                if p == 0 {
                    return;
                }
                let mut powers = Vec::with_capacity(p);
                powers.push(Tensor::eye(n));
                for k in 1..p {
                    powers.push(gemm(&powers[k - 1], false, a, false));
                }
                // d(A^p) = Σ_k A^k dA A^{p-1-k}
                let mut dx = Tensor::zeros(n, n);
                for k in 0..p {
                    let left = gemm(&powers[k], true, g, false);
                    dx.add_assign(&gemm(&left, false, &powers[p - 1 - k], true));
                }
                acc(*x, dx);
            }
            Op::Kron(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (ar, ac) = (av.rows(), av.cols());
                let (br, bc) = (bv.rows(), bv.cols());
                let c = ac * bc;
                let mut da = vec![0.0; ar * ac];
                let mut db = vec![0.0; br * bc];
                for i in 0..ar {
                    for j in 0..ac {
                        let aij = av.data()[i * ac + j];
                        let mut s = 0.0;
                        for p in 0..br {
                            for q in 0..bc {
                                let gg = g.data()[(i * br + p) * c + j * bc + q];
                                s += gg * bv.data()[p * bc + q];
                                db[p * bc + q] += gg * aij;
                            }
                        }
                        da[i * ac + j] = s;
                    }
                }
                acc(*a, Tensor::matrix(ar, ac, da));
                acc(*b, Tensor::matrix(br, bc, db));
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.cols();
                let mut dt = tv.zeros_like();
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt.data_mut()[id * d + j] += g.data()[r * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::Affine { x, w, b } => {
                if self.g(*x) {
                    acc(*x, gemm(g, false, val(*w), true));
                }
                if self.g(*w) {
                    acc(*w, gemm(val(*x), true, g, false));
                }
                if self.g(*b) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::matrix(1, c, db));
                }
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = xv.zeros_like();
                dx.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                acc(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let w = g.cols();
                let mut dx = xv.zeros_like();
                for i in 0..r {
                    dx.data_mut()[i * c + start..i * c + start + w]
                        .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if self.g(p) {
                        let mut dp = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            dp.extend_from_slice(&g.data()[i * total + off..i * total + off + pc]);
                        }
                        acc(p, Tensor::matrix(r, pc, dp));
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pr = val(p).rows();
                    if self.g(p) {
                        acc(
                            p,
                            Tensor::matrix(pr, c, g.data()[off * c..(off + pr) * c].to_vec()),
                        );
                    }
                    off += pr;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = (xhat.rows(), xhat.cols());
                let gv = val(*gain).data();
                if self.g(*gain) || self.g(*bias) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g.data()[i * c + j] * xhat.data()[i * c + j];
                            db[j] += g.data()[i * c + j];
                        }
                    }
                    acc(*gain, Tensor::matrix(1, c, dg));
                    acc(*bias, Tensor::matrix(1, c, db));
                }
                if self.g(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = g.data()[i * c + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat.data()[i * c + j];
                        }
                        for j in 0..c {
                            let dh = g.data()[i * c + j] * gv[j];
                            dx[i * c + j] = inv_std[i] / c as f64
                                * (c as f64 * dh - s1 - xhat.data()[i * c + j] * s2);
                        }
                    }
                    acc(*x, Tensor::matrix(r, c, dx));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (r, c) = (probs.rows(), probs.cols());
                let s = g.item() / r as f64;
                let mut dl = probs.data().to_vec();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * c + t] -= 1.0;
                }
                for v in &mut dl {
                    *v *= s;
                }
                acc(*logits, Tensor::matrix(r, c, dl));
            }
            Op::SmoothL1(x) => {
                acc(*x, g.zip_map(val(*x), |gg, v| gg * smooth_l1_derivative(v)));
            }
            Op::Reshape(x) => {
                let shape = val(*x).shape().to_vec();
                acc(*x, g.clone().reshape(shape).unwrap());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let i = t.constant(Tensor::eye(2));
        let y = t.matmul(a, i).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sigmoid_zero_is_half() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        assert_eq!(t.value(y).item(), 0.5);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn empty_softmax_support_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(2, 2));
        let err = t.masked_softmax(x, &[true, false, false, false]).unwrap_err();
        assert_eq!(err, Error::EmptySoftmaxSupport { row: 1 });
    }

    #[test]
    fn square_sum_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::row(&[3.0]));
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sigmoid_times_constant_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(0.0));
        let s = t.sigmoid(w);
        let y = t.scale(s, 4.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(w).unwrap().item(), 1.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(2, 1));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn unreachable_parameter_reports_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::row(&[1.0, 2.0]));
        let unused = t.param(Tensor::row(&[5.0]));
        let loss = t.sum(x);
        let g = t.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(&t, unused).data(), &[0.0]);
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_rows(&[[0.3, -0.7], [1.1, 0.2]]));
        let y = t.tanh(x);
        let z = t.matmul(y, x).unwrap();
        let loss = t.sum(z);
        let g1 = t.backward(loss).unwrap();
        let g2 = t.backward(loss).unwrap();
        assert_eq!(g1.get(x), g2.get(x));
    }

    #[test]
    fn masked_entries_are_exactly_zero_and_rows_normalised() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[[1.0, 50.0, -3.0], [0.2, 0.1, 9.0]]));
        let y = t
            .masked_softmax(x, &[true, false, true, true, true, false])
            .unwrap();
        let v = t.value(y);
        assert_eq!(v.get(0, 1), 0.0);
        assert_eq!(v.get(1, 2), 0.0);
        for r in 0..2 {
            assert!((v.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
