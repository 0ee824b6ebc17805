//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. Nodes are created in topological order, so the backward
//! pass simply walks the node list in reverse and pushes each adjoint onto
//! its parents.

use super::special;
use super::value::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Softplus,
    Lgamma,
    Digamma,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Binary(BinaryKind, Var, Var),
    AddRowBias(Var, Var),
    Unary(UnaryKind, Var),
    Scale(Var, f64),
    AddConst(Var),
    ClampMin(Var, f64),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    NormalizeRows { x: Var, sums: Vec<f64> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RepeatRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Epsilon added to the variance inside layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Recording of a computation; rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

// c[n×m] = beta·c + a·b, with arbitrary strides on a and b.
#[allow(clippy::too_many_arguments)]
fn gemm(
    n: usize,
    k: usize,
    m: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= n * m);
    // SAFETY: index bounds follow from the extents and strides, which every
    // caller derives from the shapes of the slices passed in.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sum that does not depend on the order of `values`.
fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|_| {
            Error::shape(op, format!("expected a matrix, got shape {:?}", self.shape(v)))
        })
    }

    // ----------------------------------------------------------------- linear algebra

    /// `a [n×k] · b [k×m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a, "matmul")?;
        let (k2, m) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{n}×{k}] · [{k2}×{m}]")));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), (k, 1), self.value(b).data(), (m, 1), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), rg))
    }

    /// `a [n×k] · bᵀ` for `b [m×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a, "matmul_bt")?;
        let (m, k2) = self.dims(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", format!("[{n}×{k}] · [{m}×{k2}]ᵀ")));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), (k, 1), self.value(b).data(), (1, k), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMulBt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims(a, "transpose")?;
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    // ----------------------------------------------------------------- elementwise

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = if va.shape() == vb.shape() || vb.len() == 1 {
            va.shape().to_vec()
        } else if va.len() == 1 {
            vb.shape().to_vec()
        } else {
            return Err(Error::shape(
                "elementwise",
                format!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape()),
            ));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let (sa, sb) = (da.len() == 1 && n > 1, db.len() == 1 && n > 1);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<f64> = (0..n)
            .map(|i| f(if sa { da[0] } else { da[i] }, if sb { db[0] } else { db[i] }))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// `x [n×m] + b [1×m]` with `b` repeated over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.dims(x, "add_row_bias")?;
        if self.value(b).len() != m {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} against [{n}×{m}]", self.shape(b)),
            ));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, bj) in row.iter_mut().zip(bias) {
                *o += bj;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::AddRowBias(x, b), rg))
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let v = self.value(a);
        match kind {
            UnaryKind::Log if v.data().iter().any(|&x| !(x > 0.0)) => {
                return Err(Error::domain("log", "non-positive input"));
            }
            UnaryKind::Lgamma | UnaryKind::Digamma if v.data().iter().any(|&x| !(x > 0.0)) => {
                return Err(Error::domain("lgamma/digamma", "non-positive input"));
            }
            _ => {}
        }
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Neg => |x| -x,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Relu => |x| x.max(0.0),
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Softplus => softplus,
            UnaryKind::Lgamma => special::ln_gamma,
            UnaryKind::Digamma => special::digamma,
        };
        let out = v.map(f);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Unary(kind, a), rg))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, a)
    }

    /// Elementwise `ln Γ(x)`; the adjoint uses digamma.
    pub fn lgamma(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Lgamma, a)
    }

    /// Elementwise `ψ(x)`; the adjoint uses trigamma.
    pub fn digamma(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Digamma, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        Ok(self.push(out, Op::AddConst(a), rg))
    }

    /// `max(x, lo)`; no gradient flows through clamped entries.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(lo));
        let rg = self.rg(a);
        Ok(self.push(out, Op::ClampMin(a, lo), rg))
    }

    // ----------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.sum() / v.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(a), rg))
    }

    /// Row sums: `[n×m] → [n×1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a, "sum_cols")?;
        let out: Vec<f64> = self.value(a).data().chunks(m).map(|r| r.iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![n, 1], out), Op::SumCols(a), rg))
    }

    /// Column means: `[n×m] → [1×m]`. The result does not depend on row
    /// order, bit for bit.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a, "mean_rows")?;
        let data = self.value(a).data();
        let mut col = vec![0.0; n];
        let out: Vec<f64> = (0..m)
            .map(|j| {
                for (i, c) in col.iter_mut().enumerate() {
                    *c = data[i * m + j];
                }
                order_free_sum(&mut col) / n as f64
            })
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![1, m], out), Op::MeanRows(a), rg))
    }

    // ----------------------------------------------------------------- row-wise maps

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a, "softmax_rows")?;
        let v = self.value(a);
        if !v.is_finite() {
            return Err(Error::numeric("softmax_rows", "non-finite logits"));
        }
        let mut out = vec![0.0; n * m];
        for (row, o) in v.data().chunks(m).zip(out.chunks_mut(m)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (oj, &x) in o.iter_mut().zip(row) {
                *oj = (x - mx).exp();
                s += *oj;
            }
            for oj in o.iter_mut() {
                *oj /= s;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::SoftmaxRows(a), rg))
    }

    /// Divides every row by its sum. Rows must have a positive sum.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a, "normalize_rows")?;
        let v = self.value(a);
        let mut out = v.data().to_vec();
        let mut sums = Vec::with_capacity(n);
        for row in out.chunks_mut(m) {
            let s: f64 = row.iter().sum();
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::numeric("normalize_rows", format!("row sum {s}")));
            }
            for x in row.iter_mut() {
                *x /= s;
            }
            sums.push(s);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::NormalizeRows { x: a, sums }, rg))
    }

    /// Row-wise layer normalisation with learned gain and bias (`[1×m]` each).
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.dims(x, "layer_norm_rows")?;
        if m < 2 {
            return Err(Error::shape("layer_norm_rows", "row length must be at least 2"));
        }
        if self.value(gain).len() != m || self.value(bias).len() != m {
            return Err(Error::shape("layer_norm_rows", "affine parameters must match row length"));
        }
        let v = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = Vec::with_capacity(n);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &v[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..m {
                let h = (row[j] - mean) * is;
                xhat[i * m + j] = h;
                out[i * m + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            rg,
        ))
    }

    // ----------------------------------------------------------------- shape plumbing

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "nothing to concatenate"));
        }
        let n = self.dims(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat_cols")?;
            if r != n {
                return Err(Error::shape("concat_cols", format!("row counts {n} and {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(vec![n, total], out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.dims(a, "slice_cols")?;
        if len == 0 || start + len > m {
            return Err(Error::shape("slice_cols", format!("{start}+{len} out of {m}")));
        }
        let v = self.value(a).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&v[i * m + start..i * m + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![n, len], out), Op::SliceCols(a, start), rg))
    }

    /// Stacks `n` copies of a `[1×m]` row.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, m) = self.dims(a, "repeat_rows")?;
        if r != 1 || n == 0 {
            return Err(Error::shape("repeat_rows", format!("expected [1×m], got [{r}×{m}]")));
        }
        let out = self.value(a).data().repeat(n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::RepeatRows(a), rg))
    }

    // ----------------------------------------------------------------- backward

    /// Reverse sweep from the single-element `loss`.
    ///
    /// Every node that requires gradients gets one, zero-filled when the
    /// loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must hold a single value"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.requires_grad.then(|| match g {
                    Some(g) => Tensor::from_parts(node.value.shape().to_vec(), g),
                    None => Tensor::zeros(node.value.shape()),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        // Accumulate into a parent's adjoint buffer, allocating on first use.
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let len = self.value(v).len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.value(*a).rows(), self.value(*a).cols());
                let m = self.value(*b).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &mut |da| gemm(n, m, k, g, (m, 1), bv, (1, m), 1.0, da));
                acc(grads, *b, &mut |db| gemm(k, n, m, av, (1, k), g, (m, 1), 1.0, db));
            }
            Op::MatMulBt(a, b) => {
                let (n, k) = (self.value(*a).rows(), self.value(*a).cols());
                let m = self.value(*b).rows();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &mut |da| gemm(n, m, k, g, (m, 1), bv, (k, 1), 1.0, da));
                acc(grads, *b, &mut |db| gemm(m, n, k, g, (1, m), av, (k, 1), 1.0, db));
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                acc(grads, *a, &mut |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let n = g.len();
                let at = |i: usize| if av.len() == 1 { av[0] } else { av[i] };
                let bt = |i: usize| if bv.len() == 1 { bv[0] } else { bv[i] };
                let da_elem = |i: usize| match kind {
                    BinaryKind::Add | BinaryKind::Sub => g[i],
                    BinaryKind::Mul => g[i] * bt(i),
                    BinaryKind::Div => g[i] / bt(i),
                };
                let db_elem = |i: usize| match kind {
                    BinaryKind::Add => g[i],
                    BinaryKind::Sub => -g[i],
                    BinaryKind::Mul => g[i] * at(i),
                    BinaryKind::Div => -g[i] * at(i) / (bt(i) * bt(i)),
                };
                acc(grads, *a, &mut |da| {
                    if da.len() == 1 && n > 1 {
                        da[0] += (0..n).map(da_elem).sum::<f64>();
                    } else {
                        for (i, d) in da.iter_mut().enumerate() {
                            *d += da_elem(i);
                        }
                    }
                });
                acc(grads, *b, &mut |db| {
                    if db.len() == 1 && n > 1 {
                        db[0] += (0..n).map(db_elem).sum::<f64>();
                    } else {
                        for (i, d) in db.iter_mut().enumerate() {
                            *d += db_elem(i);
                        }
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                acc(grads, *x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
                let m = self.value(*b).len();
                acc(grads, *b, &mut |db| {
                    for row in g.chunks(m) {
                        for (d, gi) in db.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                acc(grads, *a, &mut |da| {
                    for i in 0..da.len() {
                        let local = match kind {
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Exp => y[i],
                            UnaryKind::Log => 1.0 / x[i],
                            UnaryKind::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryKind::Softplus => sigmoid(x[i]),
                            UnaryKind::Lgamma => special::digamma(x[i]),
                            UnaryKind::Digamma => special::trigamma(x[i]),
                        };
                        da[i] += g[i] * local;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(grads, *a, &mut |da| da.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi));
            }
            Op::AddConst(a) => {
                acc(grads, *a, &mut |da| da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
            }
            Op::ClampMin(a, lo) => {
                let x = self.value(*a).data();
                acc(grads, *a, &mut |da| {
                    for i in 0..da.len() {
                        if x[i] >= *lo {
                            da[i] += g[i];
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                acc(grads, *a, &mut |da| da.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                acc(grads, *a, &mut |da| da.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumCols(a) => {
                let m = self.value(*a).cols();
                acc(grads, *a, &mut |da| {
                    for (row, gi) in da.chunks_mut(m).zip(g) {
                        row.iter_mut().for_each(|d| *d += gi);
                    }
                });
            }
            Op::MeanRows(a) => {
                let (n, m) = (self.value(*a).rows(), self.value(*a).cols());
                acc(grads, *a, &mut |da| {
                    for row in da.chunks_mut(m) {
                        for (d, gj) in row.iter_mut().zip(g) {
                            *d += gj / n as f64;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let m = self.value(*a).cols();
                acc(grads, *a, &mut |da| {
                    for ((drow, grow), yrow) in da.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::NormalizeRows { x, sums } => {
                let m = self.value(*x).cols();
                acc(grads, *x, &mut |dx| {
                    for (i, ((drow, grow), yrow)) in
                        dx.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m)).enumerate()
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            drow[j] += (grow[j] - dot) / sums[i];
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let m = self.value(*x).cols();
                let gv = self.value(*gain).data();
                acc(grads, *gain, &mut |dg| {
                    for (grow, hrow) in g.chunks(m).zip(xhat.chunks(m)) {
                        for j in 0..m {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(grads, *bias, &mut |db| {
                    for grow in g.chunks(m) {
                        db.iter_mut().zip(grow).for_each(|(d, gi)| *d += gi);
                    }
                });
                acc(grads, *x, &mut |dx| {
                    let mut dh = vec![0.0; m];
                    for (i, (grow, hrow)) in g.chunks(m).zip(xhat.chunks(m)).enumerate() {
                        for j in 0..m {
                            dh[j] = grow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / m as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            dx[i * m + j] += inv_std[i] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(grads, p, &mut |dp| {
                        for (i, row) in dp.chunks_mut(w).enumerate() {
                            for (j, d) in row.iter_mut().enumerate() {
                                *d += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let m = self.value(*a).cols();
                let len = node.value.cols();
                acc(grads, *a, &mut |da| {
                    for (i, grow) in g.chunks(len).enumerate() {
                        for (j, gj) in grow.iter().enumerate() {
                            da[i * m + start + j] += gj;
                        }
                    }
                });
            }
            Op::RepeatRows(a) => {
                let m = self.value(*a).cols();
                acc(grads, *a, &mut |da| {
                    for grow in g.chunks(m) {
                        da.iter_mut().zip(grow).for_each(|(d, gi)| *d += gi);
                    }
                });
            }
        }
    }
}
