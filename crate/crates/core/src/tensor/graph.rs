use std::collections::HashMap;

use super::kernels::{gelu, gelu_grad, gemm, sigmoid, softmax_masked};
use super::ops::RotaryTable;
use super::param::{GradStore, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Size of one attention score matrix, recorded for every attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub queries: usize,
    pub keys: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Sin,
    Cos,
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Vec<f64>),
    ScaleRows(Var, Vec<f64>),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    PadRows(Var),
    Reshape(Var),
    Interleave(Var, Var),
    Rotate(Var, RotaryTable),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Build it with the op methods, call
/// [`Graph::backward`] on a scalar, then read gradients.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor>>,
    attention: Vec<AttentionShape>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
            grads: Vec::new(),
            attention: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            ..Graph::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .store
                .expect("param node without a store")
                .get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Every attention score matrix computed on this graph, in call order.
    pub fn attention_shapes(&self) -> &[AttentionShape] {
        &self.attention
    }

    // ---- leaves ---------------------------------------------------------

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input whose gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The store parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "graph was built without a parameter store");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn row_broadcast(
        &self,
        op: &'static str,
        x: Var,
        r: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (tx, tr) = (self.value(x), self.value(r));
        if tr.numel() != tx.cols() {
            return Err(Error::shape(op, tx.shape(), tr.shape()));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, tr.data()[i % c]))
            .collect();
        Ok(Tensor {
            shape: tx.shape().to_vec(),
            data,
        })
    }

    /// `x + b` with `b` (length = columns of `x`) added to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", x, b, |v, w| v + w)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    /// `x ⊙ r` with `r` multiplied into every row.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", x, r, |v, w| v * w)?;
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(out, Op::MulRow(x, r), rg))
    }

    /// `scale * x + offset`, element-wise.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| scale * v + offset).collect(),
        };
        let rg = self.rg(x);
        self.push(out, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Element-wise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if c.len() != t.numel() {
            return Err(Error::shape("mul_const", t.shape(), &[c.len()]));
        }
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().zip(&c).map(|(a, b)| a * b).collect(),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, c), rg))
    }

    /// Multiplies row `i` of `x` by the constant `weights[i]`.
    pub fn scale_rows(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if weights.len() != t.rows() {
            return Err(Error::shape("scale_rows", t.shape(), &[weights.len()]));
        }
        let c = t.cols();
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * weights[i / c.max(1)])
                .collect(),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::ScaleRows(x, weights), rg))
    }

    // ---- element-wise nonlinearities --------------------------------------

    pub(crate) fn unary(&mut self, x: Var, f: Unary) -> Var {
        let t = self.value(x);
        let map: fn(f64) -> f64 = match f {
            Unary::Relu => |v| v.max(0.0),
            Unary::Gelu => gelu,
            Unary::Sigmoid => sigmoid,
            Unary::Sin => f64::sin,
            Unary::Cos => f64::cos,
        };
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| map(v)).collect(),
        };
        let rg = self.rg(x);
        self.push(out, Op::Unary(x, f), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sin)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Cos)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = t.clone();
        let c = out.cols();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                softmax_masked(row, None);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Per-row standardisation followed by `* gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if n == 0 {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        if tg.numel() != n {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        if tb.numel() != n {
            return Err(Error::shape("layer_norm", tx.shape(), tb.shape()));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor {
            shape: tx.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- structural -------------------------------------------------------------

    /// Horizontal concatenation `a ‖ b ‖ …` of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, total, out), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Vertical concatenation `[a; b; …]` of matrices with equal widths.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), t.shape()));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, cols, out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start > end || end > t.rows() {
            return Err(Error::shape("slice_rows", t.shape(), &[start, end]));
        }
        let c = t.cols();
        let out = Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec());
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start > end || end > t.cols() {
            return Err(Error::shape("slice_cols", t.shape(), &[start, end]));
        }
        let (r, w) = (t.rows(), end - start);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(r, w, out), Op::SliceCols(x, start), rg))
    }

    /// Appends zero rows until the matrix has `total` rows.
    pub fn pad_rows(&mut self, x: Var, total: usize) -> Result<Var> {
        let t = self.value(x);
        if total < t.rows() {
            return Err(Error::shape("pad_rows", t.shape(), &[total]));
        }
        let c = t.cols();
        let mut out = t.data().to_vec();
        out.resize(total * c, 0.0);
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(total, c, out), Op::PadRows(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Column interleave: `out[:, 2j] = a[:, j]`, `out[:, 2j+1] = b[:, j]`.
    pub fn interleave_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("interleave_cols", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; r * 2 * c];
        for i in 0..r {
            for j in 0..c {
                out[i * 2 * c + 2 * j] = ta.get(i, j);
                out[i * 2 * c + 2 * j + 1] = tb.get(i, j);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(r, 2 * c, out), Op::Interleave(a, b), rg))
    }

    /// Applies a fixed per-row rotation and scaling to adjacent column pairs.
    pub fn rotate_pairs(&mut self, x: Var, table: RotaryTable) -> Result<Var> {
        let t = self.value(x);
        if table.rows() != t.rows() || table.width() != t.cols() {
            return Err(Error::shape(
                "rotate_pairs",
                t.shape(),
                &[table.rows(), table.width()],
            ));
        }
        let out = table.apply(t, false);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Rotate(x, table), rg))
    }

    // ---- attention ------------------------------------------------------------

    /// Multi-head scaled dot-product attention over pre-projected inputs.
    ///
    /// `q` is `m x heads*d_k`, `k` is `n x heads*d_k`, `v` is `n x heads*d_v`.
    /// Each head attends with `softmax(q_h k_hᵀ / sqrt(d_k)) v_h`; heads are
    /// concatenated into an `m x heads*d_v` result. Keys whose `key_mask`
    /// entry is false receive no weight; a query with no visible key
    /// produces a zero row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (m, n) = (tq.rows(), tk.rows());
        if heads == 0
            || tq.cols() != tk.cols()
            || tq.cols() % heads != 0
            || tv.cols() % heads != 0
        {
            return Err(Error::shape("attention", tq.shape(), tk.shape()));
        }
        if tv.rows() != n {
            return Err(Error::shape("attention", tk.shape(), tv.shape()));
        }
        if let Some(mask) = key_mask {
            if mask.len() != n {
                return Err(Error::shape("attention", tk.shape(), &[mask.len()]));
            }
        }
        let dk = tq.cols() / heads;
        let dv = tv.cols() / heads;
        let hk = tq.cols();
        let hv = tv.cols();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut probs = vec![0.0; heads * m * n];
        let mut out = vec![0.0; m * hv];
        for h in 0..heads {
            let p = &mut probs[h * m * n..(h + 1) * m * n];
            for i in 0..m {
                let qi = &tq.row(i)[h * dk..(h + 1) * dk];
                for j in 0..n {
                    let kj = &tk.row(j)[h * dk..(h + 1) * dk];
                    p[i * n + j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_masked(&mut p[i * n..(i + 1) * n], key_mask);
                for j in 0..n {
                    let w = p[i * n + j];
                    if w == 0.0 {
                        continue;
                    }
                    let vj = &tv.row(j)[h * dv..(h + 1) * dv];
                    let oi = &mut out[i * hv + h * dv..i * hv + (h + 1) * dv];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
        }
        debug_assert_eq!(hk, heads * dk);
        self.attention.push(AttentionShape {
            queries: m,
            keys: n,
        });
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::matrix(m, hv, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    // ---- reductions and losses -------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `targets`.
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]` before the logs.
    pub fn bce(&mut self, p: Var, targets: Vec<f64>) -> Result<Var> {
        let t = self.value(p);
        if t.numel() != targets.len() || targets.is_empty() {
            return Err(Error::shape("bce", t.shape(), &[targets.len()]));
        }
        let n = targets.len() as f64;
        let loss = t
            .data()
            .iter()
            .zip(&targets)
            .map(|(&p, &y)| {
                let p = clamp_prob(p);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, targets }, rg))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Gradients of earlier passes on the
    /// same graph are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass; zeros for nodes it did not reach.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(self.shape(v)),
        }
    }

    /// Adds the parameter gradients of the last backward pass into `out`.
    pub fn accumulate_param_grads(&self, out: &mut GradStore) {
        for (&id, &v) in &self.param_vars {
            if let Some(Some(g)) = self.grads.get(v.0) {
                out.accumulate(id, g);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let out = self.value(Var(i));
        let like = |v: Var, data: Vec<f64>| Tensor {
            shape: self.shape(v).to_vec(),
            data,
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                    acc(*a, like(*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                    acc(*b, like(*b, db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, like(*b, g.data().iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, like(*a, zip_mul(g.data(), tb.data())));
                }
                if self.rg(*b) {
                    acc(*b, like(*b, zip_mul(g.data(), ta.data())));
                }
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                if self.rg(*b) {
                    acc(*b, like(*b, col_sums(g.data(), g.cols())));
                }
            }
            Op::MulRow(x, r) => {
                let (tx, tr) = (self.value(*x), self.value(*r));
                let c = tx.cols();
                if self.rg(*x) {
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, v)| v * tr.data()[j % c])
                        .collect();
                    acc(*x, like(*x, d));
                }
                if self.rg(*r) {
                    acc(*r, like(*r, col_sums(&zip_mul(g.data(), tx.data()), c)));
                }
            }
            Op::Affine(x, s) => acc(*x, like(*x, g.data().iter().map(|v| v * s).collect())),
            Op::MulConst(x, c) => acc(*x, like(*x, zip_mul(g.data(), c))),
            Op::ScaleRows(x, w) => {
                let c = g.cols().max(1);
                let d = g.data().iter().enumerate().map(|(j, v)| v * w[j / c]).collect();
                acc(*x, like(*x, d));
            }
            Op::Unary(x, f) => {
                let tx = self.value(*x);
                let d = tx
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&xv, &yv), &gv)| {
                        gv * match f {
                            Unary::Relu => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Gelu => gelu_grad(xv),
                            Unary::Sigmoid => yv * (1.0 - yv),
                            Unary::Sin => xv.cos(),
                            Unary::Cos => -xv.sin(),
                        }
                    })
                    .collect();
                acc(*x, like(*x, d));
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                let mut d = vec![0.0; out.numel()];
                if c > 0 {
                    for ((dr, yr), gr) in d
                        .chunks_mut(c)
                        .zip(out.data().chunks(c))
                        .zip(g.data().chunks(c))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                acc(*x, like(*x, d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = out.cols();
                let rows = out.rows();
                let tg = self.value(*gain);
                if self.rg(*gain) {
                    acc(*gain, like(*gain, col_sums(&zip_mul(g.data(), xhat), n)));
                }
                if self.rg(*bias) {
                    acc(*bias, like(*bias, col_sums(g.data(), n)));
                }
                if self.rg(*x) {
                    let mut d = vec![0.0; rows * n];
                    for r in 0..rows {
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = (0..n).map(|j| gr[j] * tg.data()[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            d[r * n + j] = rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    acc(*x, like(*x, d));
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        acc(p, like(p, d));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.rg(p) {
                        acc(p, like(p, g.data()[off..off + len].to_vec()));
                    }
                    off += len;
                }
            }
            Op::SliceRows(x, start) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.numel()];
                d[start * c..start * c + g.numel()].copy_from_slice(g.data());
                acc(*x, like(*x, d));
            }
            Op::SliceCols(x, start) => {
                let tx = self.value(*x);
                let (c, w) = (tx.cols(), g.cols());
                let mut d = vec![0.0; tx.numel()];
                for r in 0..tx.rows() {
                    d[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                }
                acc(*x, like(*x, d));
            }
            Op::PadRows(x) => {
                let len = self.value(*x).numel();
                acc(*x, like(*x, g.data()[..len].to_vec()));
            }
            Op::Reshape(x) => acc(*x, like(*x, g.data().to_vec())),
            Op::Interleave(a, b) => {
                let (r, c) = (g.rows(), g.cols() / 2);
                let mut da = vec![0.0; r * c];
                let mut db = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g.get(i, 2 * j);
                        db[i * c + j] = g.get(i, 2 * j + 1);
                    }
                }
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::Rotate(x, table) => acc(*x, table.apply(g, true)),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (m, n) = (tq.rows(), tk.rows());
                let (hk, hv) = (tq.cols(), tv.cols());
                let (dk, dv) = (hk / heads, hv / heads);
                let scale = 1.0 / (dk as f64).sqrt();
                let mut dq = vec![0.0; m * hk];
                let mut dkm = vec![0.0; n * hk];
                let mut dvm = vec![0.0; n * hv];
                let mut ds = vec![0.0; n];
                for h in 0..*heads {
                    let p = &probs[h * m * n..(h + 1) * m * n];
                    for i in 0..m {
                        let gi = &g.row(i)[h * dv..(h + 1) * dv];
                        let pi = &p[i * n..(i + 1) * n];
                        // dP = dO · Vᵀ, then dS = P ⊙ (dP - <dP, P>)
                        let mut dot = 0.0;
                        for j in 0..n {
                            let vj = &tv.row(j)[h * dv..(h + 1) * dv];
                            let dp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            ds[j] = dp;
                            dot += dp * pi[j];
                        }
                        for j in 0..n {
                            ds[j] = pi[j] * (ds[j] - dot) * scale;
                        }
                        let qi = &tq.row(i)[h * dk..(h + 1) * dk];
                        for j in 0..n {
                            if pi[j] == 0.0 {
                                continue;
                            }
                            let kj = &tk.row(j)[h * dk..(h + 1) * dk];
                            let dqi = &mut dq[i * hk + h * dk..i * hk + (h + 1) * dk];
                            for (d, x) in dqi.iter_mut().zip(kj) {
                                *d += ds[j] * x;
                            }
                            let dkj = &mut dkm[j * hk + h * dk..j * hk + (h + 1) * dk];
                            for (d, x) in dkj.iter_mut().zip(qi) {
                                *d += ds[j] * x;
                            }
                            let dvj = &mut dvm[j * hv + h * dv..j * hv + (h + 1) * dv];
                            for (d, x) in dvj.iter_mut().zip(gi) {
                                *d += pi[j] * x;
                            }
                        }
                    }
                }
                acc(*q, like(*q, dq));
                acc(*k, like(*k, dkm));
                acc(*v, like(*v, dvm));
            }
            Op::Sum(x) => {
                let gv = g.item();
                let n = self.value(*x).numel();
                acc(*x, like(*x, vec![gv; n]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let gv = g.item() / n.max(1) as f64;
                acc(*x, like(*x, vec![gv; n]));
            }
            Op::Bce { p, targets } => {
                let gv = g.item();
                let n = targets.len() as f64;
                let d = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| {
                        if clamp_prob(p) != p {
                            0.0
                        } else {
                            gv * (-y / p + (1.0 - y) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                acc(*p, like(*p, d));
            }
        }
    }
}

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(1e-7, 1.0 - 1e-7)
}

fn zip_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn col_sums(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    if cols == 0 {
        return out;
    }
    for row in data.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
