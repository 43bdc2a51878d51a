use super::graph::{Graph, Unary, Var};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

impl Graph<'_> {
    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let f = match kind {
            Activation::Relu => Unary::Relu,
            Activation::Gelu => Unary::Gelu,
            Activation::Sigmoid => Unary::Sigmoid,
        };
        self.unary(x, f)
    }

    /// `x · w + b` for a weight matrix `w` and bias vector `b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }
}

/// Weights of a gated feed-forward block with a GELU gate.
#[derive(Clone, Copy, Debug)]
pub struct GegluParams {
    pub w_value: Var,
    pub b_value: Var,
    pub w_gate: Var,
    pub b_gate: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// `((x W_v + b_v) ⊙ GELU(x W_g + b_g)) W_o + b_o`.
pub fn geglu_ffn(g: &mut Graph<'_>, x: Var, p: &GegluParams) -> Result<Var> {
    let value = g.linear(x, p.w_value, p.b_value)?;
    let gate = g.linear(x, p.w_gate, p.b_gate)?;
    let gate = g.gelu(gate);
    let hidden = g.mul(value, gate)?;
    g.linear(hidden, p.w_out, p.b_out)
}

/// Per-row rotation of adjacent column pairs with a per-pair scale, the
/// building block of rotary and extrapolatable (xPos) position encodings.
///
/// The transform is laid out per head: within each `head_dim`-wide slice,
/// columns `(2i, 2i+1)` form pair `i`. A trailing odd column is left as is.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryTable {
    rows: usize,
    heads: usize,
    head_dim: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    scale: Vec<f64>,
}

impl RotaryTable {
    pub fn identity(rows: usize, heads: usize, head_dim: usize) -> Self {
        let n = rows * head_dim / 2;
        RotaryTable {
            rows,
            heads,
            head_dim,
            cos: vec![1.0; n],
            sin: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// xPos table for the given absolute positions.
    ///
    /// Pair `i` rotates by `pos · 10000^(-2i/head_dim)` and scales by
    /// `ζ_i^(±pos/scale_base)` with `ζ_i = (2i + 0.4·head_dim) / (1.4·head_dim)`;
    /// queries take the positive exponent and keys the negative one, so a
    /// query-key product depends only on the position difference.
    pub fn xpos(
        positions: &[f64],
        heads: usize,
        head_dim: usize,
        scale_base: f64,
        is_query: bool,
    ) -> Self {
        let half = head_dim / 2;
        let rows = positions.len();
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        let mut scale = Vec::with_capacity(rows * half);
        let dim = head_dim as f64;
        let sign = if is_query { 1.0 } else { -1.0 };
        for &pos in positions {
            for i in 0..half {
                let inv_freq = 10000f64.powf(-(2.0 * i as f64) / dim);
                let angle = pos * inv_freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
                let zeta = (2.0 * i as f64 + 0.4 * dim) / (1.4 * dim);
                scale.push(zeta.powf(sign * pos / scale_base));
            }
        }
        RotaryTable {
            rows,
            heads,
            head_dim,
            cos,
            sin,
            scale,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Applies the transform (or its transpose, for gradients).
    pub(crate) fn apply(&self, x: &Tensor, transpose: bool) -> Tensor {
        let width = self.width();
        let half = self.head_dim / 2;
        let mut out = x.data().to_vec();
        for r in 0..self.rows {
            for h in 0..self.heads {
                for i in 0..half {
                    let t = r * half + i;
                    let (c, s, k) = (self.cos[t], self.sin[t], self.scale[t]);
                    let a = r * width + h * self.head_dim + 2 * i;
                    let (x0, x1) = (x.data()[a], x.data()[a + 1]);
                    if transpose {
                        out[a] = k * (x0 * c + x1 * s);
                        out[a + 1] = k * (-x0 * s + x1 * c);
                    } else {
                        out[a] = k * (x0 * c - x1 * s);
                        out[a + 1] = k * (x0 * s + x1 * c);
                    }
                }
            }
        }
        Tensor {
            shape: x.shape().to_vec(),
            data: out,
        }
    }
}

impl Graph<'_> {
    /// Multi-head attention with xPos applied to queries and keys.
    ///
    /// `query_pos` and `key_pos` give each row's absolute position; only
    /// their differences influence the result.
    #[allow(clippy::too_many_arguments)]
    pub fn xpos_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        query_pos: &[f64],
        key_pos: &[f64],
        scale_base: f64,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let width = self.value(q).cols();
        if heads == 0 || width % heads != 0 {
            return Err(Error::shape("xpos_attention", self.shape(q), &[heads]));
        }
        let head_dim = width / heads;
        let qt = RotaryTable::xpos(query_pos, heads, head_dim, scale_base, true);
        let kt = RotaryTable::xpos(key_pos, heads, head_dim, scale_base, false);
        let q = self.rotate_pairs(q, qt)?;
        let k = self.rotate_pairs(k, kt)?;
        self.attention(q, k, v, heads, key_mask)
    }
}
