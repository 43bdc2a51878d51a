//! Block-recurrent transformer over the paired input `Z` (`L × D`).
//!
//! `Z` is cut into blocks of `B` rows processed in order. Each block runs one
//! horizontal cell, which updates the recurrent state vectors `C`, and one
//! vertical cell, which produces the block output `O_b`. Keys and values of
//! the previous block are cached and attended to by the next block, across
//! segment boundaries as well; gradients flow through state and cache.
//!
//! Horizontal cell, with `C̄ = LN_h(C) + W_p` and `Z̄ = LN_in(Z_b)`:
//!
//! ```text
//! K_b = Z̄ W_KZ, V_b = Z̄ W_VZ
//! A1  = MH(C̄ W_Q1, C̄ W_KC, C̄ W_VC)
//! A2  = MH(C̄ W_Q2, [K_prev; K_b], [V_prev; V_b])
//! P_h = (A1 ‖ A2) W_h + b_h
//! N   = C ⊙ σ(b_g) + P_h ⊙ (1 − σ(b_g))
//! ```
//!
//! Vertical cell, with `N̄ = LN_v(N) + W_p`:
//!
//! ```text
//! A3  = xPos-MH(Z̄ W_Q3, [K_prev; K_b], [V_prev; V_b])
//! A4  = MH(Z̄ W_Q4, N̄ W_KC, N̄ W_VC)
//! P_v = (A3 ‖ A4) W_v + b_v
//! O_b = GEGLU(P_v + Z_b) + P_v + Z_b
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{dropout, LayerNorm, Linear};
use crate::tensor::{geglu_ffn, GegluParams, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BrtConfig {
    /// Model width `D` (`8d` in the full model).
    pub width: usize,
    pub block: usize,
    pub segment: usize,
    pub states: usize,
    pub heads: usize,
    /// GEGLU hidden width as a multiple of `D`.
    pub ffn_mult: usize,
    pub ln_eps: f64,
    pub xpos_base: f64,
    /// Dropout on attention outputs during training.
    pub dropout: f64,
}

impl BrtConfig {
    pub fn new(width: usize) -> Self {
        BrtConfig {
            width,
            block: 16,
            segment: 32,
            states: 32,
            heads: 4,
            ffn_mult: 2,
            ln_eps: 1e-5,
            xpos_base: 512.0,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.block == 0 || self.states == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("BRT width, block, states, heads and ffn_mult must be positive".into()));
        }
        if self.segment == 0 || self.segment % self.block != 0 {
            return Err(Error::Config(format!(
                "segment size {} must be a positive multiple of block size {}",
                self.segment, self.block
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Per-head key and value width.
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Largest attention matrix any call may build: `max(states, B) × (2B + states)`.
    pub fn attention_bound(&self) -> (usize, usize) {
        (self.states.max(self.block), 2 * self.block + self.states)
    }
}

#[derive(Clone, Debug)]
pub struct CellParams {
    pub ln_in: LayerNorm,
    pub ln_h: LayerNorm,
    pub ln_v: LayerNorm,
    pub w_p: ParamId,
    pub w_q1: ParamId,
    pub w_q2: ParamId,
    pub w_kc: ParamId,
    pub w_vc: ParamId,
    pub w_h: Linear,
    pub b_g: ParamId,
    pub w_q3: ParamId,
    pub w_q4: ParamId,
    pub w_kz: ParamId,
    pub w_vz: ParamId,
    pub w_v: Linear,
    pub ffn: [Linear; 3],
}

impl CellParams {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &BrtConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let hd = cfg.heads * cfg.head_dim();
        let hidden = cfg.ffn_mult * d;
        let mut w = |name: &str, rows: usize, cols: usize| store.add_weight(format!("brt/{name}"), rows, cols, rng);
        let w_p = w("w_p", cfg.states, d)?;
        let w_q1 = w("w_q1", d, hd)?;
        let w_q2 = w("w_q2", d, hd)?;
        let w_kc = w("w_kc", d, hd)?;
        let w_vc = w("w_vc", d, hd)?;
        let w_q3 = w("w_q3", d, hd)?;
        let w_q4 = w("w_q4", d, hd)?;
        let w_kz = w("w_kz", d, hd)?;
        let w_vz = w("w_vz", d, hd)?;
        Ok(CellParams {
            ln_in: LayerNorm::new(store, "brt/ln_in", d, cfg.ln_eps)?,
            ln_h: LayerNorm::new(store, "brt/ln_h", d, cfg.ln_eps)?,
            ln_v: LayerNorm::new(store, "brt/ln_v", d, cfg.ln_eps)?,
            w_p,
            w_q1,
            w_q2,
            w_kc,
            w_vc,
            w_h: Linear::new(store, "brt/w_h", 2 * hd, d, rng)?,
            b_g: store.add("brt/b_g", Tensor::full(&[d], 1.0))?,
            w_q3,
            w_q4,
            w_kz,
            w_vz,
            w_v: Linear::new(store, "brt/w_v", 2 * hd, d, rng)?,
            ffn: [
                Linear::new(store, "brt/ffn_value", d, hidden, rng)?,
                Linear::new(store, "brt/ffn_gate", d, hidden, rng)?,
                Linear::new(store, "brt/ffn_out", hidden, d, rng)?,
            ],
        })
    }
}

/// Keys and values of the previous block plus their validity.
#[derive(Clone, Debug)]
pub struct KvCache {
    pub k: Var,
    pub v: Var,
    pub mask: Vec<bool>,
}

/// Recurrent memory carried from block to block.
#[derive(Clone, Debug)]
pub struct RecurrentState {
    /// `states × D`.
    pub c: Var,
    pub cache: Option<KvCache>,
}

impl RecurrentState {
    pub fn initial(g: &mut Graph<'_>, cfg: &BrtConfig) -> Self {
        RecurrentState {
            c: g.constant(Tensor::zeros(&[cfg.states, cfg.width])),
            cache: None,
        }
    }
}

pub struct HorizontalOut {
    pub n: Var,
    pub k_b: Var,
    pub v_b: Var,
    /// `LN_in(Z_b)`, shared with the vertical cell.
    pub z_norm: Var,
}

/// Attention-output dropout source; `None` disables dropout.
pub type DropoutRng<'a> = Option<&'a mut dyn rand::RngCore>;

fn drop_attn(g: &mut Graph<'_>, x: Var, p: f64, rng: &mut DropoutRng<'_>) -> Result<Var> {
    match rng {
        Some(r) => dropout(g, x, p, Some(&mut **r)),
        None => Ok(x),
    }
}

fn with_cache(g: &mut Graph<'_>, cache: Option<&KvCache>, k: Var, v: Var, mask: &[bool]) -> Result<(Var, Var, Vec<bool>)> {
    match cache {
        None => Ok((k, v, mask.to_vec())),
        Some(c) => {
            let keys = g.concat_rows(&[c.k, k])?;
            let vals = g.concat_rows(&[c.v, v])?;
            let mut m = c.mask.clone();
            m.extend_from_slice(mask);
            Ok((keys, vals, m))
        }
    }
}

fn proj(g: &mut Graph<'_>, x: Var, w: ParamId) -> Result<Var> {
    let w = g.param(w);
    g.matmul(x, w)
}

#[allow(clippy::too_many_arguments)]
pub fn horizontal_cell(
    g: &mut Graph<'_>,
    p: &CellParams,
    cfg: &BrtConfig,
    c: Var,
    z_b: Var,
    z_mask: &[bool],
    cache: Option<&KvCache>,
    rng: &mut DropoutRng<'_>,
) -> Result<HorizontalOut> {
    let w_p = g.param(p.w_p);
    let c_norm = p.ln_h.forward(g, c)?;
    let c_bar = g.add(c_norm, w_p)?;
    let z_norm = p.ln_in.forward(g, z_b)?;
    let k_b = proj(g, z_norm, p.w_kz)?;
    let v_b = proj(g, z_norm, p.w_vz)?;

    let q1 = proj(g, c_bar, p.w_q1)?;
    let k1 = proj(g, c_bar, p.w_kc)?;
    let v1 = proj(g, c_bar, p.w_vc)?;
    let a1 = g.attention(q1, k1, v1, cfg.heads, None)?;
    let a1 = drop_attn(g, a1, cfg.dropout, rng)?;

    let (keys, vals, mask) = with_cache(g, cache, k_b, v_b, z_mask)?;
    let q2 = proj(g, c_bar, p.w_q2)?;
    let a2 = g.attention(q2, keys, vals, cfg.heads, Some(&mask))?;
    let a2 = drop_attn(g, a2, cfg.dropout, rng)?;

    let a = g.concat_cols(&[a1, a2])?;
    let p_h = p.w_h.forward(g, a)?;
    let b_g = g.param(p.b_g);
    let keep = g.sigmoid(b_g);
    let update = g.affine(keep, -1.0, 1.0);
    let kept = g.mul_row(c, keep)?;
    let fresh = g.mul_row(p_h, update)?;
    let n = g.add(kept, fresh)?;
    Ok(HorizontalOut { n, k_b, v_b, z_norm })
}

#[allow(clippy::too_many_arguments)]
pub fn vertical_cell(
    g: &mut Graph<'_>,
    p: &CellParams,
    cfg: &BrtConfig,
    z_b: Var,
    h: &HorizontalOut,
    z_mask: &[bool],
    cache: Option<&KvCache>,
    rng: &mut DropoutRng<'_>,
) -> Result<Var> {
    let rows = g.value(z_b).rows();
    let w_p = g.param(p.w_p);
    let n_norm = p.ln_v.forward(g, h.n)?;
    let n_bar = g.add(n_norm, w_p)?;

    let (keys, vals, mask) = with_cache(g, cache, h.k_b, h.v_b, z_mask)?;
    let prev = mask.len() - rows;
    let query_pos: Vec<f64> = (0..rows).map(|i| i as f64).collect();
    let key_pos: Vec<f64> = (0..mask.len()).map(|j| j as f64 - prev as f64).collect();
    let q3 = proj(g, h.z_norm, p.w_q3)?;
    let a3 = g.xpos_attention(q3, keys, vals, cfg.heads, &query_pos, &key_pos, cfg.xpos_base, Some(&mask))?;
    let a3 = drop_attn(g, a3, cfg.dropout, rng)?;

    let q4 = proj(g, h.z_norm, p.w_q4)?;
    let k4 = proj(g, n_bar, p.w_kc)?;
    let v4 = proj(g, n_bar, p.w_vc)?;
    let a4 = g.attention(q4, k4, v4, cfg.heads, None)?;
    let a4 = drop_attn(g, a4, cfg.dropout, rng)?;

    let a = g.concat_cols(&[a3, a4])?;
    let p_v = p.w_v.forward(g, a)?;
    let x = g.add(p_v, z_b)?;
    let ffn = GegluParams {
        w_value: g.param(p.ffn[0].w),
        b_value: g.param(p.ffn[0].b),
        w_gate: g.param(p.ffn[1].w),
        b_gate: g.param(p.ffn[1].b),
        w_out: g.param(p.ffn[2].w),
        b_out: g.param(p.ffn[2].b),
    };
    let f = geglu_ffn(g, x, &ffn)?;
    g.add(f, x)
}

/// Options for [`run_brt`].
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Rebuild the previous block's keys/values from its input rows instead
    /// of reading the cache (used to check cache equivalence).
    pub recompute_cache: bool,
    pub dropout: DropoutRng<'a>,
}

pub struct BrtOutput {
    /// `L × D`, block outputs stacked in order.
    pub h: Var,
    pub state: RecurrentState,
    /// Per-block outputs `O_1 … O_n`.
    pub blocks: Vec<Var>,
}

pub fn run_brt(
    g: &mut Graph<'_>,
    p: &CellParams,
    cfg: &BrtConfig,
    z: Var,
    mask: &[bool],
    mut opts: RunOptions<'_>,
) -> Result<BrtOutput> {
    cfg.validate()?;
    let (rows, width) = (g.value(z).rows(), g.value(z).cols());
    if width != cfg.width {
        return Err(Error::shape("run_brt", g.shape(z), &[rows, cfg.width]));
    }
    if mask.len() != rows || rows == 0 {
        return Err(Error::shape("run_brt", g.shape(z), &[mask.len()]));
    }
    let mut state = RecurrentState::initial(g, cfg);
    let mut blocks = Vec::new();
    let mut prev_rows: Option<Var> = None;
    for start in (0..rows).step_by(cfg.block) {
        let end = (start + cfg.block).min(rows);
        let z_b = g.slice_rows(z, start, end)?;
        let z_mask = &mask[start..end];
        let cache = match (&state.cache, opts.recompute_cache, prev_rows) {
            (Some(c), true, Some(prev)) => {
                let z_norm = p.ln_in.forward(g, prev)?;
                Some(KvCache {
                    k: proj(g, z_norm, p.w_kz)?,
                    v: proj(g, z_norm, p.w_vz)?,
                    mask: c.mask.clone(),
                })
            }
            (c, _, _) => c.clone(),
        };
        let h = horizontal_cell(g, p, cfg, state.c, z_b, z_mask, cache.as_ref(), &mut opts.dropout)?;
        let o = vertical_cell(g, p, cfg, z_b, &h, z_mask, cache.as_ref(), &mut opts.dropout)?;
        blocks.push(o);
        state = RecurrentState {
            c: h.n,
            cache: Some(KvCache {
                k: h.k_b,
                v: h.v_b,
                mask: z_mask.to_vec(),
            }),
        };
        prev_rows = Some(z_b);
    }
    let h = g.concat_rows(&blocks)?;
    Ok(BrtOutput { h, state, blocks })
}

/// Masked column-block means of `H` mapped by a shared affine:
/// `h_u = mean(H[:, :D/2]) W_out + b_out`, `h_v` likewise over `H[:, D/2:]`.
/// `mask_u` and `mask_v` select the rows that count for each side.
pub fn pool(g: &mut Graph<'_>, h: Var, mask_u: &[bool], mask_v: &[bool], out: &Linear) -> Result<(Var, Var)> {
    let (rows, width) = (g.value(h).rows(), g.value(h).cols());
    if mask_u.len() != rows || mask_v.len() != rows || width % 2 != 0 {
        return Err(Error::shape("pool", g.shape(h), &[mask_u.len(), mask_v.len()]));
    }
    let half = width / 2;
    let mut side = |start: usize, mask: &[bool]| -> Result<Var> {
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            return Err(Error::Empty("pooling over a fully masked sequence".into()));
        }
        let w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / n as f64 } else { 0.0 }).collect();
        let w = g.constant(Tensor::matrix(1, rows, w));
        let cols = g.slice_cols(h, start, start + half)?;
        let mean = g.matmul(w, cols)?;
        out.forward(g, mean)
    };
    let hu = side(0, mask_u)?;
    let hv = side(half, mask_v)?;
    Ok((hu, hv))
}
