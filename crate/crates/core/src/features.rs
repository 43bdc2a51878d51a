//! Encoding of an interaction list into the patched, aligned matrix the BRT
//! consumes.
//!
//! Per entry of `S_u` (padded at the end to `seq_cap` rows) four feature
//! families are built: node features with a hop one-hot (`X_N`), edge
//! features (`X_E`), a learnable cos/sin time-interval encoding (`X_T`) and
//! projected co-occurrence counts (`X_C`). Padding rows are zero in every
//! family. Each family is patched (`P` consecutive rows flattened into one)
//! and mapped to width `d`; the four results are joined into `l × 4d`, and the
//! two endpoints side by side into `l × 8d`.

use rand::Rng;

use crate::ctdg::EventStream;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::sampler::{CooccurrenceMatrix, InteractionList};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureConfig {
    pub d: usize,
    pub d_t: usize,
    pub d_c: usize,
    pub patch: usize,
    pub seq_cap: usize,
    /// Width of the hop one-hot (at least 2).
    pub hop_width: usize,
    pub node_dim: usize,
    pub edge_dim: usize,
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_t == 0 || self.d_c == 0 || self.patch == 0 || self.seq_cap == 0 {
            return Err(Error::Config("d, d_T, d_C, patch size and seq_cap must be positive".into()));
        }
        if self.hop_width < 2 {
            return Err(Error::Config("hop one-hot needs at least 2 columns".into()));
        }
        Ok(())
    }

    /// Patched rows per side, `⌈seq_cap / P⌉`.
    pub fn patches(&self) -> usize {
        self.seq_cap.div_ceil(self.patch)
    }

    /// Row widths of `X_N`, `X_E`, `X_T`, `X_C`.
    pub fn family_widths(&self) -> [usize; 4] {
        [self.node_dim + self.hop_width, self.edge_dim, 2 * self.d_t, self.d_c]
    }
}

/// `(X_N, X_E, mask)`, each with exactly `seq_cap` rows.
pub fn encode_nodes_edges(
    list: &InteractionList,
    stream: &EventStream,
    seq_cap: usize,
    hop_width: usize,
) -> Result<(Tensor, Tensor, Vec<bool>)> {
    if list.len() > seq_cap {
        return Err(Error::shape("encode_nodes_edges", &[list.len()], &[seq_cap]));
    }
    let table = stream.node_features();
    let (dn, de) = (table.dim(), stream.edge_dim());
    let wn = dn + hop_width;
    let mut xn = vec![0.0; seq_cap * wn];
    let mut xe = vec![0.0; seq_cap * de];
    let mut mask = vec![false; seq_cap];
    for (i, e) in list.entries.iter().enumerate() {
        if e.hop == 0 || e.hop > hop_width {
            return Err(Error::Config(format!("hop {} does not fit a {hop_width}-wide one-hot", e.hop)));
        }
        xn[i * wn..i * wn + dn].copy_from_slice(table.get(e.neighbor)?);
        xn[i * wn + dn + e.hop - 1] = 1.0;
        let event = e
            .event_index
            .checked_sub(stream.offset())
            .and_then(|k| stream.events().get(k))
            .ok_or_else(|| Error::Usage(format!("event index {} not in stream", e.event_index)))?;
        xe[i * de..(i + 1) * de].copy_from_slice(&event.features);
        mask[i] = true;
    }
    Ok((Tensor::matrix(seq_cap, wn, xn), Tensor::matrix(seq_cap, de, xe), mask))
}

fn mask_weights(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

/// Row `i` is `sqrt(1/d_T)·[cos(w_1Δt), sin(w_1Δt), …]` with `Δt = t − ts_i`.
/// `freq` is a `1 × d_T` row. Output has `seq_cap` rows, padding rows zero.
pub fn encode_time(g: &mut Graph<'_>, list: &InteractionList, t: f64, freq: Var, seq_cap: usize) -> Result<Var> {
    let d_t = g.value(freq).numel();
    let mut dt = vec![0.0; seq_cap];
    let mut mask = vec![false; seq_cap];
    for (i, e) in list.entries.iter().enumerate().take(seq_cap) {
        dt[i] = t - e.timestamp;
        mask[i] = true;
    }
    let dt = g.constant(Tensor::matrix(seq_cap, 1, dt));
    let freq = g.reshape(freq, &[1, d_t])?;
    let angle = g.matmul(dt, freq)?;
    let (c, s) = (g.cos(angle), g.sin(angle));
    let x = g.interleave_cols(c, s)?;
    let x = g.scale(x, (1.0 / d_t as f64).sqrt());
    g.scale_rows(x, mask_weights(&mask))
}

/// `MLP_0(C[:,0]) + MLP_1(C[:,1])`, padded to `seq_cap` rows with zeros.
pub fn project_cooccurrence(g: &mut Graph<'_>, counts: &CooccurrenceMatrix, mlps: &[Mlp; 2], seq_cap: usize) -> Result<Var> {
    if counts.len() > seq_cap {
        return Err(Error::shape("project_cooccurrence", &[counts.len()], &[seq_cap]));
    }
    let mut out = None;
    for (col, mlp) in mlps.iter().enumerate() {
        let mut c: Vec<f64> = counts.iter().map(|r| r[col] as f64).collect();
        c.resize(seq_cap, 0.0);
        let x = g.constant(Tensor::matrix(seq_cap, 1, c));
        let y = mlp.forward(g, x)?;
        out = Some(match out {
            None => y,
            Some(acc) => g.add(acc, y)?,
        });
    }
    let out = out.expect("two projectors");
    let mut mask = vec![true; counts.len()];
    mask.resize(seq_cap, false);
    g.scale_rows(out, mask_weights(&mask))
}

/// Flattens `P` consecutive rows into one: `|S| × w → ⌈|S|/P⌉ × P·w`, the
/// last patch zero-filled.
pub fn patch(g: &mut Graph<'_>, x: Var, p: usize) -> Result<Var> {
    if p == 0 {
        return Err(Error::Usage("patch size must be positive".into()));
    }
    let (rows, w) = (g.value(x).rows(), g.value(x).cols());
    let l = rows.div_ceil(p);
    let padded = g.pad_rows(x, l * p)?;
    g.reshape(padded, &[l, p * w])
}

/// A patch is valid when any of its rows is.
pub fn patch_mask(mask: &[bool], p: usize) -> Vec<bool> {
    mask.chunks(p).map(|c| c.iter().any(|&m| m)).collect()
}

/// Inverse of [`patch`]: `l × P·w → l·P × w`.
pub fn unpatch(m: &Tensor, p: usize) -> Result<Tensor> {
    let (l, pw) = (m.rows(), m.cols());
    if p == 0 || pw % p != 0 {
        return Err(Error::shape("unpatch", m.shape(), &[p]));
    }
    m.clone().reshaped(&[l * p, pw / p])
}

/// Maps each family to width `d` and joins them: `l × 4d`.
pub fn align_concat(g: &mut Graph<'_>, families: [Var; 4], align: &[Linear; 4]) -> Result<Var> {
    let mut parts = [families[0]; 4];
    for (k, (&m, lin)) in families.iter().zip(align).enumerate() {
        parts[k] = lin.forward(g, m)?;
    }
    g.concat_cols(&parts)
}

/// Side-by-side join of the two endpoints, zero-padding the shorter one.
pub fn pair_concat(g: &mut Graph<'_>, zu: Var, zv: Var) -> Result<Var> {
    let (tu, tv) = (g.value(zu), g.value(zv));
    if tu.cols() != tv.cols() {
        return Err(Error::shape("pair_concat", tu.shape(), tv.shape()));
    }
    let l = tu.rows().max(tv.rows());
    let zu = g.pad_rows(zu, l)?;
    let zv = g.pad_rows(zv, l)?;
    g.concat_cols(&[zu, zv])
}

/// One side's encoding: `l × 4d` plus the patch validity mask.
#[derive(Clone, Debug)]
pub struct SideEncoding {
    pub z: Var,
    pub mask: Vec<bool>,
}

/// Trainable parameters of the feature encoder.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    pub cfg: FeatureConfig,
    pub freq: ParamId,
    pub cooc: [Mlp; 2],
    pub align: [Linear; 4],
}

impl FeatureEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: FeatureConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let freq = (0..cfg.d_t)
            .map(|i| 10f64.powf(-4.0 * i as f64 / cfg.d_t as f64))
            .collect();
        let freq = store.add("enc/time/freq", Tensor::matrix(1, cfg.d_t, freq))?;
        let cooc = [
            Mlp::new(store, "enc/cooc0", 1, cfg.d_c, cfg.d_c, rng)?,
            Mlp::new(store, "enc/cooc1", 1, cfg.d_c, cfg.d_c, rng)?,
        ];
        let names = ["node", "edge", "time", "cooc"];
        let widths = cfg.family_widths();
        let mut align = Vec::with_capacity(4);
        for (name, w) in names.iter().zip(widths) {
            align.push(Linear::new(store, &format!("enc/align_{name}"), cfg.patch * w, cfg.d, rng)?);
        }
        Ok(FeatureEncoder {
            cfg,
            freq,
            cooc,
            align: align.try_into().expect("four families"),
        })
    }

    pub fn encode_side(
        &self,
        g: &mut Graph<'_>,
        list: &InteractionList,
        counts: &CooccurrenceMatrix,
        stream: &EventStream,
    ) -> Result<SideEncoding> {
        let cfg = &self.cfg;
        let (xn, xe, mask) = encode_nodes_edges(list, stream, cfg.seq_cap, cfg.hop_width)?;
        let xn = g.constant(xn);
        let xe = g.constant(xe);
        let freq = g.param(self.freq);
        let xt = encode_time(g, list, list.query_time, freq, cfg.seq_cap)?;
        let xc = project_cooccurrence(g, counts, &self.cooc, cfg.seq_cap)?;
        let mut families = [xn, xe, xt, xc];
        for f in &mut families {
            *f = patch(g, *f, cfg.patch)?;
        }
        let z = align_concat(g, families, &self.align)?;
        Ok(SideEncoding {
            z,
            mask: patch_mask(&mask, cfg.patch),
        })
    }
}
