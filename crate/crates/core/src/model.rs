//! The full link predictor and its training loop.
//!
//! `forward_pair(u, v, t)` samples both endpoints' histories, encodes them,
//! joins them side by side, runs the BRT, mean-pools each side to `d_out`
//! and feeds `h_u ‖ h_v` to a one-hidden-layer decoder. Training pairs every
//! positive event with one RNES negative, minimises mean binary
//! cross-entropy with Adam over chronological mini-batches, and keeps the
//! parameters of the epoch with the best validation AP.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::brt::{pool, run_brt, BrtConfig, CellParams, RunOptions};
use crate::config::HotConfig;
use crate::ctdg::{build_index, EventStream, PAD};
use crate::error::{Error, Result};
use crate::eval::{draw_negatives, evaluate, EvalProtocol, EvalRequest, LinkQuery, LinkScorer, NegativeSampler,
    NegativeSamplerKind, StreamContext};
use crate::features::{pair_concat, FeatureEncoder};
use crate::nn::{dropout, Linear, Mlp};
use crate::sampler::{cooccurrence_counts, sample, SamplerConfig};
use crate::tensor::{Adam, AdamConfig, GradStore, Graph, ParamStore, Tensor, Var};

/// Pairs per parallel work unit. Fixed so results do not depend on the
/// number of threads.
const CHUNK: usize = 16;

/// `2·d_out → d_out → 1` with a ReLU; returns the logit.
#[derive(Clone, Copy, Debug)]
pub struct LinkDecoder {
    pub mlp: Mlp,
}

impl LinkDecoder {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, d_out: usize, rng: &mut R) -> Result<Self> {
        Ok(LinkDecoder {
            mlp: Mlp::new(store, "decoder", 2 * d_out, d_out, 1, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, hu: Var, hv: Var) -> Result<Var> {
        let x = g.concat_cols(&[hu, hv])?;
        self.mlp.forward(g, x)
    }
}

pub struct HotModel {
    pub config: HotConfig,
    pub node_dim: usize,
    pub edge_dim: usize,
    pub store: ParamStore,
    pub encoder: FeatureEncoder,
    pub brt: CellParams,
    pub brt_config: BrtConfig,
    sampler: SamplerConfig,
    /// Shared `4d → d_out` map applied after pooling.
    pub out: Linear,
    pub decoder: LinkDecoder,
}

/// Side mask, or all rows when the side has no history at all.
fn or_all(mask: Vec<bool>) -> Vec<bool> {
    if mask.iter().any(|&m| m) {
        mask
    } else {
        vec![true; mask.len()]
    }
}

impl HotModel {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: HotConfig, node_dim: usize, edge_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = FeatureEncoder::new(&mut store, config.feature_config(node_dim, edge_dim), &mut rng)?;
        let brt_config = config.brt_config();
        let brt = CellParams::new(&mut store, &brt_config, &mut rng)?;
        let out = Linear::new(&mut store, "pool_out", 4 * config.d, config.d_out, &mut rng)?;
        let decoder = LinkDecoder::new(&mut store, config.d_out, &mut rng)?;
        Ok(HotModel {
            sampler: config.sampler_config(),
            config,
            node_dim,
            edge_dim,
            store,
            encoder,
            brt,
            brt_config,
            out,
            decoder,
        })
    }

    /// Records the probability for `q` on `g`, whose parameters must have
    /// the layout of `self.store`.
    pub fn forward_in(
        &self,
        g: &mut Graph<'_>,
        ctx: &StreamContext<'_>,
        q: &LinkQuery,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let stream = ctx.stream;
        if stream.edge_dim() != self.edge_dim || stream.node_dim() != self.node_dim {
            return Err(Error::Config(format!(
                "stream has node/edge feature widths {}/{}, model expects {}/{}",
                stream.node_dim(),
                stream.edge_dim(),
                self.node_dim,
                self.edge_dim
            )));
        }
        for n in [q.source, q.destination] {
            if !ctx.allow_unknown && (n == PAD || n as usize > stream.num_nodes()) {
                return Err(Error::UnknownNode(n));
            }
        }
        let su = sample(ctx.index, q.source, q.timestamp, &self.sampler);
        let sv = sample(ctx.index, q.destination, q.timestamp, &self.sampler);
        let (cu, cv) = cooccurrence_counts(&su, &sv);
        let eu = self.encoder.encode_side(g, &su, &cu, stream)?;
        let ev = self.encoder.encode_side(g, &sv, &cv, stream)?;
        let p = self.config.dropout;
        let zu = dropout(g, eu.z, p, rng.as_deref_mut())?;
        let zv = dropout(g, ev.z, p, rng.as_deref_mut())?;
        let z = pair_concat(g, zu, zv)?;
        let rows = g.value(z).rows();
        let (mut mu, mut mv) = (eu.mask, ev.mask);
        mu.resize(rows, false);
        mv.resize(rows, false);
        let joint = or_all(mu.iter().zip(&mv).map(|(a, b)| *a || *b).collect());
        let h = run_brt(
            g,
            &self.brt,
            &self.brt_config,
            z,
            &joint,
            RunOptions {
                recompute_cache: false,
                dropout: rng,
            },
        )?;
        let (hu, hv) = pool(g, h.h, &or_all(mu), &or_all(mv), &self.out)?;
        let logit = self.decoder.forward(g, hu, hv)?;
        Ok(g.sigmoid(logit))
    }

    /// Probability of a link `(u, v)` at `t`, dropout off.
    pub fn forward_pair(&self, ctx: &StreamContext<'_>, u: u32, v: u32, t: f64) -> Result<f64> {
        let mut g = Graph::with_params(&self.store);
        let p = self.forward_in(&mut g, ctx, &LinkQuery::new(u, v, t), None)?;
        Ok(g.value(p).item())
    }

    /// Mean BCE over `queries` (targets 1/0) recorded on `g`.
    pub fn loss_in(
        &self,
        g: &mut Graph<'_>,
        ctx: &StreamContext<'_>,
        queries: &[(LinkQuery, bool)],
        mut rng_for: impl FnMut(usize) -> Option<ChaCha8Rng>,
    ) -> Result<Var> {
        let mut probs = Vec::with_capacity(queries.len());
        for (i, (q, _)) in queries.iter().enumerate() {
            let mut rng = rng_for(i);
            let p = self.forward_in(g, ctx, q, rng.as_mut().map(|r| r as &mut dyn RngCore))?;
            probs.push(p);
        }
        let p = g.concat_rows(&probs)?;
        g.bce(p, queries.iter().map(|&(_, y)| if y { 1.0 } else { 0.0 }).collect())
    }

    pub fn checkpoint(&self, epoch: usize, best_val_ap: f64) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            node_dim: self.node_dim,
            edge_dim: self.edge_dim,
            params: self.store.clone(),
            best_val_ap,
            epoch,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = HotModel::new(ckpt.config.clone(), ckpt.node_dim, ckpt.edge_dim)?;
        model.store.load_from(&ckpt.params)?;
        Ok(model)
    }
}

/// Runs `f` over fixed-size chunks of `items` on all cores; results come
/// back in chunk order.
fn par_chunks<T: Sync, U: Send>(items: &[T], f: impl Fn(usize, &[T]) -> Result<U> + Sync) -> Result<Vec<U>> {
    let chunks: Vec<&[T]> = items.chunks(CHUNK).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(chunks.len());
    if workers <= 1 {
        return chunks.iter().enumerate().map(|(i, c)| f(i, c)).collect();
    }
    let results: Vec<Vec<(usize, Result<U>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (chunks, f) = (&chunks, &f);
                s.spawn(move || {
                    (w..chunks.len())
                        .step_by(workers)
                        .map(|i| (i, f(i, chunks[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut flat: Vec<(usize, Result<U>)> = results.into_iter().flatten().collect();
    flat.sort_by_key(|(i, _)| *i);
    flat.into_iter().map(|(_, r)| r).collect()
}

impl LinkScorer for HotModel {
    fn score(&self, ctx: &StreamContext<'_>, queries: &[LinkQuery]) -> Result<Vec<f64>> {
        let parts = par_chunks(queries, |_, chunk| {
            chunk
                .iter()
                .map(|q| {
                    let mut g = Graph::with_params(&self.store);
                    let p = self.forward_in(&mut g, ctx, q, None)?;
                    Ok(g.value(p).item())
                })
                .collect::<Result<Vec<f64>>>()
        })?;
        Ok(parts.into_iter().flatten().collect())
    }
}

/// Mean of `−ln p` over positives and `−ln(1 − p)` over negatives, with
/// probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.len() != neg.len() || pos.is_empty() {
        return Err(Error::Usage(format!(
            "bce_loss needs equal, non-zero counts (got {} positives, {} negatives)",
            pos.len(),
            neg.len()
        )));
    }
    let clamp = |p: f64| p.clamp(1e-7, 1.0 - 1e-7);
    let total: f64 = pos.iter().map(|&p| -clamp(p).ln()).sum::<f64>()
        + neg.iter().map(|&p| -(1.0 - clamp(p)).ln()).sum::<f64>();
    Ok(total / (pos.len() + neg.len()) as f64)
}

// ---- training ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ap: f64,
    pub val_auc: f64,
    pub elapsed_s: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,train_loss,val_ap,val_auc,elapsed_s";
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.train_loss, self.val_ap, self.val_auc, self.elapsed_s
        )
    }
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// What the training loop reads.
pub struct TrainData<'a> {
    pub train: &'a EventStream,
    pub val: &'a EventStream,
    /// Stream the validation queries look back on; usually train followed
    /// by validation.
    pub history: &'a EventStream,
}

/// Trains on `train`, validating on `val` against `train ++ val`.
pub fn train(train_s: &EventStream, val: &EventStream, config: &HotConfig) -> Result<TrainOutcome> {
    if train_s.offset() + train_s.len() != val.offset() {
        return Err(Error::Usage(
            "train and validation streams are not contiguous; use train_with with an explicit history".into(),
        ));
    }
    let history = EventStream::concat(&[train_s.clone(), val.clone()])?;
    train_with(
        &TrainData {
            train: train_s,
            val,
            history: &history,
        },
        config,
        |_| {},
    )
}

pub fn train_with(data: &TrainData<'_>, config: &HotConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let train_s = data.train;
    if train_s.is_empty() {
        return Err(Error::Empty("empty training split".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Empty("empty validation split".into()));
    }
    let mut model = HotModel::new(config.clone(), train_s.node_dim(), train_s.edge_dim())?;
    let mut adam = Adam::new(
        &model.store,
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let train_index = build_index(train_s);
    let train_ctx = StreamContext::new(train_s, &train_index);
    let history_index = build_index(data.history);
    let positives: Vec<LinkQuery> = train_s
        .events()
        .iter()
        .map(|e| LinkQuery::new(e.source, e.destination, e.timestamp))
        .collect();
    let mut sampler = NegativeSampler::new(train_s, train_s);
    let start = Instant::now();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut bad_epochs = 0;

    for epoch in 1..=config.epochs {
        let epoch_seed = config.seed.wrapping_add(epoch as u64);
        let (negatives, _) = draw_negatives(
            &mut sampler,
            NegativeSamplerKind::Rnes,
            &positives,
            config.batch_size,
            epoch_seed,
        )?;
        let mut loss_sum = 0.0;
        for (b, (pos, neg)) in positives
            .chunks(config.batch_size)
            .zip(negatives.chunks(config.batch_size))
            .enumerate()
        {
            let batch: Vec<(LinkQuery, bool)> = pos
                .iter()
                .map(|&q| (q, true))
                .chain(neg.iter().map(|&q| (q, false)))
                .collect();
            let total = batch.len() as f64;
            let batch_seed = epoch_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(b as u64);
            let model_ref = &model;
            let parts = par_chunks(&batch, |ci, chunk| {
                let mut g = Graph::with_params(&model_ref.store);
                let loss = model_ref.loss_in(&mut g, &train_ctx, chunk, |i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
                    rng.set_stream((ci * CHUNK + i) as u64);
                    Some(rng)
                })?;
                let loss = g.scale(loss, chunk.len() as f64 / total);
                g.backward(loss)?;
                let mut grads = GradStore::zeros_like(&model_ref.store);
                g.accumulate_param_grads(&mut grads);
                Ok((g.value(loss).item(), grads))
            })?;
            let mut grads = GradStore::zeros_like(&model.store);
            let mut batch_loss = 0.0;
            for (l, gs) in parts {
                batch_loss += l;
                for (id, t) in gs.iter() {
                    grads.accumulate(id, t);
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            adam.step(&mut model.store, &grads);
            loss_sum += batch_loss;
        }
        let batches = positives.len().div_ceil(config.batch_size) as f64;

        let report = evaluate(
            &model,
            &EvalRequest {
                history: data.history,
                index: &history_index,
                train: train_s,
                split: data.val,
                protocol: &EvalProtocol::transductive(),
                kinds: &[NegativeSamplerKind::Rnes],
                batch_size: config.batch_size,
                seed: config.seed,
            },
        )?;
        let row = &report.rows[0];
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / batches,
            val_ap: row.ap,
            val_auc: row.auc,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        log::info!("{entry}");
        on_epoch(&entry);
        log.push(entry);

        if best.as_ref().map_or(true, |(ap, _, _)| row.ap > *ap) {
            best = Some((row.ap, epoch, model.store.clone()));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > config.patience {
                break;
            }
        }
    }
    let (best_ap, best_epoch, params) = best.expect("at least one epoch");
    model.store = params;
    Ok(TrainOutcome {
        checkpoint: model.checkpoint(best_epoch, best_ap),
        log,
    })
}

// ---- checkpoints --------------------------------------------------------------

/// Parameters plus everything needed to rebuild the model around them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: HotConfig,
    pub node_dim: usize,
    pub edge_dim: usize,
    pub params: ParamStore,
    pub best_val_ap: f64,
    pub epoch: usize,
}

const MAGIC: &str = "hot-checkpoint 1";

impl Checkpoint {
    /// Text format, version 1:
    ///
    /// ```text
    /// hot-checkpoint 1
    /// epoch <n>
    /// best_val_ap <f64>
    /// node_dim <n>
    /// edge_dim <n>
    /// config <k>            # followed by k `key = value` lines
    /// params <m>            # followed by m (header, values) line pairs
    /// <name> <rank> <dim>...
    /// <v> <v> ...
    /// ```
    ///
    /// Floats use the shortest representation that parses back to the same
    /// bits.
    pub fn to_text(&self) -> String {
        let cfg = self.config.to_kv();
        let mut s = format!(
            "{MAGIC}\nepoch {}\nbest_val_ap {}\nnode_dim {}\nedge_dim {}\nconfig {}\n{cfg}params {}\n",
            self.epoch,
            self.best_val_ap,
            self.node_dim,
            self.edge_dim,
            cfg.lines().count(),
            self.params.len()
        );
        for (_, p) in self.params.iter() {
            let dims: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("{} {} {}\n", p.name, dims.len(), dims.join(" ")));
            let vals: Vec<String> = p.tensor.data().iter().map(|v| v.to_string()).collect();
            s.push_str(&vals.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| bad(format!("truncated before {what}")));
        if next("header")? != MAGIC {
            return Err(bad(format!("expected `{MAGIC}` header")));
        }
        fn field<T: std::str::FromStr>(line: &str, key: &str) -> Result<T> {
            line.strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("expected `{key} <value>`, got `{line}`")))
        }
        let epoch = field(next("epoch")?, "epoch")?;
        let best_val_ap = field(next("best_val_ap")?, "best_val_ap")?;
        let node_dim = field(next("node_dim")?, "node_dim")?;
        let edge_dim = field(next("edge_dim")?, "edge_dim")?;
        let n_cfg: usize = field(next("config")?, "config")?;
        let mut cfg_text = String::new();
        for _ in 0..n_cfg {
            cfg_text.push_str(next("config line")?);
            cfg_text.push('\n');
        }
        let config = HotConfig::from_kv(&cfg_text)?;
        let n_params: usize = field(next("params")?, "params")?;
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let header: Vec<&str> = next("parameter header")?.split_whitespace().collect();
            let (name, rank) = match header.as_slice() {
                [name, rank, ..] => (*name, rank.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                _ => return Err(bad("malformed parameter header".into())),
            };
            let dims: Vec<usize> = header[2..]
                .iter()
                .map(|d| d.parse().map_err(|_| bad(format!("bad dimension `{d}` for {name}"))))
                .collect::<Result<_>>()?;
            if dims.len() != rank {
                return Err(bad(format!("{name}: rank {rank} but {} dims", dims.len())));
            }
            let values: Vec<f64> = next("parameter values")?
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad(format!("bad value `{v}` in {name}"))))
                .collect::<Result<_>>()?;
            params.add(name, Tensor::new(dims, values).map_err(|e| bad(format!("{name}: {e}")))?)?;
        }
        Ok(Checkpoint {
            config,
            node_dim,
            edge_dim,
            params,
            best_val_ap,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path)?)
    }
}
