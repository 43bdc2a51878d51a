//! Negative-edge samplers, AP / AUC, and the transductive and inductive
//! evaluation protocols.
//!
//! Every positive event gets one negative per sampler kind:
//!
//! * RNES keeps the source and swaps in a random destination among the nodes
//!   seen so far (never `u`, `v`, or a node `u` really meets at `t`).
//! * HNES replaces the pair by a historical edge observed before `t` and
//!   absent at `t`, drawn without replacement within an evaluation batch.
//! * INES does the same over historical edges that never occur in training.
//!
//! When HNES/INES run out of candidates they fall back to RNES and the
//! report counts how often.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctdg::{EventStream, TemporalAdjacencyIndex, PAD};
use crate::error::{Error, Result};

/// A candidate link `(u, v)` at time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkQuery {
    pub source: u32,
    pub destination: u32,
    pub timestamp: f64,
}

impl LinkQuery {
    pub fn new(source: u32, destination: u32, timestamp: f64) -> Self {
        LinkQuery {
            source,
            destination,
            timestamp,
        }
    }
}

/// The history a query is answered against.
#[derive(Clone, Copy)]
pub struct StreamContext<'a> {
    /// Stream whose events (and node/edge features) the index points into.
    pub stream: &'a EventStream,
    pub index: &'a TemporalAdjacencyIndex,
    /// Whether node ids outside the stream's node table are accepted (they
    /// are treated as nodes without history).
    pub allow_unknown: bool,
}

impl<'a> StreamContext<'a> {
    pub fn new(stream: &'a EventStream, index: &'a TemporalAdjacencyIndex) -> Self {
        StreamContext {
            stream,
            index,
            allow_unknown: false,
        }
    }
}

/// Anything that maps link queries to probabilities.
pub trait LinkScorer: Sync {
    fn score(&self, ctx: &StreamContext<'_>, queries: &[LinkQuery]) -> Result<Vec<f64>>;
}

// ---- metrics ----------------------------------------------------------------

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    Ok(())
}

/// `Σ (R_i − R_{i−1}) P_i` over thresholds at each distinct score, highest
/// first.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Usage("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

/// Probability that a random positive outscores a random negative, ties
/// counting half.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Usage("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of positive ranks with tied groups sharing their mean rank.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j + 1) as f64 / 2.0;
        rank_sum += mean_rank * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let pos_f = pos as f64;
    Ok((rank_sum - pos_f * (pos_f + 1.0) / 2.0) / (pos_f * neg as f64))
}

// ---- negative sampling ------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NegativeSamplerKind {
    Rnes,
    Hnes,
    Ines,
}

impl NegativeSamplerKind {
    pub const ALL: [NegativeSamplerKind; 3] = [NegativeSamplerKind::Rnes, NegativeSamplerKind::Hnes, NegativeSamplerKind::Ines];

    fn stream_id(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for NegativeSamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativeSamplerKind::Rnes => "rnes",
            NegativeSamplerKind::Hnes => "hnes",
            NegativeSamplerKind::Ines => "ines",
        })
    }
}

impl FromStr for NegativeSamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnes" => Ok(NegativeSamplerKind::Rnes),
            "hnes" => Ok(NegativeSamplerKind::Hnes),
            "ines" => Ok(NegativeSamplerKind::Ines),
            _ => Err(Error::Usage(format!("unknown negative sampler `{s}` (expected rnes, hnes or ines)"))),
        }
    }
}

type Edge = (u32, u32);

fn time_key(t: f64) -> u64 {
    // `+ 0.0` folds -0.0 into 0.0.
    (t + 0.0).to_bits()
}

/// Rejection-sampling tries before enumerating the candidates explicitly.
const MAX_TRIES: usize = 64;

/// Negative edges for queries against one history stream.
pub struct NegativeSampler {
    num_nodes: u32,
    /// Nodes in order of first appearance, with that time.
    node_first_seen: Vec<(f64, u32)>,
    /// Distinct directed edges in order of first appearance, with that time.
    edge_first_seen: Vec<(f64, Edge)>,
    edges_at: HashMap<u64, HashSet<Edge>>,
    train_edges: HashSet<Edge>,
    used: HashSet<Edge>,
}

impl NegativeSampler {
    /// `history` holds every event a query may look back on (training and
    /// evaluation events alike); `train` defines the INES exclusion set.
    pub fn new(history: &EventStream, train: &EventStream) -> Self {
        let mut seen_nodes = HashSet::new();
        let mut seen_edges = HashSet::new();
        let mut node_first_seen = Vec::new();
        let mut edge_first_seen = Vec::new();
        let mut edges_at: HashMap<u64, HashSet<Edge>> = HashMap::new();
        for e in history.events() {
            for n in [e.source, e.destination] {
                if seen_nodes.insert(n) {
                    node_first_seen.push((e.timestamp, n));
                }
            }
            let edge = (e.source, e.destination);
            if seen_edges.insert(edge) {
                edge_first_seen.push((e.timestamp, edge));
            }
            edges_at.entry(time_key(e.timestamp)).or_default().insert(edge);
        }
        NegativeSampler {
            num_nodes: history.num_nodes() as u32,
            node_first_seen,
            edge_first_seen,
            edges_at,
            train_edges: train.events().iter().map(|e| (e.source, e.destination)).collect(),
            used: HashSet::new(),
        }
    }

    /// Starts a new evaluation batch: historical edges may be drawn again.
    pub fn begin_batch(&mut self) {
        self.used.clear();
    }

    fn present_at(&self, t: f64, edge: Edge) -> bool {
        self.edges_at
            .get(&time_key(t))
            .is_some_and(|s| s.contains(&edge) || s.contains(&(edge.1, edge.0)))
    }

    fn historical(&self, t: f64) -> &[(f64, Edge)] {
        let n = self.edge_first_seen.partition_point(|(ts, _)| *ts < t);
        &self.edge_first_seen[..n]
    }

    fn edge_ok(&self, kind: NegativeSamplerKind, t: f64, edge: Edge) -> bool {
        !self.present_at(t, edge)
            && !self.used.contains(&edge)
            && (kind != NegativeSamplerKind::Ines || !self.train_edges.contains(&edge))
    }

    /// Every edge HNES/INES could return for a query at `t` (ignoring the
    /// within-batch exclusions).
    pub fn candidate_pool(&self, kind: NegativeSamplerKind, t: f64) -> Vec<Edge> {
        self.historical(t)
            .iter()
            .map(|&(_, e)| e)
            .filter(|&e| {
                !self.present_at(t, e) && (kind != NegativeSamplerKind::Ines || !self.train_edges.contains(&e))
            })
            .collect()
    }

    fn node_ok(&self, q: &LinkQuery, w: u32) -> bool {
        w != PAD && w != q.source && w != q.destination && !self.present_at(q.timestamp, (q.source, w))
    }

    fn random_destination<R: Rng>(&self, q: &LinkQuery, rng: &mut R) -> Result<u32> {
        let seen = self.node_first_seen.partition_point(|(ts, _)| *ts <= q.timestamp);
        let universe: &[(f64, u32)] = &self.node_first_seen[..seen];
        if !universe.is_empty() {
            for _ in 0..MAX_TRIES {
                let w = universe[rng.gen_range(0..universe.len())].1;
                if self.node_ok(q, w) {
                    return Ok(w);
                }
            }
            let ok: Vec<u32> = universe.iter().map(|&(_, w)| w).filter(|&w| self.node_ok(q, w)).collect();
            if !ok.is_empty() {
                return Ok(ok[rng.gen_range(0..ok.len())]);
            }
        }
        // Nothing suitable seen yet: widen to the whole node table.
        let ok: Vec<u32> = (1..=self.num_nodes).filter(|&w| self.node_ok(q, w)).collect();
        if ok.is_empty() {
            return Err(Error::Empty(format!(
                "no negative destination available for ({}, {}) at {}",
                q.source, q.destination, q.timestamp
            )));
        }
        Ok(ok[rng.gen_range(0..ok.len())])
    }

    /// One negative for `q`; the flag is `true` when HNES/INES fell back to
    /// RNES.
    pub fn draw<R: Rng>(&mut self, kind: NegativeSamplerKind, q: &LinkQuery, rng: &mut R) -> Result<(LinkQuery, bool)> {
        let rnes = |s: &Self, rng: &mut R| -> Result<LinkQuery> {
            Ok(LinkQuery::new(q.source, s.random_destination(q, rng)?, q.timestamp))
        };
        if kind == NegativeSamplerKind::Rnes {
            return Ok((rnes(self, rng)?, false));
        }
        let hist = self.historical(q.timestamp);
        let mut pick = None;
        if !hist.is_empty() {
            for _ in 0..MAX_TRIES {
                let e = hist[rng.gen_range(0..hist.len())].1;
                if self.edge_ok(kind, q.timestamp, e) {
                    pick = Some(e);
                    break;
                }
            }
            if pick.is_none() {
                let ok: Vec<Edge> = hist
                    .iter()
                    .map(|&(_, e)| e)
                    .filter(|&e| self.edge_ok(kind, q.timestamp, e))
                    .collect();
                if !ok.is_empty() {
                    pick = Some(ok[rng.gen_range(0..ok.len())]);
                }
            }
        }
        match pick {
            Some(e) => {
                self.used.insert(e);
                Ok((LinkQuery::new(e.0, e.1, q.timestamp), false))
            }
            None => Ok((rnes(self, rng)?, true)),
        }
    }
}

/// RNG for one evaluation batch of one sampler kind, independent of how
/// batches are scheduled.
pub fn batch_rng(seed: u64, kind: NegativeSamplerKind, batch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind.stream_id() << 48) | batch);
    rng
}

/// Negatives for `positives`, one each, in batches of `batch_size`.
pub fn draw_negatives(
    sampler: &mut NegativeSampler,
    kind: NegativeSamplerKind,
    positives: &[LinkQuery],
    batch_size: usize,
    seed: u64,
) -> Result<(Vec<LinkQuery>, usize)> {
    let mut out = Vec::with_capacity(positives.len());
    let mut fallbacks = 0;
    for (b, chunk) in positives.chunks(batch_size.max(1)).enumerate() {
        sampler.begin_batch();
        let mut rng = batch_rng(seed, kind, b as u64);
        for q in chunk {
            let (neg, fell_back) = sampler.draw(kind, q, &mut rng)?;
            out.push(neg);
            fallbacks += fell_back as usize;
        }
    }
    Ok((out, fallbacks))
}

// ---- protocols --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Setting {
    /// All nodes may have been seen in training.
    Transductive,
    /// Queries touch at least one node hidden from training.
    Inductive,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Transductive => "transductive",
            Setting::Inductive => "inductive",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transductive" => Ok(Setting::Transductive),
            "inductive" => Ok(Setting::Inductive),
            _ => Err(Error::Usage(format!("unknown setting `{s}` (expected transductive or inductive)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub setting: Setting,
    /// Nodes hidden from training (inductive setting only).
    pub masked_nodes: HashSet<u32>,
}

impl EvalProtocol {
    pub fn transductive() -> Self {
        EvalProtocol {
            setting: Setting::Transductive,
            masked_nodes: HashSet::new(),
        }
    }

    pub fn inductive(masked_nodes: HashSet<u32>) -> Self {
        EvalProtocol {
            setting: Setting::Inductive,
            masked_nodes,
        }
    }

    /// Sampler kinds the setting reports; the inductive setting uses RNES
    /// only.
    pub fn kinds(&self, requested: &[NegativeSamplerKind]) -> Vec<NegativeSamplerKind> {
        match self.setting {
            Setting::Transductive => requested.to_vec(),
            Setting::Inductive => vec![NegativeSamplerKind::Rnes],
        }
    }

    pub fn queries(&self, split: &EventStream) -> Vec<LinkQuery> {
        split
            .events()
            .iter()
            .filter(|e| {
                self.setting == Setting::Transductive
                    || self.masked_nodes.contains(&e.source)
                    || self.masked_nodes.contains(&e.destination)
            })
            .map(|e| LinkQuery::new(e.source, e.destination, e.timestamp))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub setting: Setting,
    pub sampler: NegativeSamplerKind,
    pub ap: f64,
    pub auc: f64,
    pub n_pos: usize,
    pub n_fallback: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub const HEADER: &'static str = "setting,sampler,ap,auc,n_pos,n_fallback";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.setting, r.sampler, r.ap, r.auc, r.n_pos, r.n_fallback
            ));
        }
        s
    }

    pub fn row(&self, sampler: NegativeSamplerKind) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.sampler == sampler)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<13} {:<7} {:>8} {:>8} {:>7} {:>10}", "setting", "sampler", "AP", "AUC", "n_pos", "n_fallback")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<13} {:<7} {:>8.4} {:>8.4} {:>7} {:>10}",
                r.setting.to_string(),
                r.sampler.to_string(),
                r.ap,
                r.auc,
                r.n_pos,
                r.n_fallback
            )?;
        }
        Ok(())
    }
}

/// Inputs of one evaluation run.
pub struct EvalRequest<'a> {
    /// Every event visible to the queries (train, validation and test).
    pub history: &'a EventStream,
    pub index: &'a TemporalAdjacencyIndex,
    /// Training events, for the INES exclusion set.
    pub train: &'a EventStream,
    /// Events to score.
    pub split: &'a EventStream,
    pub protocol: &'a EvalProtocol,
    pub kinds: &'a [NegativeSamplerKind],
    pub batch_size: usize,
    pub seed: u64,
}

pub fn evaluate(scorer: &dyn LinkScorer, req: &EvalRequest<'_>) -> Result<MetricReport> {
    let positives = req.protocol.queries(req.split);
    if positives.is_empty() {
        return Err(Error::Empty(format!("no {} queries to evaluate", req.protocol.setting)));
    }
    let ctx = StreamContext {
        stream: req.history,
        index: req.index,
        allow_unknown: req.protocol.setting == Setting::Inductive,
    };
    let pos_scores = scorer.score(&ctx, &positives)?;
    let mut sampler = NegativeSampler::new(req.history, req.train);
    let mut report = MetricReport::default();
    for kind in req.protocol.kinds(req.kinds) {
        let (negatives, n_fallback) = draw_negatives(&mut sampler, kind, &positives, req.batch_size, req.seed)?;
        let neg_scores = scorer.score(&ctx, &negatives)?;
        let scores: Vec<f64> = pos_scores.iter().chain(&neg_scores).copied().collect();
        let labels: Vec<bool> = (0..scores.len()).map(|i| i < positives.len()).collect();
        report.rows.push(MetricRow {
            setting: req.protocol.setting,
            sampler: kind,
            ap: average_precision(&scores, &labels)?,
            auc: auc_roc(&scores, &labels)?,
            n_pos: positives.len(),
            n_fallback,
        });
    }
    Ok(report)
}
