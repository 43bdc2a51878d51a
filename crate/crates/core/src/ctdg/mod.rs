//! Continuous-time dynamic graphs held as a sorted interaction stream.
//!
//! Node ids are dense and start at 1; id 0 is the padding sentinel used by
//! downstream interaction lists.

mod csv_io;
mod index;
mod synth;

pub use csv_io::{ingest_csv, read_csv, write_csv};
pub use index::{build_index, Adjacency, TemporalAdjacencyIndex};
pub use synth::{generate_synthetic, SyntheticKind, SyntheticParams};

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Padding sentinel id.
pub const PAD: u32 = 0;

/// `(raw source, raw destination, timestamp, edge features, label)` as read
/// from a file, before sorting and id remapping.
pub type RawEvent = (u64, u64, f64, Vec<f64>, Option<bool>);

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub source: u32,
    pub destination: u32,
    pub timestamp: f64,
    pub features: Vec<f64>,
    pub label: Option<bool>,
}

/// Per-node feature vectors, indexed by node id (row 0 is the sentinel).
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatureTable {
    dim: usize,
    data: Vec<f64>,
}

impl NodeFeatureTable {
    pub fn zeros(num_nodes: usize, dim: usize) -> Self {
        NodeFeatureTable {
            dim,
            data: vec![0.0; (num_nodes + 1) * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_nodes(&self) -> usize {
        if self.dim == 0 {
            usize::MAX
        } else {
            self.data.len() / self.dim - 1
        }
    }

    pub fn get(&self, node: u32) -> Result<&[f64]> {
        let start = node as usize * self.dim;
        self.data
            .get(start..start + self.dim)
            .ok_or(Error::UnknownNode(node))
    }

    pub fn set(&mut self, node: u32, values: &[f64]) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::shape("node features", &[self.dim], &[values.len()]));
        }
        let dim = self.dim;
        let start = node as usize * dim;
        self.data
            .get_mut(start..start + dim)
            .ok_or(Error::UnknownNode(node))?
            .copy_from_slice(values);
        Ok(())
    }
}

/// Interaction events sorted by `(timestamp, ingestion order)`.
///
/// `offset` is the position of the first event within the stream this one
/// was split from, so event indices stay comparable across splits.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    num_nodes: usize,
    edge_dim: usize,
    node_features: NodeFeatureTable,
    offset: usize,
}

impl EventStream {
    /// Sorts `events` stably by timestamp and remaps raw ids densely from 1
    /// in order of first appearance.
    pub fn from_raw(raw: Vec<RawEvent>, node_dim: usize) -> Result<Self> {
        let edge_dim = raw.first().map_or(0, |r| r.3.len());
        for (row, r) in raw.iter().enumerate() {
            if r.3.len() != edge_dim {
                return Err(Error::shape("edge features", &[edge_dim], &[r.3.len(), row]));
            }
            if !r.2.is_finite() || r.2 < 0.0 {
                return Err(Error::Usage(format!("row {row}: timestamp {} is not a non-negative number", r.2)));
            }
        }
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| raw[a].2.total_cmp(&raw[b].2));
        let mut ids: HashMap<u64, u32> = HashMap::new();
        let mut intern = |raw_id: u64| {
            let next = ids.len() as u32 + 1;
            *ids.entry(raw_id).or_insert(next)
        };
        let mut slots: Vec<Option<RawEvent>> = raw.into_iter().map(Some).collect();
        let mut events = Vec::with_capacity(order.len());
        for i in order {
            let (u, v, ts, features, label) = slots[i].take().expect("each row visited once");
            let source = intern(u);
            let destination = intern(v);
            events.push(Event {
                source,
                destination,
                timestamp: ts,
                features,
                label,
            });
        }
        let num_nodes = ids.len();
        Ok(EventStream {
            events,
            num_nodes,
            edge_dim,
            node_features: NodeFeatureTable::zeros(num_nodes, node_dim),
            offset: 0,
        })
    }

    /// Builds a stream from events already in dense-id, sorted form.
    pub fn from_events(events: Vec<Event>, num_nodes: usize, edge_dim: usize, node_dim: usize) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if e.source == PAD || e.destination == PAD {
                return Err(Error::Usage(format!("event {i} uses the padding id 0")));
            }
            if e.source as usize > num_nodes || e.destination as usize > num_nodes {
                return Err(Error::UnknownNode(e.source.max(e.destination)));
            }
            if e.features.len() != edge_dim {
                return Err(Error::shape("edge features", &[edge_dim], &[e.features.len()]));
            }
            if i > 0 && events[i - 1].timestamp > e.timestamp {
                return Err(Error::Usage(format!("event {i} is out of timestamp order")));
            }
        }
        Ok(EventStream {
            events,
            num_nodes,
            edge_dim,
            node_features: NodeFeatureTable::zeros(num_nodes, node_dim),
            offset: 0,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_dim
    }

    pub fn node_dim(&self) -> usize {
        self.node_features.dim()
    }

    pub fn node_features(&self) -> &NodeFeatureTable {
        &self.node_features
    }

    pub fn node_features_mut(&mut self) -> &mut NodeFeatureTable {
        &mut self.node_features
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    /// Global index (in the parent stream) of local event `i`.
    pub fn global_index(&self, i: usize) -> usize {
        self.offset + i
    }

    pub fn time_range(&self) -> Option<(f64, f64)> {
        Some((self.events.first()?.timestamp, self.events.last()?.timestamp))
    }

    fn slice(&self, start: usize, end: usize) -> EventStream {
        EventStream {
            events: self.events[start..end].to_vec(),
            num_nodes: self.num_nodes,
            edge_dim: self.edge_dim,
            node_features: self.node_features.clone(),
            offset: self.offset + start,
        }
    }

    /// Events with timestamp strictly before `t`.
    pub fn before(&self, t: f64) -> EventStream {
        let end = self.events.partition_point(|e| e.timestamp < t);
        self.slice(0, end)
    }

    /// Keeps only events for which `keep` holds. Offsets are reset because
    /// the result is no longer contiguous.
    pub fn filtered(&self, mut keep: impl FnMut(&Event) -> bool) -> EventStream {
        EventStream {
            events: self.events.iter().filter(|e| keep(e)).cloned().collect(),
            num_nodes: self.num_nodes,
            edge_dim: self.edge_dim,
            node_features: self.node_features.clone(),
            offset: 0,
        }
    }

    /// Concatenates contiguous pieces back into one stream.
    pub fn concat(parts: &[EventStream]) -> Result<EventStream> {
        let first = parts.first().ok_or_else(|| Error::Empty("nothing to concatenate".into()))?;
        let mut events = Vec::new();
        for p in parts {
            events.extend_from_slice(&p.events);
        }
        Ok(EventStream {
            events,
            num_nodes: first.num_nodes,
            edge_dim: first.edge_dim,
            node_features: first.node_features.clone(),
            offset: first.offset,
        })
    }

    /// Node ids that occur in at least one event.
    pub fn active_nodes(&self) -> BTreeSet<u32> {
        self.events
            .iter()
            .flat_map(|e| [e.source, e.destination])
            .collect()
    }
}

/// Contiguous train/validation/test split sizes `⌊N·r⌋`, with the rounding
/// remainder assigned to train.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Usage(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let val = (n as f64 * b).floor() as usize;
    let test = (n as f64 * c).floor() as usize;
    Ok((n - val - test, val, test))
}

pub fn chronological_split(s: &EventStream, ratios: (f64, f64, f64)) -> Result<[EventStream; 3]> {
    if s.is_empty() {
        return Err(Error::Empty("cannot split an empty stream".into()));
    }
    let (train, val, _) = split_sizes(s.len(), ratios)?;
    Ok([
        s.slice(0, train),
        s.slice(train, train + val),
        s.slice(train + val, s.len()),
    ])
}

/// Picks `ratio` of the nodes active in `held_out` (rounded up, at least one)
/// to be unseen during training.
pub fn inductive_node_mask(held_out: &[&EventStream], ratio: f64, seed: u64) -> Result<HashSet<u32>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Usage(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let mut nodes: Vec<u32> = held_out
        .iter()
        .flat_map(|s| s.active_nodes())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let k = ((nodes.len() as f64 * ratio).ceil() as usize).min(nodes.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    nodes.shuffle(&mut rng);
    Ok(nodes.into_iter().take(k).collect())
}

/// Train events that touch no masked node.
pub fn mask_train(train: &EventStream, masked: &HashSet<u32>) -> EventStream {
    train.filtered(|e| !masked.contains(&e.source) && !masked.contains(&e.destination))
}
