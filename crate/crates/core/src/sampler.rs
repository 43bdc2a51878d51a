//! Budgeted higher-order temporal neighbourhoods and co-occurrence counts.
//!
//! For a query `(u, t)` the 1-hop list holds the `s_1` most recent
//! interactions of `u` before `t`. Each further hop extends every entry of
//! the previous hop `(u, a, t')` with the `s_next` most recent interactions
//! of `a` before the query time `t` (not before `t'`). Self-loops that come
//! back to `u` are kept.

use std::collections::HashMap;

use crate::ctdg::{TemporalAdjacencyIndex, PAD};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interaction {
    pub neighbor: u32,
    pub timestamp: f64,
    pub event_index: usize,
    pub hop: usize,
}

/// Interactions of `owner` before `query_time`, ascending by
/// `(timestamp, event_index, hop)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionList {
    pub owner: u32,
    pub query_time: f64,
    pub entries: Vec<Interaction>,
}

impl InteractionList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_hop(&self) -> usize {
        self.entries.iter().map(|e| e.hop).max().unwrap_or(0)
    }

    fn check_no_leakage(&self) {
        debug_assert!(
            self.entries.iter().all(|e| e.timestamp < self.query_time),
            "interaction at or after query time {}",
            self.query_time
        );
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    /// `(s_1, s_2, ..., s_k)`.
    pub budgets: Vec<usize>,
    pub seq_cap: usize,
}

impl SamplerConfig {
    pub fn new(budgets: Vec<usize>, seq_cap: usize) -> Result<Self> {
        let cfg = SamplerConfig { budgets, seq_cap };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.budgets.first().map_or(true, |&s1| s1 == 0) {
            return Err(Error::Config("s_1 must be at least 1".into()));
        }
        if self.seq_cap == 0 {
            return Err(Error::Config("seq_cap must be at least 1".into()));
        }
        Ok(())
    }

    pub fn hops(&self) -> usize {
        self.budgets.len()
    }
}

fn sort_entries(entries: &mut [Interaction]) {
    entries.sort_by(|a, b| {
        a.timestamp
            .total_cmp(&b.timestamp)
            .then(a.event_index.cmp(&b.event_index))
            .then(a.hop.cmp(&b.hop))
    });
}

/// The `s1` most recent interactions of `u` strictly before `t`, ascending.
pub fn extract_1hop(index: &TemporalAdjacencyIndex, u: u32, t: f64, s1: usize) -> InteractionList {
    let prior = index.neighbors_before(u, t);
    let entries = prior[prior.len().saturating_sub(s1)..]
        .iter()
        .map(|a| Interaction {
            neighbor: a.neighbor,
            timestamp: a.timestamp,
            event_index: a.event,
            hop: 1,
        })
        .collect();
    let list = InteractionList {
        owner: u,
        query_time: t,
        entries,
    };
    list.check_no_leakage();
    list
}

/// Appends one more hop from the entries of the current highest hop, then
/// keeps the `seq_cap` most recent entries. `s_next = 0` returns `s`
/// unchanged.
pub fn extend_khop(
    index: &TemporalAdjacencyIndex,
    s: &InteractionList,
    s_next: usize,
    t: f64,
    seq_cap: usize,
) -> InteractionList {
    if s_next == 0 || s.is_empty() {
        return s.clone();
    }
    let k = s.max_hop();
    let mut entries = s.entries.clone();
    for e in s.entries.iter().filter(|e| e.hop == k) {
        let prior = index.neighbors_before(e.neighbor, t);
        entries.extend(prior[prior.len().saturating_sub(s_next)..].iter().map(|a| Interaction {
            neighbor: a.neighbor,
            timestamp: a.timestamp,
            event_index: a.event,
            hop: k + 1,
        }));
    }
    sort_entries(&mut entries);
    let drop = entries.len().saturating_sub(seq_cap);
    entries.drain(..drop);
    let list = InteractionList {
        owner: s.owner,
        query_time: t,
        entries,
    };
    list.check_no_leakage();
    list
}

/// Full k-hop extraction for one endpoint.
pub fn sample(index: &TemporalAdjacencyIndex, u: u32, t: f64, cfg: &SamplerConfig) -> InteractionList {
    let mut list = extract_1hop(index, u, t, cfg.budgets[0]);
    for (hop, &s_next) in cfg.budgets.iter().enumerate().skip(1) {
        // Truncation may have removed the whole frontier.
        if list.max_hop() != hop {
            break;
        }
        list = extend_khop(index, &list, s_next, t, cfg.seq_cap);
    }
    let drop = list.entries.len().saturating_sub(cfg.seq_cap);
    list.entries.drain(..drop);
    list
}

/// Per-entry neighbour counts. Columns are always `[count in S_u, count in
/// S_v]`, for the rows of either list.
pub type CooccurrenceMatrix = Vec<[u32; 2]>;

fn counts(list: &InteractionList) -> HashMap<u32, u32> {
    let mut m = HashMap::new();
    for e in list.entries.iter().filter(|e| e.neighbor != PAD) {
        *m.entry(e.neighbor).or_insert(0) += 1;
    }
    m
}

pub fn cooccurrence_counts(s_u: &InteractionList, s_v: &InteractionList) -> (CooccurrenceMatrix, CooccurrenceMatrix) {
    let (cu, cv) = (counts(s_u), counts(s_v));
    let rows = |list: &InteractionList| {
        list.entries
            .iter()
            .map(|e| {
                if e.neighbor == PAD {
                    [0, 0]
                } else {
                    [
                        cu.get(&e.neighbor).copied().unwrap_or(0),
                        cv.get(&e.neighbor).copied().unwrap_or(0),
                    ]
                }
            })
            .collect()
    };
    (rows(s_u), rows(s_v))
}
