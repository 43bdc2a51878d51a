//! Seeded synthetic streams with planted temporal structure.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EventStream, RawEvent};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Users and items in a fixed perfect matching; each user meets its
    /// partner once per `period`, at its own phase.
    PeriodicBipartite,
    /// Skewed-activity random graph. With probability `p_close` an event
    /// closes a temporal wedge `u - a - w`: `a` is one of the
    /// `recent_window` latest partners of `u`, and `w` is the latest partner
    /// of `a` that is not among them.
    TriadicClosure,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "periodic-bipartite" => Ok(SyntheticKind::PeriodicBipartite),
            "triadic-closure" => Ok(SyntheticKind::TriadicClosure),
            _ => Err(Error::Usage(format!(
                "unknown synthetic kind `{s}` (expected periodic-bipartite or triadic-closure)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticParams {
    pub num_nodes: usize,
    pub num_events: usize,
    pub edge_dim: usize,
    /// Periodic-bipartite only.
    pub period: u64,
    /// Triadic-closure only.
    pub p_close: f64,
    /// Exponent of the Zipf-like activity distribution (triadic-closure).
    pub activity_skew: f64,
    /// How many of a node's latest partners can open a wedge (triadic-closure).
    pub recent_window: usize,
}

impl SyntheticParams {
    pub fn periodic(num_nodes: usize, num_events: usize, period: u64) -> Self {
        SyntheticParams {
            num_nodes,
            num_events,
            edge_dim: 2,
            period,
            p_close: 0.0,
            activity_skew: 1.0,
            recent_window: 5,
        }
    }

    pub fn triadic(num_nodes: usize, num_events: usize, p_close: f64) -> Self {
        SyntheticParams {
            num_nodes,
            num_events,
            edge_dim: 2,
            period: 1,
            p_close,
            activity_skew: 1.0,
            recent_window: 5,
        }
    }

    fn validate(&self, kind: SyntheticKind) -> Result<()> {
        if self.num_nodes < 2 || self.num_events < 1 {
            return Err(Error::Usage("synthetic streams need at least 2 nodes and 1 event".into()));
        }
        match kind {
            SyntheticKind::PeriodicBipartite if self.period == 0 => {
                Err(Error::Usage("period must be positive".into()))
            }
            SyntheticKind::TriadicClosure
                if !(0.0..=1.0).contains(&self.p_close) || self.recent_window == 0 || self.activity_skew < 0.0 =>
            {
                Err(Error::Usage(
                    "p_close must lie in [0, 1], recent_window must be positive and activity_skew non-negative".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

pub fn generate_synthetic(kind: SyntheticKind, params: &SyntheticParams, seed: u64) -> Result<EventStream> {
    params.validate(kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = match kind {
        SyntheticKind::PeriodicBipartite => periodic(params, &mut rng),
        SyntheticKind::TriadicClosure => triadic(params, &mut rng)?,
    };
    EventStream::from_raw(raw, 0)
}

fn features(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.gen::<f64>()).collect()
}

fn periodic(p: &SyntheticParams, rng: &mut ChaCha8Rng) -> Vec<RawEvent> {
    let users = p.num_nodes / 2;
    let mut items: Vec<u64> = (users as u64 + 1..=p.num_nodes as u64).collect();
    items.shuffle(rng);
    let mut raw = Vec::with_capacity(p.num_events);
    let mut t: u64 = 0;
    while raw.len() < p.num_events {
        for user in 0..users as u64 {
            if user % p.period == t % p.period && raw.len() < p.num_events {
                let f = features(rng, p.edge_dim);
                raw.push((user + 1, items[user as usize], t as f64, f, None));
            }
        }
        t += 1;
    }
    raw
}

fn triadic(p: &SyntheticParams, rng: &mut ChaCha8Rng) -> Result<Vec<RawEvent>> {
    let n = p.num_nodes;
    let mut rank: Vec<usize> = (1..=n).collect();
    rank.shuffle(rng);
    let weights: Vec<f64> = rank.iter().map(|&r| (r as f64).powf(-p.activity_skew)).collect();
    let activity = WeightedIndex::new(&weights).map_err(|e| Error::Usage(e.to_string()))?;

    let mut partners: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut raw = Vec::with_capacity(p.num_events);
    for k in 0..p.num_events {
        let u = activity.sample(rng);
        let mut w = None;
        if rng.gen::<f64>() < p.p_close && !partners[u].is_empty() {
            let recent = &partners[u][partners[u].len().saturating_sub(p.recent_window)..];
            let a = *recent.choose(rng).expect("non-empty");
            // Most recent partner of `a` that is not already a recent partner of `u`.
            w = partners[a]
                .iter()
                .rev()
                .copied()
                .find(|&x| x != u && !recent.contains(&x));
        }
        let w = match w {
            Some(w) => w,
            None => loop {
                let x = activity.sample(rng);
                if x != u {
                    break x;
                }
            },
        };
        partners[u].push(w);
        partners[w].push(u);
        let f = features(rng, p.edge_dim);
        raw.push((u as u64 + 1, w as u64 + 1, k as f64, f, None));
    }
    Ok(raw)
}
