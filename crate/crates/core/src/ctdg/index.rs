use super::EventStream;

/// One incident event seen from a node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adjacency {
    pub neighbor: u32,
    pub timestamp: f64,
    /// Global event index.
    pub event: usize,
}

/// Per-node, time-ascending incident events (undirected view).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TemporalAdjacencyIndex {
    lists: Vec<Vec<Adjacency>>,
}

impl TemporalAdjacencyIndex {
    pub fn build(s: &EventStream) -> Self {
        let mut lists = vec![Vec::new(); s.num_nodes() + 1];
        for (i, e) in s.events().iter().enumerate() {
            let event = s.global_index(i);
            lists[e.source as usize].push(Adjacency {
                neighbor: e.destination,
                timestamp: e.timestamp,
                event,
            });
            lists[e.destination as usize].push(Adjacency {
                neighbor: e.source,
                timestamp: e.timestamp,
                event,
            });
        }
        TemporalAdjacencyIndex { lists }
    }

    pub fn num_nodes(&self) -> usize {
        self.lists.len().saturating_sub(1)
    }

    /// All incident events of `node`; empty for unknown ids.
    pub fn neighbors(&self, node: u32) -> &[Adjacency] {
        self.lists.get(node as usize).map_or(&[], Vec::as_slice)
    }

    /// Incident events of `node` with timestamp strictly before `t`.
    pub fn neighbors_before(&self, node: u32, t: f64) -> &[Adjacency] {
        let list = self.neighbors(node);
        &list[..list.partition_point(|a| a.timestamp < t)]
    }

    pub fn entry_count(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }
}

pub fn build_index(s: &EventStream) -> TemporalAdjacencyIndex {
    TemporalAdjacencyIndex::build(s)
}
