//! Per-round random peer graphs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

/// Directed peer graph for one round: each active client points at the peers
/// it will send its compressed model to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerGraph {
    pub round: u32,
    /// sender → sorted receiver list.
    edges: BTreeMap<u32, Vec<u32>>,
}

impl PeerGraph {
    pub fn receivers(&self, sender: u32) -> &[u32] {
        self.edges.get(&sender).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn senders(&self) -> impl Iterator<Item = (&u32, &Vec<u32>)> {
        self.edges.iter()
    }

    pub fn out_degree(&self, sender: u32) -> usize {
        self.receivers(sender).len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(Vec::len).sum()
    }
}

/// Every client draws min(n, |S|−1) distinct peers uniformly without
/// replacement from the other active clients. Clients are visited in id
/// order, so the graph is a pure function of the rng state.
pub fn build_peer_graph(active: &BTreeSet<u32>, n: usize, round: u32, rng: &mut ChaCha8Rng) -> PeerGraph {
    let ids: Vec<u32> = active.iter().copied().collect();
    let mut edges = BTreeMap::new();
    for &sender in &ids {
        let mut pool: Vec<u32> = ids.iter().copied().filter(|&c| c != sender).collect();
        let deg = n.min(pool.len());
        // Partial Fisher-Yates: the first `deg` slots end up a uniform
        // without-replacement sample.
        for slot in 0..deg {
            let pick = rng.random_range(slot..pool.len());
            pool.swap(slot, pick);
        }
        let mut receivers: Vec<u32> = pool[..deg].to_vec();
        receivers.sort_unstable();
        edges.insert(sender, receivers);
    }
    PeerGraph { round, edges }
}
