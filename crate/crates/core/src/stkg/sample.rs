use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Stkg;
use crate::data::Sequence;
use crate::rng::{self, stream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub parent: u32,
    pub relation: u32,
    pub child: u32,
}

/// Layered fanout sample rooted at the items of one sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgraph {
    /// One entity per sequence position, 0 for padding.
    pub centers: Vec<u32>,
    pub user_node: u32,
    /// `layers[l]` holds the edges sampled at depth `l + 1`.
    pub layers: Vec<Vec<Edge>>,
    /// Distinct non-pad centers without any edge in the graph.
    pub cold: usize,
}

impl Subgraph {
    pub fn edges(&self) -> impl Iterator<Item = &Edge> + '_ {
        self.layers.iter().flatten()
    }

    pub fn num_edges(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Distinct entities: non-pad centers, sampled children and the user.
    pub fn nodes(&self) -> BTreeSet<u32> {
        let mut s: BTreeSet<u32> = self.centers.iter().copied().filter(|&c| c != 0).collect();
        s.extend(self.edges().map(|e| e.child));
        s.insert(self.user_node);
        s
    }
}

/// Samples `min(fanout, degree)` distinct adjacency entries per frontier node,
/// uniformly and without replacement, for each depth in turn. A node is
/// expanded at most once. The user node is part of the subgraph but is not a
/// sampling root. Deterministic in `(seed, seq.id)`.
pub fn sample_subgraph(seq: &Sequence, graph: &Stkg, fanouts: &[usize], seed: u64) -> Result<Subgraph> {
    if fanouts.is_empty() || fanouts.contains(&0) {
        return Err(Error::invalid(format!("fanouts must be positive, got {fanouts:?}")));
    }
    if seq.user == 0 || seq.user as usize > graph.num_users() {
        return Err(Error::Consistency(format!("user {} outside the graph", seq.user)));
    }
    let mut centers = Vec::with_capacity(seq.items.len());
    for &item in &seq.items {
        if item as usize > graph.num_takeaways() {
            return Err(Error::Consistency(format!("takeaway {item} outside the graph")));
        }
        centers.push(graph.takeaway_entity(item));
    }

    let mut rng = rng::derived(seed, &[stream::SUBGRAPH, seq.id as u64]);
    let mut expanded = BTreeSet::new();
    let mut frontier: Vec<u32> = Vec::new();
    for &c in &centers {
        if c != 0 && expanded.insert(c) {
            frontier.push(c);
        }
    }
    let cold = frontier.iter().filter(|&&c| graph.degree(c) == 0).count();

    let mut layers = Vec::with_capacity(fanouts.len());
    for &s in fanouts {
        let mut edges = Vec::new();
        let mut next = Vec::new();
        for &parent in &frontier {
            let nb = graph.neighbors(parent);
            let k = s.min(nb.len());
            let mut picked = rand::seq::index::sample(&mut rng, nb.len(), k).into_vec();
            picked.sort_unstable();
            for i in picked {
                let (relation, child) = nb[i];
                edges.push(Edge { parent, relation, child });
                if expanded.insert(child) {
                    next.push(child);
                }
            }
        }
        layers.push(edges);
        frontier = next;
    }
    Ok(Subgraph { centers, user_node: graph.user_entity(seq.user), layers, cold })
}
