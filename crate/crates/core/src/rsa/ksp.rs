//! Loopless k-shortest paths (Yen) with a total, deterministic path order.
//!
//! Paths compare by `(length_km, hop count, node sequence)`. The order is
//! prefix-consistent (for a fixed root, comparing full paths equals comparing
//! spur paths), which is what Yen's deviation argument needs to return
//! exactly the first `k` simple paths of that order.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::topology::{LinkId, Network, NodeId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePath {
    pub nodes: Vec<NodeId>,
    pub links: Vec<LinkId>,
    pub length_km: f64,
}

impl CandidatePath {
    /// Builds a path from its node and link sequences, summing link lengths
    /// from the source end.
    pub fn new(net: &Network, nodes: Vec<NodeId>, links: Vec<LinkId>) -> Self {
        debug_assert_eq!(nodes.len(), links.len() + 1);
        let length_km = links.iter().map(|&l| net.link(l).length_km).sum();
        Self {
            nodes,
            links,
            length_km,
        }
    }

    pub fn hop_count(&self) -> usize {
        self.links.len()
    }

    pub fn src(&self) -> NodeId {
        self.nodes[0]
    }

    pub fn dst(&self) -> NodeId {
        *self.nodes.last().expect("path has nodes")
    }

    /// The total order used for KSP ranking and tie-breaks.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        self.length_km
            .total_cmp(&other.length_km)
            .then(self.hop_count().cmp(&other.hop_count()))
            .then_with(|| self.nodes.cmp(&other.nodes))
    }
}

struct Ranked(CandidatePath);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    // Reversed so the max-heap pops the smallest path.
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.rank_cmp(&self.0)
    }
}

/// Up to `k` loopless `src → dst` paths in ascending rank order. Returns an
/// empty list when `src == dst`, `k == 0`, or no path exists.
pub fn k_shortest_paths(net: &Network, src: NodeId, dst: NodeId, k: usize) -> Vec<CandidatePath> {
    if src == dst || k == 0 {
        return Vec::new();
    }
    let search = SpurSearch::new(net, dst);
    let n = net.node_count();
    let Some(first) = search.best_path(src, &vec![false; n], &BTreeSet::new()) else {
        return Vec::new();
    };
    let mut accepted = vec![first];
    let mut pending = BinaryHeap::new();
    let mut seen: BTreeSet<Vec<NodeId>> = BTreeSet::new();
    seen.insert(accepted[0].nodes.clone());

    while accepted.len() < k {
        let prev = accepted.last().expect("nonempty").clone();
        for i in 0..prev.hop_count() {
            let spur = prev.nodes[i];
            let root_nodes = &prev.nodes[..=i];
            let root_links = &prev.links[..i];

            let mut banned_links = BTreeSet::new();
            for p in &accepted {
                if p.nodes.len() > i + 1 && &p.nodes[..=i] == root_nodes {
                    banned_links.insert(p.links[i]);
                }
            }
            let mut banned_nodes = vec![false; n];
            for &v in &root_nodes[..i] {
                banned_nodes[v] = true;
            }

            if let Some(tail) = search.best_path(spur, &banned_nodes, &banned_links) {
                let mut nodes = root_nodes.to_vec();
                nodes.extend_from_slice(&tail.nodes[1..]);
                if seen.insert(nodes.clone()) {
                    let mut links = root_links.to_vec();
                    links.extend_from_slice(&tail.links);
                    pending.push(Ranked(CandidatePath::new(net, nodes, links)));
                }
            }
        }
        match pending.pop() {
            Some(Ranked(next)) => accepted.push(next),
            None => break,
        }
    }
    accepted
}

/// Best-path search towards a fixed destination under the rank order.
struct SpurSearch<'a> {
    net: &'a Network,
    dst: NodeId,
    /// Incoming `(from, link)` pairs per node.
    reverse: Vec<Vec<(NodeId, LinkId)>>,
}

impl<'a> SpurSearch<'a> {
    fn new(net: &'a Network, dst: NodeId) -> Self {
        let mut reverse = vec![Vec::new(); net.node_count()];
        for from in 0..net.node_count() {
            for &(to, link) in net.neighbours(from) {
                reverse[to].push((from, link));
            }
        }
        Self { net, dst, reverse }
    }

    /// Rank-minimal path `from → dst` avoiding banned nodes and links.
    ///
    /// A backward Dijkstra labels every node with its lexicographically
    /// smallest `(distance, hops)` to `dst`; the path is then walked forward
    /// taking the lowest-numbered successor that stays optimal, which yields
    /// the lexicographically smallest node sequence among optimal paths.
    fn best_path(
        &self,
        from: NodeId,
        banned_nodes: &[bool],
        banned_links: &BTreeSet<LinkId>,
    ) -> Option<CandidatePath> {
        let n = self.net.node_count();
        if banned_nodes[self.dst] || banned_nodes[from] {
            return None;
        }
        let mut label: Vec<Option<(f64, usize)>> = vec![None; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        label[self.dst] = Some((0.0, 0));
        heap.push(HeapEntry {
            dist: 0.0,
            hops: 0,
            node: self.dst,
        });
        while let Some(HeapEntry { node, .. }) = heap.pop() {
            if done[node] {
                continue;
            }
            done[node] = true;
            let (d, h) = label[node].expect("labelled");
            for &(prev, link) in &self.reverse[node] {
                if banned_nodes[prev] || banned_links.contains(&link) || done[prev] {
                    continue;
                }
                let cand = (self.net.link(link).length_km + d, h + 1);
                if label[prev].is_none_or(|cur| better(cand, cur)) {
                    label[prev] = Some(cand);
                    heap.push(HeapEntry {
                        dist: cand.0,
                        hops: cand.1,
                        node: prev,
                    });
                }
            }
        }
        label[from]?;

        let mut nodes = vec![from];
        let mut links = Vec::new();
        let mut at = from;
        while at != self.dst {
            let (d, h) = label[at].expect("on an optimal path");
            let step = self
                .net
                .neighbours(at)
                .iter()
                .filter(|(next, link)| !banned_nodes[*next] && !banned_links.contains(link))
                .find(|(next, link)| {
                    label[*next].is_some_and(|(dn, hn)| {
                        hn + 1 == h && self.net.link(*link).length_km + dn == d
                    })
                })
                .copied()
                .expect("an optimal successor exists");
            nodes.push(step.0);
            links.push(step.1);
            at = step.0;
        }
        Some(CandidatePath::new(self.net, nodes, links))
    }
}

fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)) == Ordering::Less
}

#[derive(Debug, Clone, Copy)]
struct HeapEntry {
    dist: f64,
    hops: usize,
    node: NodeId,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then(other.hops.cmp(&self.hops))
            .then(other.node.cmp(&self.node))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{LinkSpec, SpectrumConfig, TopologyFile};

    fn graph(nodes: &[&str], links: &[(&str, &str, f64)]) -> Network {
        Network::from_file(
            &TopologyFile {
                name: None,
                nodes: nodes.iter().map(|s| s.to_string()).collect(),
                links: links
                    .iter()
                    .map(|(a, b, l)| LinkSpec {
                        a: a.to_string(),
                        b: b.to_string(),
                        length_km: *l,
                    })
                    .collect(),
            },
            SpectrumConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn triangle() {
        let net = graph(&["A", "B", "C"], &[("A", "B", 1.0), ("B", "C", 1.0), ("A", "C", 3.0)]);
        let paths = k_shortest_paths(&net, 0, 2, 2);
        assert_eq!(paths.len(), 2);
        assert_eq!(paths[0].nodes, vec![0, 1, 2]);
        assert_eq!(paths[0].length_km, 2.0);
        assert_eq!(paths[1].nodes, vec![0, 2]);
        assert_eq!(paths[1].length_km, 3.0);
        let one = k_shortest_paths(&net, 0, 2, 1);
        assert_eq!(one, paths[..1].to_vec());
    }

    #[test]
    fn degenerate_requests_are_empty() {
        let net = graph(&["A", "B"], &[("A", "B", 1.0)]);
        assert!(k_shortest_paths(&net, 0, 0, 3).is_empty());
        assert!(k_shortest_paths(&net, 0, 1, 0).is_empty());
        assert_eq!(k_shortest_paths(&net, 0, 1, 5).len(), 1);
    }

    #[test]
    fn equal_length_prefers_fewer_hops_then_lexicographic() {
        // A-D direct (2), A-B-D (1+1), A-C-D (1+1), A-B-C-D would be 3.
        let net = graph(
            &["A", "B", "C", "D"],
            &[
                ("A", "D", 2.0),
                ("A", "B", 1.0),
                ("B", "D", 1.0),
                ("A", "C", 1.0),
                ("C", "D", 1.0),
            ],
        );
        let paths = k_shortest_paths(&net, 0, 3, 3);
        let seqs: Vec<_> = paths.iter().map(|p| p.nodes.clone()).collect();
        assert_eq!(seqs, vec![vec![0, 3], vec![0, 1, 3], vec![0, 2, 3]]);
    }

    #[test]
    fn nsfnet_paths_are_simple_and_sorted() {
        let net = Network::nsfnet(SpectrumConfig::default()).unwrap();
        for (s, d) in [(0, 13), (1, 9), (4, 11)] {
            let paths = k_shortest_paths(&net, s, d, 5);
            assert_eq!(paths.len(), 5);
            for w in paths.windows(2) {
                assert_eq!(w[0].rank_cmp(&w[1]), Ordering::Less);
            }
            for p in &paths {
                let set: BTreeSet<_> = p.nodes.iter().collect();
                assert_eq!(set.len(), p.nodes.len());
                assert_eq!((p.src(), p.dst()), (s, d));
            }
        }
    }
}
