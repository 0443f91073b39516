//! Label-setting shortest paths with deterministic tie-breaking by edge rank.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::network::RoadNetwork;

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    dist: f64,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest-path tree from `origin` under per-edge `costs`.
///
/// `pred[v]` is the incoming tree edge of `v`; among edges attaining the
/// label exactly, the one with the smallest id rank wins.
pub struct ShortestPathTree {
    pub dist: Vec<f64>,
    pub pred: Vec<Option<usize>>,
}

impl ShortestPathTree {
    /// Edge sequence from the tree root to `dest`, or `None` if unreachable.
    pub fn path_to(&self, network: &RoadNetwork, dest: usize) -> Option<Vec<usize>> {
        if !self.dist[dest].is_finite() {
            return None;
        }
        let mut path = Vec::new();
        let mut v = dest;
        while let Some(a) = self.pred[v] {
            path.push(a);
            v = network.tail(a);
        }
        path.reverse();
        Some(path)
    }
}

pub fn shortest_path_tree(network: &RoadNetwork, origin: usize, costs: &[f64]) -> ShortestPathTree {
    let n = network.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[origin] = 0.0;
    heap.push(Entry { dist: 0.0, node: origin });
    while let Some(Entry { dist: d, node: u }) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        for &a in network.out_edges(u) {
            let v = network.head(a);
            let nd = d + costs[a];
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Entry { dist: nd, node: v });
            }
        }
    }
    let mut pred = vec![None; n];
    for v in 0..n {
        if v == origin || !dist[v].is_finite() {
            continue;
        }
        let mut best: Option<usize> = None;
        for &a in network.in_edges(v) {
            let u = network.tail(a);
            if dist[u].is_finite() && dist[u] + costs[a] == dist[v] {
                let better = match best {
                    None => true,
                    Some(b) => network.edge_rank(a) < network.edge_rank(b),
                };
                if better {
                    best = Some(a);
                }
            }
        }
        pred[v] = best;
    }
    ShortestPathTree { dist, pred }
}

/// Lexicographically smallest (by edge id) among the shortest paths from
/// `from` to `to`, skipping banned edges and nodes.
pub(crate) fn lexmin_shortest_path(
    network: &RoadNetwork,
    from: usize,
    to: usize,
    costs: &[f64],
    banned_edge: &[bool],
    banned_node: &[bool],
) -> Option<Vec<usize>> {
    if banned_node[from] || banned_node[to] {
        return None;
    }
    let n = network.node_count();
    // distances to `to`, stopping once `from` is settled
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[to] = 0.0;
    heap.push(Entry { dist: 0.0, node: to });
    while let Some(Entry { dist: d, node: v }) = heap.pop() {
        if done[v] {
            continue;
        }
        done[v] = true;
        if v == from {
            break;
        }
        for &a in network.in_edges(v) {
            if banned_edge[a] {
                continue;
            }
            let u = network.tail(a);
            if banned_node[u] {
                continue;
            }
            let nd = d + costs[a];
            if nd < dist[u] {
                dist[u] = nd;
                heap.push(Entry { dist: nd, node: u });
            }
        }
    }
    if !done[from] {
        return None;
    }
    let mut path = Vec::new();
    let mut u = from;
    while u != to {
        let tol = 1e-12 * dist[u].abs().max(1.0);
        let mut best: Option<usize> = None;
        for &a in network.out_edges(u) {
            if banned_edge[a] {
                continue;
            }
            let v = network.head(a);
            if banned_node[v] || !done[v] {
                continue;
            }
            if (dist[u] - (costs[a] + dist[v])).abs() <= tol && dist[v] < dist[u] {
                let better = match best {
                    None => true,
                    Some(b) => network.edge_rank(a) < network.edge_rank(b),
                };
                if better {
                    best = Some(a);
                }
            }
        }
        let a = best?;
        path.push(a);
        u = network.head(a);
    }
    Some(path)
}
