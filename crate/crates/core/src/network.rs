//! Road network representation: supernodes, superedges, the node-edge
//! incidence matrix, BPR congestion functions and structural checks.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.15;
pub const DEFAULT_BETA: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SuperNode {
    pub id: String,
    pub label: String,
    /// Informational only; never used in computations.
    pub lat: Option<f64>,
    pub lon: Option<f64>,
}

impl SuperNode {
    pub fn new(id: impl Into<String>) -> Self {
        let id = id.into();
        SuperNode {
            label: id.clone(),
            id,
            lat: None,
            lon: None,
        }
    }
}

/// A directed carriageway between two supernodes.
///
/// Units: km, vehicles/hour, hours.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperEdge {
    pub id: String,
    pub tail: String,
    pub head: String,
    pub length_km: f64,
    pub capacity_vph: f64,
    pub free_flow_time_h: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl SuperEdge {
    /// Edge with the standard BPR coefficients.
    pub fn new(
        id: impl Into<String>,
        tail: impl Into<String>,
        head: impl Into<String>,
        length_km: f64,
        capacity_vph: f64,
        free_flow_time_h: f64,
    ) -> Self {
        SuperEdge {
            id: id.into(),
            tail: tail.into(),
            head: head.into(),
            length_km,
            capacity_vph,
            free_flow_time_h,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

fn check_flow(flow: f64) -> Result<()> {
    if !(flow >= 0.0) || !flow.is_finite() {
        return Err(Error::InvalidInput(format!(
            "flow must be finite and non-negative, got {flow}"
        )));
    }
    Ok(())
}

/// BPR travel time `t0 * (1 + alpha * (x / m)^beta)` in hours.
pub fn bpr_travel_time(edge: &SuperEdge, flow: f64) -> Result<f64> {
    check_flow(flow)?;
    Ok(bpr_time_unchecked(edge, flow))
}

pub(crate) fn bpr_time_unchecked(edge: &SuperEdge, flow: f64) -> f64 {
    let ratio = flow / edge.capacity_vph;
    edge.free_flow_time_h * (1.0 + edge.alpha * ratio.powf(edge.beta))
}

/// Integral of the BPR function from 0 to `flow` (one Beckmann term).
pub fn bpr_integral(edge: &SuperEdge, flow: f64) -> Result<f64> {
    check_flow(flow)?;
    Ok(bpr_integral_unchecked(edge, flow))
}

pub(crate) fn bpr_integral_unchecked(edge: &SuperEdge, flow: f64) -> f64 {
    let t0 = edge.free_flow_time_h;
    let b1 = edge.beta + 1.0;
    t0 * flow + t0 * edge.alpha * flow * (flow / edge.capacity_vph).powf(edge.beta) / b1
}

/// Outcome of [`RoadNetwork::validate`]. Passes iff `failures` is empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetworkReport {
    pub strongly_connected: bool,
    pub incidence_ok: bool,
    pub parameters_ok: bool,
    pub failures: Vec<String>,
}

impl NetworkReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Directed road graph. Node and edge order is the construction order and
/// every matrix in the crate indexes by it.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    nodes: Vec<SuperNode>,
    edges: Vec<SuperEdge>,
    node_index: HashMap<String, usize>,
    edge_index: HashMap<String, usize>,
    tails: Vec<usize>,
    heads: Vec<usize>,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
    edge_rank: Vec<usize>,
}

impl PartialEq for RoadNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges
    }
}

impl RoadNetwork {
    /// Builds the network, resolving edge endpoints. Unknown endpoints and
    /// duplicate ids are rejected here; parameter and connectivity problems
    /// are left to [`RoadNetwork::validate`].
    pub fn new(nodes: Vec<SuperNode>, edges: Vec<SuperEdge>) -> Result<Self> {
        let mut node_index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if node_index.insert(n.id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate node id {}", n.id)));
            }
        }
        let mut edge_index = HashMap::with_capacity(edges.len());
        let mut tails = Vec::with_capacity(edges.len());
        let mut heads = Vec::with_capacity(edges.len());
        let mut out_edges = vec![Vec::new(); nodes.len()];
        let mut in_edges = vec![Vec::new(); nodes.len()];
        for (a, e) in edges.iter().enumerate() {
            if edge_index.insert(e.id.clone(), a).is_some() {
                return Err(Error::InvalidInput(format!("duplicate edge id {}", e.id)));
            }
            let lookup = |id: &str| {
                node_index.get(id).copied().ok_or_else(|| {
                    Error::InvalidInput(format!("edge {} references unknown node {id}", e.id))
                })
            };
            let t = lookup(&e.tail)?;
            let h = lookup(&e.head)?;
            tails.push(t);
            heads.push(h);
            out_edges[t].push(a);
            in_edges[h].push(a);
        }
        let mut by_id: Vec<usize> = (0..edges.len()).collect();
        by_id.sort_by(|&a, &b| edges[a].id.cmp(&edges[b].id));
        let mut edge_rank = vec![0; edges.len()];
        for (rank, a) in by_id.into_iter().enumerate() {
            edge_rank[a] = rank;
        }
        Ok(RoadNetwork {
            nodes,
            edges,
            node_index,
            edge_index,
            tails,
            heads,
            out_edges,
            in_edges,
            edge_rank,
        })
    }

    pub fn nodes(&self) -> &[SuperNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[SuperEdge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    pub fn edge_index(&self, id: &str) -> Option<usize> {
        self.edge_index.get(id).copied()
    }

    pub fn tail(&self, edge: usize) -> usize {
        self.tails[edge]
    }

    pub fn head(&self, edge: usize) -> usize {
        self.heads[edge]
    }

    pub fn out_edges(&self, node: usize) -> &[usize] {
        &self.out_edges[node]
    }

    pub fn in_edges(&self, node: usize) -> &[usize] {
        &self.in_edges[node]
    }

    /// Position of the edge when all edges are sorted by id. Used for
    /// deterministic tie-breaking that does not depend on file order.
    pub fn edge_rank(&self, edge: usize) -> usize {
        self.edge_rank[edge]
    }

    pub fn pairs(&self) -> OdPairSet {
        OdPairSet::new(self.node_count())
    }

    /// Total degree (in plus out) of a node.
    pub fn degree(&self, node: usize) -> usize {
        self.out_edges[node].len() + self.in_edges[node].len()
    }

    /// Returns a copy with every edge passed through `f`.
    pub fn map_edges(&self, mut f: impl FnMut(usize, &SuperEdge) -> SuperEdge) -> Result<Self> {
        let edges = self.edges.iter().enumerate().map(|(a, e)| f(a, e)).collect();
        RoadNetwork::new(self.nodes.clone(), edges)
    }

    fn reachable(&self, start: usize, forward: bool) -> Vec<bool> {
        let mut seen = vec![false; self.node_count()];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            let adj = if forward { &self.out_edges[v] } else { &self.in_edges[v] };
            for &a in adj {
                let w = if forward { self.heads[a] } else { self.tails[a] };
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen
    }

    pub fn is_strongly_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return false;
        }
        self.reachable(0, true).into_iter().all(|s| s)
            && self.reachable(0, false).into_iter().all(|s| s)
    }

    /// Nodes reachable from `start` following edge direction.
    pub fn reachable_from(&self, start: usize) -> Vec<bool> {
        self.reachable(start, true)
    }

    pub fn validate(&self) -> NetworkReport {
        let mut report = NetworkReport {
            strongly_connected: self.is_strongly_connected(),
            incidence_ok: true,
            parameters_ok: true,
            failures: Vec::new(),
        };
        if !report.strongly_connected {
            report.failures.push("network is not strongly connected".into());
        }
        let n = self.incidence();
        for a in 0..self.edge_count() {
            let col = n.column(a);
            let neg = col.iter().filter(|&&v| v == -1).count();
            let pos = col.iter().filter(|&&v| v == 1).count();
            if neg != 1 || pos != 1 {
                report.incidence_ok = false;
                report
                    .failures
                    .push(format!("incidence column of edge {} is malformed", self.edges[a].id));
            }
        }
        for e in &self.edges {
            let mut bad = Vec::new();
            if e.tail == e.head {
                bad.push("self-loop");
            }
            if !(e.length_km > 0.0) || !e.length_km.is_finite() {
                bad.push("length must be > 0");
            }
            if !(e.capacity_vph > 0.0) || !e.capacity_vph.is_finite() {
                bad.push("capacity must be > 0");
            }
            if !(e.free_flow_time_h > 0.0) || !e.free_flow_time_h.is_finite() {
                bad.push("free-flow time must be > 0");
            }
            if !(e.alpha >= 0.0) {
                bad.push("alpha must be >= 0");
            }
            if !(e.beta >= 1.0) {
                bad.push("beta must be >= 1");
            }
            if !bad.is_empty() {
                report.parameters_ok = false;
                report.failures.push(format!("edge {}: {}", e.id, bad.join(", ")));
            }
        }
        report
    }

    /// Node-edge incidence matrix: -1 at the tail, +1 at the head.
    pub fn incidence(&self) -> DMatrix<i8> {
        let mut n = DMatrix::<i8>::zeros(self.node_count(), self.edge_count());
        for a in 0..self.edge_count() {
            n[(self.tails[a], a)] = -1;
            n[(self.heads[a], a)] = 1;
        }
        n
    }

    /// Subnetwork induced by `nodes` (kept in network order) with every edge
    /// whose endpoints are both inside. Also returns the original indices of
    /// the kept nodes and edges.
    pub fn induced_subnetwork(&self, nodes: &[usize]) -> Result<(RoadNetwork, Vec<usize>, Vec<usize>)> {
        let mut inside = vec![false; self.node_count()];
        for &v in nodes {
            inside[v] = true;
        }
        let node_map: Vec<usize> = (0..self.node_count()).filter(|&v| inside[v]).collect();
        let edge_map: Vec<usize> = (0..self.edge_count())
            .filter(|&a| inside[self.tails[a]] && inside[self.heads[a]])
            .collect();
        let sub = RoadNetwork::new(
            node_map.iter().map(|&v| self.nodes[v].clone()).collect(),
            edge_map.iter().map(|&a| self.edges[a].clone()).collect(),
        )?;
        Ok((sub, node_map, edge_map))
    }
}

/// All ordered node pairs `(o, d)`, `o != d`, in row-major node order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OdPairSet {
    nodes: usize,
}

impl OdPairSet {
    pub fn new(nodes: usize) -> Self {
        OdPairSet { nodes }
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes * self.nodes.saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, origin: usize, dest: usize) -> Option<usize> {
        if origin == dest || origin >= self.nodes || dest >= self.nodes {
            return None;
        }
        let col = if dest < origin { dest } else { dest - 1 };
        Some(origin * (self.nodes - 1) + col)
    }

    pub fn pair(&self, index: usize) -> (usize, usize) {
        let origin = index / (self.nodes - 1);
        let col = index % (self.nodes - 1);
        let dest = if col < origin { col } else { col + 1 };
        (origin, dest)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).map(move |i| self.pair(i))
    }
}

/// One observation `x^j` of mean hourly flows, aligned with network edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSnapshot {
    pub label: String,
    pub flows: Vec<f64>,
}

/// The sample set J of flow snapshots for one time bin.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSampleSet {
    edge_count: usize,
    snapshots: Vec<FlowSnapshot>,
}

impl FlowSampleSet {
    pub fn new(edge_count: usize, snapshots: Vec<FlowSnapshot>) -> Result<Self> {
        for s in &snapshots {
            if s.flows.len() != edge_count {
                return Err(Error::InvalidInput(format!(
                    "snapshot {} has {} flows, network has {edge_count} edges",
                    s.label,
                    s.flows.len()
                )));
            }
            if let Some(bad) = s.flows.iter().find(|f| !(f.is_finite() && **f >= 0.0)) {
                return Err(Error::InvalidInput(format!(
                    "snapshot {} has invalid flow {bad}",
                    s.label
                )));
            }
        }
        Ok(FlowSampleSet {
            edge_count,
            snapshots,
        })
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshots(&self) -> &[FlowSnapshot] {
        &self.snapshots
    }

    /// Per-edge mean over all snapshots (zeros when empty).
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.edge_count];
        if self.snapshots.is_empty() {
            return mean;
        }
        for s in &self.snapshots {
            for (m, f) in mean.iter_mut().zip(&s.flows) {
                *m += f;
            }
        }
        let j = self.snapshots.len() as f64;
        mean.iter_mut().for_each(|m| *m /= j);
        mean
    }

    /// Keeps only the listed edges, in the given order.
    pub fn restrict(&self, edges: &[usize]) -> FlowSampleSet {
        FlowSampleSet {
            edge_count: edges.len(),
            snapshots: self
                .snapshots
                .iter()
                .map(|s| FlowSnapshot {
                    label: s.label.clone(),
                    flows: edges.iter().map(|&a| s.flows[a]).collect(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge(id: &str, t: &str, h: &str) -> SuperEdge {
        SuperEdge::new(id, t, h, 1.0, 1000.0, 1.0)
    }

    fn net(ids: &[&str], edges: Vec<SuperEdge>) -> RoadNetwork {
        RoadNetwork::new(ids.iter().map(|i| SuperNode::new(*i)).collect(), edges).unwrap()
    }

    #[test]
    fn bpr_examples() {
        let e = SuperEdge::new("a", "u", "v", 1.0, 1000.0, 1.0);
        assert_eq!(bpr_travel_time(&e, 0.0).unwrap(), 1.0);
        assert!((bpr_travel_time(&e, 1000.0).unwrap() - 1.15).abs() < 1e-12);
        let e2 = SuperEdge::new("b", "u", "v", 1.0, 2000.0, 0.5);
        assert!((bpr_travel_time(&e2, 4000.0).unwrap() - 1.7).abs() < 1e-12);
        assert!(bpr_travel_time(&e, -1.0).is_err());
    }

    #[test]
    fn bpr_integral_examples() {
        let e = SuperEdge::new("a", "u", "v", 1.0, 1000.0, 1.0);
        assert_eq!(bpr_integral(&e, 0.0).unwrap(), 0.0);
        assert!((bpr_integral(&e, 1000.0).unwrap() - 1030.0).abs() < 1e-9);
        assert!(bpr_integral(&e, -0.5).is_err());
    }

    #[test]
    fn two_node_cycle_passes_single_edge_fails() {
        let ok = net(&["a", "b"], vec![edge("ab", "a", "b"), edge("ba", "b", "a")]);
        assert!(ok.validate().passed());
        let bad = net(&["a", "b"], vec![edge("ab", "a", "b")]);
        let report = bad.validate();
        assert!(!report.passed());
        assert!(!report.strongly_connected);
    }

    #[test]
    fn bad_parameters_are_reported() {
        let mut e = edge("ab", "a", "b");
        e.capacity_vph = 0.0;
        let n = net(&["a", "b"], vec![e, edge("ba", "b", "a")]);
        let r = n.validate();
        assert!(!r.parameters_ok);
        assert_eq!(r.failures.len(), 1);
    }

    #[test]
    fn unknown_endpoint_rejected() {
        let r = RoadNetwork::new(vec![SuperNode::new("a")], vec![edge("ab", "a", "b")]);
        assert!(r.is_err());
    }

    #[test]
    fn incidence_single_edge_and_cycle_conservation() {
        let n = net(
            &["u", "v", "w"],
            vec![edge("uv", "u", "v"), edge("vw", "v", "w"), edge("wu", "w", "u")],
        );
        let m = n.incidence();
        assert_eq!(m[(0, 0)], -1);
        assert_eq!(m[(1, 0)], 1);
        assert_eq!(m[(2, 0)], 0);
        // unit flow around the cycle is conserved at every node
        for v in 0..3 {
            let s: i32 = (0..3).map(|a| m[(v, a)] as i32).sum();
            assert_eq!(s, 0);
        }
        assert_eq!(m.iter().filter(|&&x| x != 0).count(), 6);
    }

    #[test]
    fn pair_indexing_is_row_major() {
        let p = OdPairSet::new(4);
        assert_eq!(p.len(), 12);
        let all: Vec<_> = p.iter().collect();
        assert_eq!(all[0], (0, 1));
        assert_eq!(all[2], (0, 3));
        assert_eq!(all[3], (1, 0));
        assert_eq!(all[4], (1, 2));
        for (i, (o, d)) in p.iter().enumerate() {
            assert_eq!(p.index(o, d), Some(i));
        }
        assert_eq!(p.index(2, 2), None);
    }

    #[test]
    fn samples_reject_bad_values() {
        let snap = FlowSnapshot {
            label: "d".into(),
            flows: vec![1.0, f64::NAN],
        };
        assert!(FlowSampleSet::new(2, vec![snap]).is_err());
        let neg = FlowSnapshot {
            label: "d".into(),
            flows: vec![-1.0],
        };
        assert!(FlowSampleSet::new(1, vec![neg]).is_err());
    }
}
