//! Route enumeration (Yen's k shortest simple paths by distance) and the
//! edge-route incidence matrix `B`.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{OdPairSet, RoadNetwork};
use crate::paths::lexmin_shortest_path;

pub const DEFAULT_K: usize = 4;

/// A simple path for one O-D pair, as network edge indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub pair: usize,
    pub edges: Vec<usize>,
    pub length_km: f64,
}

/// Routes of one O-D pair, shortest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRoutes {
    pub pair: usize,
    pub routes: Vec<Route>,
}

/// Up to k routes for every routable pair. Pairs without any route are
/// absent and are treated as zero-demand by the estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteSet {
    pairs: OdPairSet,
    entries: Vec<PairRoutes>,
}

impl RouteSet {
    pub fn new(pairs: OdPairSet, mut entries: Vec<PairRoutes>) -> Result<Self> {
        entries.retain(|e| !e.routes.is_empty());
        entries.sort_by_key(|e| e.pair);
        for w in entries.windows(2) {
            if w[0].pair == w[1].pair {
                return Err(Error::Inconsistency(format!("pair {} listed twice", w[0].pair)));
            }
        }
        for e in &entries {
            if e.pair >= pairs.len() {
                return Err(Error::Inconsistency(format!("pair index {} out of range", e.pair)));
            }
            if e.routes.iter().any(|r| r.pair != e.pair) {
                return Err(Error::Inconsistency(format!("route filed under wrong pair {}", e.pair)));
            }
        }
        Ok(RouteSet { pairs, entries })
    }

    pub fn pair_set(&self) -> OdPairSet {
        self.pairs
    }

    pub fn entries(&self) -> &[PairRoutes] {
        &self.entries
    }

    pub fn route_count(&self) -> usize {
        self.entries.iter().map(|e| e.routes.len()).sum()
    }

    pub fn routes(&self) -> impl Iterator<Item = &Route> {
        self.entries.iter().flat_map(|e| e.routes.iter())
    }
}

fn path_nodes(network: &RoadNetwork, origin: usize, edges: &[usize]) -> Vec<usize> {
    let mut nodes = Vec::with_capacity(edges.len() + 1);
    nodes.push(origin);
    nodes.extend(edges.iter().map(|&a| network.head(a)));
    nodes
}

fn path_length(network: &RoadNetwork, edges: &[usize]) -> f64 {
    edges.iter().map(|&a| network.edges()[a].length_km).sum()
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct Candidate {
    length: OrdF64,
    ranks: Vec<usize>,
    edges: Vec<usize>,
}

#[derive(Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Yen's algorithm on `length_km`. Returns at most `k` distinct simple
/// routes in non-decreasing length; equal lengths are ordered by the
/// lexicographic order of their edge-id sequences.
pub fn k_shortest_routes(
    network: &RoadNetwork,
    origin: usize,
    dest: usize,
    k: usize,
) -> Result<Vec<Route>> {
    let pairs = network.pairs();
    let pair = pairs.index(origin, dest).ok_or_else(|| {
        Error::InvalidPair(format!("origin {origin} and destination {dest} must differ"))
    })?;
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let costs: Vec<f64> = network.edges().iter().map(|e| e.length_km).collect();
    let n = network.node_count();
    let m = network.edge_count();
    let mut banned_edge = vec![false; m];
    let mut banned_node = vec![false; n];

    let Some(first) = lexmin_shortest_path(network, origin, dest, &costs, &banned_edge, &banned_node)
    else {
        return Ok(Vec::new());
    };
    let mut accepted: Vec<Vec<usize>> = vec![first];
    let mut candidates: BTreeSet<Candidate> = BTreeSet::new();

    while accepted.len() < k {
        let prev = accepted.last().unwrap().clone();
        let prev_nodes = path_nodes(network, origin, &prev);
        for i in 0..prev.len() {
            let spur = prev_nodes[i];
            let root = &prev[..i];
            for p in &accepted {
                if p.len() > i && &p[..i] == root {
                    banned_edge[p[i]] = true;
                }
            }
            for &v in &prev_nodes[..i] {
                banned_node[v] = true;
            }
            if let Some(tail) =
                lexmin_shortest_path(network, spur, dest, &costs, &banned_edge, &banned_node)
            {
                let mut edges = root.to_vec();
                edges.extend(tail);
                if !accepted.contains(&edges) {
                    candidates.insert(Candidate {
                        length: OrdF64(path_length(network, &edges)),
                        ranks: edges.iter().map(|&a| network.edge_rank(a)).collect(),
                        edges,
                    });
                }
            }
            banned_edge.iter_mut().for_each(|b| *b = false);
            banned_node.iter_mut().for_each(|b| *b = false);
        }
        match candidates.pop_first() {
            Some(c) => accepted.push(c.edges),
            None => break,
        }
    }

    Ok(accepted
        .into_iter()
        .map(|edges| Route {
            pair,
            length_km: path_length(network, &edges),
            edges,
        })
        .collect())
}

/// Routes every pair accepted by `include`. Pairs are independent, so they
/// are computed in parallel and reassembled in pair order.
pub fn route_pairs(
    network: &RoadNetwork,
    k: usize,
    include: impl Fn(usize, usize) -> bool + Sync,
) -> Result<RouteSet> {
    let pairs = network.pairs();
    let entries = (0..pairs.len())
        .into_par_iter()
        .filter_map(|i| {
            let (o, d) = pairs.pair(i);
            if !include(o, d) {
                return None;
            }
            Some(k_shortest_routes(network, o, d, k).map(|routes| PairRoutes { pair: i, routes }))
        })
        .collect::<Result<Vec<_>>>()?;
    RouteSet::new(pairs, entries)
}

/// Routes for all ordered pairs.
pub fn route_all_pairs(network: &RoadNetwork, k: usize) -> Result<RouteSet> {
    route_pairs(network, k, |_, _| true)
}

/// Edge-route incidence `B`: one row per route (pairs in order, routes in
/// rank order), one column per edge, entry 1 iff the route uses the edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRouteIncidence {
    edge_count: usize,
    rows: Vec<Vec<usize>>,
}

impl EdgeRouteIncidence {
    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Edge indices used by row `r`, sorted.
    pub fn row(&self, r: usize) -> &[usize] {
        &self.rows[r]
    }

    pub fn nonzeros(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> DMatrix<u8> {
        let mut b = DMatrix::zeros(self.rows.len(), self.edge_count);
        for (r, row) in self.rows.iter().enumerate() {
            for &a in row {
                b[(r, a)] = 1;
            }
        }
        b
    }

    /// `B' f` for per-route flows `f`: the resulting edge flows.
    pub fn edge_loads(&self, route_flows: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.edge_count];
        for (row, f) in self.rows.iter().zip(route_flows) {
            for &a in row {
                x[a] += f;
            }
        }
        x
    }
}

pub fn build_incidence(routes: &RouteSet, network: &RoadNetwork) -> Result<EdgeRouteIncidence> {
    let m = network.edge_count();
    let mut rows = Vec::with_capacity(routes.route_count());
    for r in routes.routes() {
        if r.edges.is_empty() {
            return Err(Error::Inconsistency(format!("empty route for pair {}", r.pair)));
        }
        if let Some(&a) = r.edges.iter().find(|&&a| a >= m) {
            return Err(Error::Inconsistency(format!(
                "route of pair {} references unknown edge {a}",
                r.pair
            )));
        }
        let mut row = r.edges.clone();
        row.sort_unstable();
        row.dedup();
        rows.push(row);
    }
    Ok(EdgeRouteIncidence { edge_count: m, rows })
}
