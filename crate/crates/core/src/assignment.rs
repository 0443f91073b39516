//! User-equilibrium traffic assignment with the Frank-Wolfe method.
//!
//! Path flows are tracked alongside edge flows: every all-or-nothing
//! direction is a set of paths and the convex combination step is applied
//! to them as well, so the final solution carries a route decomposition
//! (the flow-averaged composite of all directions taken).

use crate::demand::OdMatrix;
use crate::error::{Error, Result};
use crate::network::{bpr_integral_unchecked, bpr_time_unchecked, RoadNetwork};
use crate::paths::shortest_path_tree;

pub const DEFAULT_GAP: f64 = 1e-5;
pub const DEFAULT_MAX_ITERATIONS: usize = 5000;

/// Edge cost as a function of edge flow.
#[derive(Debug, Clone, PartialEq)]
pub enum CostModel {
    /// BPR congestion function with per-edge parameters.
    Bpr,
    /// Flow-independent cost equal to the edge length.
    Length,
    /// `intercept[a] + slope[a] * x`, mainly for closed-form checks.
    Affine { intercept: Vec<f64>, slope: Vec<f64> },
}

impl CostModel {
    pub fn time(&self, network: &RoadNetwork, edge: usize, flow: f64) -> f64 {
        match self {
            CostModel::Bpr => bpr_time_unchecked(&network.edges()[edge], flow),
            CostModel::Length => network.edges()[edge].length_km,
            CostModel::Affine { intercept, slope } => intercept[edge] + slope[edge] * flow,
        }
    }

    pub fn integral(&self, network: &RoadNetwork, edge: usize, flow: f64) -> f64 {
        match self {
            CostModel::Bpr => bpr_integral_unchecked(&network.edges()[edge], flow),
            CostModel::Length => network.edges()[edge].length_km * flow,
            CostModel::Affine { intercept, slope } => {
                intercept[edge] * flow + 0.5 * slope[edge] * flow * flow
            }
        }
    }

    pub fn is_flow_independent(&self) -> bool {
        match self {
            CostModel::Bpr => false,
            CostModel::Length => true,
            CostModel::Affine { slope, .. } => slope.iter().all(|&s| s == 0.0),
        }
    }

    fn check(&self, network: &RoadNetwork) -> Result<()> {
        if let CostModel::Affine { intercept, slope } = self {
            let m = network.edge_count();
            if intercept.len() != m || slope.len() != m {
                return Err(Error::InvalidInput("affine cost vectors must match edge count".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentConfig {
    pub gap_threshold: f64,
    pub max_iterations: usize,
    /// Interval width at which the bisection line search stops.
    pub line_search_tol: f64,
    pub cost: CostModel,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        AssignmentConfig {
            gap_threshold: DEFAULT_GAP,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            line_search_tol: 1e-10,
            cost: CostModel::Bpr,
        }
    }
}

impl AssignmentConfig {
    pub fn with_cost(cost: CostModel) -> Self {
        AssignmentConfig {
            cost,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteFlow {
    pub edges: Vec<usize>,
    pub flow: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FwTraceRow {
    pub iter: usize,
    pub objective: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub flows: Vec<f64>,
    pub times: Vec<f64>,
    pub relative_gap: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Per pair (full pair-set order). Zero-demand pairs hold their current
    /// shortest path with flow 0.
    pub route_flows: Vec<Vec<RouteFlow>>,
    pub trace: Vec<FwTraceRow>,
}

impl EquilibriumSolution {
    /// Route proportions of a pair; a zero-demand pair reports its
    /// shortest path with proportion 1.
    pub fn route_shares(&self, pair: usize) -> Vec<(&[usize], f64)> {
        let routes = &self.route_flows[pair];
        let total: f64 = routes.iter().map(|r| r.flow).sum();
        if total > 0.0 {
            routes
                .iter()
                .filter(|r| r.flow > 0.0)
                .map(|r| (r.edges.as_slice(), r.flow / total))
                .collect()
        } else {
            routes.iter().take(1).map(|r| (r.edges.as_slice(), 1.0)).collect()
        }
    }
}

struct AonResult {
    flows: Vec<f64>,
    /// Shortest path per pair; only filled where requested.
    paths: Vec<Option<Vec<usize>>>,
}

fn aon_internal(
    network: &RoadNetwork,
    demand: &[f64],
    times: &[f64],
    all_paths: bool,
) -> Result<AonResult> {
    let pairs = network.pairs();
    let n = network.node_count();
    let mut flows = vec![0.0; network.edge_count()];
    let mut paths = vec![None; pairs.len()];
    for o in 0..n {
        let row = (0..n).filter(|&d| d != o).map(|d| pairs.index(o, d).unwrap());
        let needed: Vec<usize> = row.filter(|&i| all_paths || demand[i] > 0.0).collect();
        if needed.is_empty() {
            continue;
        }
        let tree = shortest_path_tree(network, o, times);
        for i in needed {
            let (_, d) = pairs.pair(i);
            match tree.path_to(network, d) {
                Some(path) => {
                    if demand[i] > 0.0 {
                        for &a in &path {
                            flows[a] += demand[i];
                        }
                    }
                    paths[i] = Some(path);
                }
                None if demand[i] > 0.0 => {
                    return Err(Error::Inconsistency(format!(
                        "positive demand between unreachable nodes {} -> {}",
                        network.nodes()[o].id,
                        network.nodes()[d].id
                    )))
                }
                None => {}
            }
        }
    }
    Ok(AonResult { flows, paths })
}

/// Sends each pair's demand along one shortest path under `times`.
pub fn all_or_nothing(network: &RoadNetwork, demand: &OdMatrix, times: &[f64]) -> Result<Vec<f64>> {
    check_demand(network, demand)?;
    if times.len() != network.edge_count() || times.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::InvalidInput("times must be positive, one per edge".into()));
    }
    Ok(aon_internal(network, demand.values(), times, false)?.flows)
}

/// `(sum t x - sum t y) / sum t x`; defined as 0 when there is no flow.
pub fn relative_gap(flows: &[f64], times: &[f64], aon_flows: &[f64]) -> Result<f64> {
    let tx: f64 = times.iter().zip(flows).map(|(t, x)| t * x).sum();
    let ty: f64 = times.iter().zip(aon_flows).map(|(t, y)| t * y).sum();
    let any_flow = flows.iter().any(|&x| x > 0.0);
    if !any_flow {
        return Ok(0.0);
    }
    if !(tx > 0.0) {
        return Err(Error::Numerical("zero total travel cost with positive flow".into()));
    }
    Ok((tx - ty) / tx)
}

/// Beckmann objective: sum of the integrated cost functions.
pub fn beckmann_objective(network: &RoadNetwork, cost: &CostModel, flows: &[f64]) -> f64 {
    flows
        .iter()
        .enumerate()
        .map(|(a, &x)| cost.integral(network, a, x))
        .sum()
}

fn check_demand(network: &RoadNetwork, demand: &OdMatrix) -> Result<()> {
    if demand.pairs() != network.pairs() {
        return Err(Error::InvalidInput("demand matrix does not match network pair set".into()));
    }
    Ok(())
}

fn edge_times(network: &RoadNetwork, cost: &CostModel, flows: &[f64]) -> Vec<f64> {
    flows
        .iter()
        .enumerate()
        .map(|(a, &x)| cost.time(network, a, x))
        .collect()
}

/// Step length minimising the Beckmann objective along `x + s (y - x)`.
fn line_search(
    network: &RoadNetwork,
    cost: &CostModel,
    x: &[f64],
    dir: &[f64],
    tol: f64,
) -> f64 {
    let slope = |s: f64| -> f64 {
        x.iter()
            .zip(dir)
            .enumerate()
            .filter(|(_, (_, d))| **d != 0.0)
            .map(|(a, (&xa, &da))| cost.time(network, a, (xa + s * da).max(0.0)) * da)
            .sum()
    };
    if slope(1.0) <= 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if slope(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn add_route(routes: &mut Vec<RouteFlow>, path: &[usize], flow: f64) {
    match routes.iter_mut().find(|r| r.edges == path) {
        Some(r) => r.flow += flow,
        None => routes.push(RouteFlow {
            edges: path.to_vec(),
            flow,
        }),
    }
}

pub fn frank_wolfe(
    network: &RoadNetwork,
    demand: &OdMatrix,
    config: &AssignmentConfig,
) -> Result<EquilibriumSolution> {
    frank_wolfe_warm(network, demand, config, None)
}

/// Frank-Wolfe, optionally starting from the route flows of an earlier
/// solution rescaled to the new demand.
pub fn frank_wolfe_warm(
    network: &RoadNetwork,
    demand: &OdMatrix,
    config: &AssignmentConfig,
    warm: Option<&EquilibriumSolution>,
) -> Result<EquilibriumSolution> {
    check_demand(network, demand)?;
    config.cost.check(network)?;
    let g = demand.values();
    let m = network.edge_count();
    let mut route_flows: Vec<Vec<RouteFlow>> = vec![Vec::new(); g.len()];
    let mut x = vec![0.0; m];

    let warm = warm.filter(|w| w.route_flows.len() == g.len());
    match warm {
        Some(w) => {
            let free = edge_times(network, &config.cost, &x);
            let mut fallback: Option<AonResult> = None;
            for (i, &gi) in g.iter().enumerate() {
                if gi <= 0.0 {
                    continue;
                }
                let prev = &w.route_flows[i];
                let total: f64 = prev.iter().map(|r| r.flow).sum();
                if total > 0.0 {
                    for r in prev.iter().filter(|r| r.flow > 0.0) {
                        add_route(&mut route_flows[i], &r.edges, r.flow * gi / total);
                    }
                } else if let Some(r) = prev.first() {
                    add_route(&mut route_flows[i], &r.edges, gi);
                } else {
                    if fallback.is_none() {
                        fallback = Some(aon_internal(network, g, &free, false)?);
                    }
                    let path = fallback.as_ref().unwrap().paths[i].as_ref().unwrap();
                    add_route(&mut route_flows[i], path, gi);
                }
                for r in &route_flows[i] {
                    for &a in &r.edges {
                        x[a] += r.flow;
                    }
                }
            }
        }
        None => {
            let free = edge_times(network, &config.cost, &x);
            let aon = aon_internal(network, g, &free, false)?;
            for (i, p) in aon.paths.iter().enumerate() {
                if let Some(p) = p {
                    add_route(&mut route_flows[i], p, g[i]);
                }
            }
            x = aon.flows;
        }
    }

    let mut trace = Vec::new();
    let mut gap = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut times = edge_times(network, &config.cost, &x);
    while iterations < config.max_iterations {
        iterations += 1;
        let aon = aon_internal(network, g, &times, false)?;
        gap = relative_gap(&x, &times, &aon.flows)?;
        let objective = beckmann_objective(network, &config.cost, &x);
        if !objective.is_finite() || !gap.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite objective {objective} or gap {gap} at iteration {iterations}"
            )));
        }
        trace.push(FwTraceRow {
            iter: iterations,
            objective,
            gap,
        });
        if gap <= config.gap_threshold {
            converged = true;
            break;
        }
        let dir: Vec<f64> = aon.flows.iter().zip(&x).map(|(y, x)| y - x).collect();
        let step = line_search(network, &config.cost, &x, &dir, config.line_search_tol);
        for (xa, da) in x.iter_mut().zip(&dir) {
            *xa = (*xa + step * da).max(0.0);
        }
        for (i, p) in aon.paths.iter().enumerate() {
            let Some(p) = p else { continue };
            let routes = &mut route_flows[i];
            routes.iter_mut().for_each(|r| r.flow *= 1.0 - step);
            add_route(routes, p, step * g[i]);
            routes.retain(|r| r.flow > 0.0);
        }
        times = edge_times(network, &config.cost, &x);
    }
    if !converged {
        log::warn!(
            "Frank-Wolfe stopped at iteration cap {} with relative gap {gap:.3e}",
            config.max_iterations
        );
    }

    // reference shortest paths for zero-demand pairs
    let reference = aon_internal(network, &vec![0.0; g.len()], &times, true)?;
    for (i, p) in reference.paths.into_iter().enumerate() {
        if g[i] <= 0.0 {
            route_flows[i].clear();
            if let Some(p) = p {
                route_flows[i].push(RouteFlow { edges: p, flow: 0.0 });
            }
        }
    }

    Ok(EquilibriumSolution {
        flows: x,
        times,
        relative_gap: gap,
        iterations,
        converged,
        route_flows,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{SuperEdge, SuperNode};

    fn two_parallel(l1: f64, l2: f64) -> RoadNetwork {
        RoadNetwork::new(
            vec![SuperNode::new("u"), SuperNode::new("v")],
            vec![
                SuperEdge::new("e1", "u", "v", l1, 1000.0, l1),
                SuperEdge::new("e2", "u", "v", l2, 1000.0, l2),
                SuperEdge::new("back", "v", "u", 1.0, 1000.0, 1.0),
            ],
        )
        .unwrap()
    }

    fn demand_uv(net: &RoadNetwork, d: f64) -> OdMatrix {
        let mut v = vec![0.0; net.pairs().len()];
        v[net.pairs().index(0, 1).unwrap()] = d;
        OdMatrix::new(net.pairs(), v).unwrap()
    }

    #[test]
    fn aon_two_parallel_edges() {
        let net = two_parallel(1.0, 2.0);
        let g = demand_uv(&net, 100.0);
        let x = all_or_nothing(&net, &g, &[1.0, 2.0, 1.0]).unwrap();
        assert_eq!(x, vec![100.0, 0.0, 0.0]);
        let zero = OdMatrix::zeros(net.pairs());
        assert_eq!(all_or_nothing(&net, &zero, &[1.0, 2.0, 1.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn symmetric_edges_split_evenly() {
        let net = two_parallel(1.0, 1.0);
        let g = demand_uv(&net, 2000.0);
        let sol = frank_wolfe(&net, &g, &AssignmentConfig::default()).unwrap();
        assert!(sol.converged);
        assert!((sol.flows[0] - 1000.0).abs() < 1.0);
        assert!((sol.flows[1] - 1000.0).abs() < 1.0);
    }

    #[test]
    fn flow_independent_costs_converge_in_one_iteration() {
        let net = two_parallel(1.0, 2.0);
        let g = demand_uv(&net, 50.0);
        let sol = frank_wolfe(&net, &g, &AssignmentConfig::with_cost(CostModel::Length)).unwrap();
        assert_eq!(sol.iterations, 1);
        assert_eq!(sol.relative_gap, 0.0);
        assert_eq!(sol.flows, vec![50.0, 0.0, 0.0]);
    }

    #[test]
    fn affine_two_edge_equilibrium() {
        let net = two_parallel(1.0, 2.0);
        let g = demand_uv(&net, 10.0);
        let cost = CostModel::Affine {
            intercept: vec![1.0, 2.0, 1.0],
            slope: vec![1.0, 1.0, 1.0],
        };
        let sol = frank_wolfe(&net, &g, &AssignmentConfig::with_cost(cost)).unwrap();
        assert!(sol.converged);
        assert!((sol.flows[0] - 5.5).abs() < 1e-3, "{:?}", sol.flows);
        assert!((sol.flows[1] - 4.5).abs() < 1e-3);
        for w in sol.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-9);
        }
    }

    #[test]
    fn relative_gap_formula() {
        // x = (6, 4) under t = (7, 6): AON sends all 10 to edge 2 -> y = (0, 10)
        let gap = relative_gap(&[6.0, 4.0], &[7.0, 6.0], &[0.0, 10.0]).unwrap();
        let expected = (42.0 + 24.0 - 60.0) / 66.0;
        assert!((gap - expected).abs() < 1e-15);
        assert_eq!(relative_gap(&[0.0, 0.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(relative_gap(&[3.0, 0.0], &[1.0, 2.0], &[3.0, 0.0]).unwrap(), 0.0);
        assert!(relative_gap(&[3.0], &[0.0], &[3.0]).is_err());
    }

    #[test]
    fn route_flows_conserve_demand() {
        let net = two_parallel(1.0, 1.2);
        let g = demand_uv(&net, 1500.0);
        let sol = frank_wolfe(&net, &g, &AssignmentConfig::default()).unwrap();
        let p = net.pairs().index(0, 1).unwrap();
        let total: f64 = sol.route_flows[p].iter().map(|r| r.flow).sum();
        assert!((total - 1500.0).abs() < 1e-9 * 1500.0);
        // the zero-demand reverse pair still reports a reference route
        let q = net.pairs().index(1, 0).unwrap();
        assert_eq!(sol.route_shares(q), vec![(&[2usize][..], 1.0)]);
    }
}
