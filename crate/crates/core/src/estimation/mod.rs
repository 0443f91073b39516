//! Generalised least squares O-D estimation from link flow samples and the
//! partition-based prior strategies.
//!
//! The estimator minimises
//! `sum_j (x^j - B P' g)' S^{-1} (x^j - B P' g)` over demand `g >= 0` and
//! row-stochastic route choice `P`. Expanding around the sample mean gives
//! `sum_j ||L^{-1}(x^j - x_bar)||^2 + |J| * ||L^{-1}(x_bar - B P' g)||^2`,
//! so only the second term depends on the unknowns. The problem is
//! bilinear; it is solved by alternating an NNLS step in `g` with a
//! simplex-constrained step in the route flows `q_i = g_i p_i`.

pub mod covariance;
pub mod nnls;
pub mod priors;
mod route_choice;

use log::debug;
use nalgebra::DMatrix;

use crate::demand::OdMatrix;
use crate::error::{Error, Result};
use crate::network::{FlowSampleSet, RoadNetwork};
use crate::routing::{build_incidence, RouteSet};

pub use covariance::{sample_covariance, FlowCovariance, Whitener, DEFAULT_RIDGE_SCALE, MAX_CONDITION};
pub use nnls::{nnls, nnls_warm, DenseOperator, LinearOperator, NnlsOptions};
pub use priors::{combined_prior, degenerate_prior, external_prior, internal_prior, unpartitioned_estimate};
pub use route_choice::{project_simplex, InnerOptions};

use route_choice::{Block, RouteProblem};

#[derive(Debug, Clone, Copy)]
pub struct GlsConfig {
    pub max_outer: usize,
    /// Stop when the relative objective decrease of a full sweep drops below this.
    pub rel_tol: f64,
    pub ridge_scale: f64,
    pub inner: InnerOptions,
    pub nnls: NnlsOptions,
}

impl Default for GlsConfig {
    fn default() -> Self {
        GlsConfig {
            max_outer: 100,
            rel_tol: 1e-6,
            ridge_scale: DEFAULT_RIDGE_SCALE,
            inner: InnerOptions::default(),
            nnls: NnlsOptions::default(),
        }
    }
}

/// Route choice probabilities, one row per routed pair in `RouteSet` entry
/// order. Rows sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteChoiceMatrix {
    pairs: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl RouteChoiceMatrix {
    pub fn uniform(routes: &RouteSet) -> Self {
        let pairs = routes.entries().iter().map(|e| e.pair).collect();
        let rows = routes
            .entries()
            .iter()
            .map(|e| vec![1.0 / e.routes.len() as f64; e.routes.len()])
            .collect();
        RouteChoiceMatrix { pairs, rows }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row_for_pair(&self, pair: usize) -> Option<&[f64]> {
        self.pairs
            .binary_search(&pair)
            .ok()
            .map(|k| self.rows[k].as_slice())
    }

    /// Dense `pairs x routes` matrix with routes numbered in `RouteSet::routes()` order.
    pub fn to_dense(&self, pair_count: usize) -> DMatrix<f64> {
        let total: usize = self.rows.iter().map(Vec::len).sum();
        let mut m = DMatrix::zeros(pair_count, total);
        let mut col = 0;
        for (&pair, row) in self.pairs.iter().zip(&self.rows) {
            for &p in row {
                m[(pair, col)] = p;
                col += 1;
            }
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct GlsEstimate {
    pub demand: OdMatrix,
    pub route_choice: RouteChoiceMatrix,
    pub objective: f64,
    /// Objective after initialisation and after every alternating sweep.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub ridge: f64,
}

/// Sparse columns `sum_r p_ir B_r` of the demand-to-load map.
fn demand_columns(routes: &RouteSet, choice: &RouteChoiceMatrix) -> Vec<Vec<(usize, f64)>> {
    routes
        .entries()
        .iter()
        .zip(&choice.rows)
        .map(|(e, row)| {
            let mut col: Vec<(usize, f64)> = Vec::new();
            for (r, &p) in e.routes.iter().zip(row) {
                if p != 0.0 {
                    col.extend(r.edges.iter().map(|&a| (a, p)));
                }
            }
            col.sort_by_key(|&(a, _)| a);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(col.len());
            for (a, p) in col {
                match merged.last_mut() {
                    Some(last) if last.0 == a => last.1 += p,
                    _ => merged.push((a, p)),
                }
            }
            merged
        })
        .collect()
}

struct WhitenedDemandOperator<'a> {
    whitener: &'a Whitener,
    columns: &'a [Vec<(usize, f64)>],
    edges: usize,
}

impl WhitenedDemandOperator<'_> {
    fn raw_apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.edges];
        for (col, &xj) in self.columns.iter().zip(x) {
            if xj != 0.0 {
                for &(a, w) in col {
                    out[a] += w * xj;
                }
            }
        }
        out
    }
}

impl LinearOperator for WhitenedDemandOperator<'_> {
    fn rows(&self) -> usize {
        self.edges
    }
    fn cols(&self) -> usize {
        self.columns.len()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.whitener.whiten(&self.raw_apply(x))
    }
    fn adjoint(&self, r: &[f64]) -> Vec<f64> {
        let y = self.whitener.whiten_t(r);
        self.columns
            .iter()
            .map(|col| col.iter().map(|&(a, w)| w * y[a]).sum())
            .collect()
    }
    fn column(&self, j: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.edges];
        for &(a, w) in &self.columns[j] {
            v[a] += w;
        }
        self.whitener.whiten(&v)
    }
}

fn edge_loads(routes: &RouteSet, choice: &RouteChoiceMatrix, g: &[f64], edges: usize) -> Vec<f64> {
    let mut mu = vec![0.0; edges];
    for ((e, row), &gi) in routes.entries().iter().zip(&choice.rows).zip(g) {
        if gi == 0.0 {
            continue;
        }
        for (r, &p) in e.routes.iter().zip(row) {
            let f = gi * p;
            if f != 0.0 {
                for &a in &r.edges {
                    mu[a] += f;
                }
            }
        }
    }
    mu
}

/// Estimates demand and route choice from the snapshots by alternating
/// convex minimisation, starting from uniform route choice. The objective
/// trace is non-increasing: a half-step that would increase it is discarded.
pub fn gls_estimate(
    network: &RoadNetwork,
    samples: &FlowSampleSet,
    routes: &RouteSet,
    config: &GlsConfig,
) -> Result<GlsEstimate> {
    let edges = network.edge_count();
    if samples.edge_count() != edges {
        return Err(Error::InvalidInput(format!(
            "samples have {} edges, network has {edges}",
            samples.edge_count()
        )));
    }
    if routes.pair_set().node_count() != network.node_count() {
        return Err(Error::InvalidInput("route set built for a different network".into()));
    }
    build_incidence(routes, network)?;

    let cov = sample_covariance(samples, config.ridge_scale)?;
    let whitener = cov.whitener()?;
    let xbar = samples.mean();
    let j = samples.len() as f64;
    let spread: f64 = samples
        .snapshots()
        .iter()
        .map(|s| {
            let d: Vec<f64> = s.flows.iter().zip(&xbar).map(|(x, m)| x - m).collect();
            whitener.quad(&d)
        })
        .sum();
    let objective_of = |mu: &[f64]| -> Result<f64> {
        let d: Vec<f64> = xbar.iter().zip(mu).map(|(x, m)| x - m).collect();
        let f = spread + j * whitener.quad(&d);
        if f.is_finite() {
            Ok(f)
        } else {
            Err(Error::Numerical("non-finite GLS objective".into()))
        }
    };

    let entries = routes.entries();
    let mut choice = RouteChoiceMatrix::uniform(routes);
    let mut g = vec![0.0; entries.len()];
    let mut current = objective_of(&vec![0.0; edges])?;
    let mut trace = vec![current];
    let b = whitener.whiten(&xbar);
    let mut iterations = 0;
    let mut converged = false;

    for outer in 0..config.max_outer {
        iterations = outer + 1;
        let previous = current;

        // demand step
        let columns = demand_columns(routes, &choice);
        let op = WhitenedDemandOperator {
            whitener: &whitener,
            columns: &columns,
            edges,
        };
        let g_new = nnls_warm(&op, &b, config.nnls, Some(&g))?;
        let f = objective_of(&edge_loads(routes, &choice, &g_new, edges))?;
        if f <= current {
            g = g_new;
            current = f;
        }

        // route choice step over pairs with demand and a real choice
        let free: Vec<usize> = (0..entries.len())
            .filter(|&k| g[k] > 0.0 && entries[k].routes.len() > 1)
            .collect();
        if !free.is_empty() {
            let mut fixed_g = g.clone();
            for &k in &free {
                fixed_g[k] = 0.0;
            }
            let fixed = edge_loads(routes, &choice, &fixed_g, edges);
            let target = xbar.iter().zip(&fixed).map(|(x, l)| x - l).collect();
            let blocks = free
                .iter()
                .map(|&k| Block {
                    total: g[k],
                    routes: entries[k].routes.iter().map(|r| r.edges.clone()).collect(),
                })
                .collect();
            let problem = RouteProblem {
                whitener: &whitener,
                target,
                blocks,
            };
            let q0: Vec<f64> = free
                .iter()
                .flat_map(|&k| choice.rows[k].iter().map(|p| p * g[k]).collect::<Vec<_>>())
                .collect();
            let (q, _) = problem.solve(q0, config.inner);
            let mut candidate = choice.clone();
            let mut pos = 0;
            for &k in &free {
                let n = entries[k].routes.len();
                let sum: f64 = q[pos..pos + n].iter().sum();
                if sum > 0.0 {
                    candidate.rows[k] = q[pos..pos + n].iter().map(|v| v / sum).collect();
                }
                pos += n;
            }
            let f = objective_of(&edge_loads(routes, &candidate, &g, edges))?;
            if f <= current {
                choice = candidate;
                current = f;
            }
        }

        trace.push(current);
        debug!("gls sweep {iterations}: objective {current:.6e}");
        if current == 0.0 || previous - current <= config.rel_tol * previous {
            converged = true;
            break;
        }
    }

    let mut values = vec![0.0; routes.pair_set().len()];
    for (e, &gi) in entries.iter().zip(&g) {
        values[e.pair] = gi;
    }
    Ok(GlsEstimate {
        demand: OdMatrix::new(routes.pair_set(), values)?,
        route_choice: choice,
        objective: current,
        trace,
        iterations,
        converged,
        ridge: cov.ridge(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{FlowSnapshot, SuperEdge, SuperNode};
    use crate::routing::route_all_pairs;

    fn parallel_network() -> RoadNetwork {
        RoadNetwork::new(
            vec![SuperNode::new("u"), SuperNode::new("v")],
            vec![
                SuperEdge::new("short", "u", "v", 1.0, 1000.0, 1.0),
                SuperEdge::new("long", "u", "v", 2.0, 1000.0, 2.0),
            ],
        )
        .unwrap()
    }

    fn constant_samples(flows: &[f64], days: usize) -> FlowSampleSet {
        let snaps = (0..days)
            .map(|d| FlowSnapshot {
                label: format!("d{d}"),
                flows: flows.to_vec(),
            })
            .collect();
        FlowSampleSet::new(flows.len(), snaps).unwrap()
    }

    #[test]
    fn parallel_edges_factorise_exactly() {
        let net = parallel_network();
        let routes = route_all_pairs(&net, 4).unwrap();
        let est = gls_estimate(&net, &constant_samples(&[30.0, 70.0], 5), &routes, &GlsConfig::default()).unwrap();
        let uv = net.pairs().index(0, 1).unwrap();
        assert!((est.demand.values()[uv] - 100.0).abs() < 1e-6);
        let p = est.route_choice.row_for_pair(uv).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-6);
        assert!((p[1] - 0.7).abs() < 1e-6);
        assert!(est.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_flows_give_zero_demand() {
        let net = parallel_network();
        let routes = route_all_pairs(&net, 4).unwrap();
        let est = gls_estimate(&net, &constant_samples(&[0.0, 0.0], 3), &routes, &GlsConfig::default()).unwrap();
        assert!(est.demand.values().iter().all(|&g| g == 0.0));
        assert_eq!(est.objective, 0.0);
    }

    #[test]
    fn dense_route_choice_rows_sum_to_one() {
        let net = parallel_network();
        let routes = route_all_pairs(&net, 4).unwrap();
        let choice = RouteChoiceMatrix::uniform(&routes);
        let dense = choice.to_dense(net.pairs().len());
        let uv = net.pairs().index(0, 1).unwrap();
        assert!((dense.row(uv).sum() - 1.0).abs() < 1e-15);
        assert_eq!(dense.ncols(), routes.route_count());
    }
}
