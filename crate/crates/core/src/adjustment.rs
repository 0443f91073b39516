//! Bilevel O-D adjustment: projected gradient descent on
//! `F(g) = w1 * sum_i (g_i - g0_i)^2 + w2 * sum_a (x_a(g) - x~_a)^2`
//! where `x(g)` is the user-equilibrium edge flow of demand `g`.

use log::debug;

use crate::assignment::{frank_wolfe_warm, AssignmentConfig, EquilibriumSolution};
use crate::demand::OdMatrix;
use crate::error::{Error, Result};
use crate::network::RoadNetwork;

#[derive(Debug, Clone)]
pub struct AdjustmentConfig {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers F by less than this fraction.
    pub tolerance: f64,
    pub max_halvings: usize,
    /// Trial points with `F > divergence_factor * F_current` are rejected
    /// without further evaluation of the step.
    pub divergence_factor: f64,
    pub prior_weight: f64,
    pub flow_weight: f64,
    pub assignment: AssignmentConfig,
}

impl Default for AdjustmentConfig {
    fn default() -> Self {
        AdjustmentConfig {
            max_iterations: 50,
            tolerance: 1e-4,
            max_halvings: 30,
            divergence_factor: 1e12,
            prior_weight: 1.0,
            flow_weight: 1.0,
            assignment: AssignmentConfig::default(),
        }
    }
}

impl AdjustmentConfig {
    fn check(&self) -> Result<()> {
        let positive = [self.tolerance, self.divergence_factor, self.prior_weight, self.flow_weight];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.tolerance >= 1.0 {
            return Err(Error::Config("adjustment weights and tolerances must be positive, tolerance < 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("adjustment needs at least one iteration".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjustTraceRow {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct AdjustmentResult {
    pub demand: OdMatrix,
    pub objective: f64,
    pub trace: Vec<AdjustTraceRow>,
    pub converged: bool,
    pub iterations: usize,
    /// Why the run stopped without converging.
    pub diagnostic: Option<String>,
    /// Equilibrium of the returned demand.
    pub equilibrium: EquilibriumSolution,
}

fn objective_from_flows(
    g: &[f64],
    prior: &[f64],
    flows: &[f64],
    observed: &[f64],
    config: &AdjustmentConfig,
) -> f64 {
    let demand_term: f64 = g.iter().zip(prior).map(|(a, b)| (a - b) * (a - b)).sum();
    let flow_term: f64 = flows.iter().zip(observed).map(|(a, b)| (a - b) * (a - b)).sum();
    config.prior_weight * demand_term + config.flow_weight * flow_term
}

fn check_inputs(network: &RoadNetwork, g: &OdMatrix, prior: &OdMatrix, observed: &[f64]) -> Result<()> {
    if g.pairs() != network.pairs() || prior.pairs() != network.pairs() {
        return Err(Error::InvalidInput("demand matrices must cover the network's pairs".into()));
    }
    if observed.len() != network.edge_count() {
        return Err(Error::InvalidInput(format!(
            "{} observed flows for {} edges",
            observed.len(),
            network.edge_count()
        )));
    }
    if observed.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::InvalidInput("observed flows must be finite and non-negative".into()));
    }
    Ok(())
}

/// F at `g`, solving the equilibrium for it.
pub fn evaluate_objective(
    network: &RoadNetwork,
    g: &OdMatrix,
    prior: &OdMatrix,
    observed: &[f64],
    config: &AdjustmentConfig,
) -> Result<f64> {
    check_inputs(network, g, prior, observed)?;
    let ue = frank_wolfe_warm(network, g, &config.assignment, None)?;
    Ok(objective_from_flows(g.values(), prior.values(), &ue.flows, observed, config))
}

/// Gradient of F with `dx_a/dg_i` taken as pair i's equilibrium route
/// proportions through edge a, held fixed.
pub fn gradient(
    network: &RoadNetwork,
    g: &OdMatrix,
    prior: &OdMatrix,
    observed: &[f64],
    ue: Option<&EquilibriumSolution>,
    config: &AdjustmentConfig,
) -> Result<Vec<f64>> {
    check_inputs(network, g, prior, observed)?;
    let ue = ue.ok_or_else(|| Error::Precondition("gradient needs an equilibrium solution".into()))?;
    if ue.flows.len() != network.edge_count() || ue.route_flows.len() != g.len() {
        return Err(Error::Precondition("equilibrium solution does not match the network".into()));
    }
    Ok(gradient_at(g.values(), prior.values(), observed, ue, config))
}

fn gradient_at(
    g: &[f64],
    prior: &[f64],
    observed: &[f64],
    ue: &EquilibriumSolution,
    config: &AdjustmentConfig,
) -> Vec<f64> {
    let excess: Vec<f64> = ue.flows.iter().zip(observed).map(|(x, o)| x - o).collect();
    (0..g.len())
        .map(|i| {
            let through: f64 = ue
                .route_shares(i)
                .iter()
                .map(|(edges, share)| share * edges.iter().map(|&a| excess[a]).sum::<f64>())
                .sum();
            2.0 * config.prior_weight * (g[i] - prior[i]) + 2.0 * config.flow_weight * through
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Adjusts `prior` towards demand whose equilibrium flows match `observed`.
/// Non-convergence is reported in the result, not as an error.
pub fn adjust(
    network: &RoadNetwork,
    prior: &OdMatrix,
    observed: &[f64],
    config: &AdjustmentConfig,
) -> Result<AdjustmentResult> {
    config.check()?;
    check_inputs(network, prior, prior, observed)?;
    let pairs = network.pairs();
    let g0 = prior.values();
    let mut g = g0.to_vec();
    let mut ue = frank_wolfe_warm(network, prior, &config.assignment, None)?;
    let mut f = objective_from_flows(&g, g0, &ue.flows, observed, config);
    if !f.is_finite() {
        return Err(Error::Numerical("adjustment objective is not finite".into()));
    }
    let mut grad = gradient_at(&g, g0, observed, &ue, config);
    let mut trace = vec![AdjustTraceRow {
        iter: 0,
        objective: f,
        grad_norm: norm(&grad),
        step: 0.0,
    }];
    let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut converged = false;
    let mut diagnostic = None;
    let mut iterations = 0;
    let g0_norm = norm(g0);

    if f == 0.0 {
        converged = true;
    }
    while !converged && diagnostic.is_none() {
        if iterations == config.max_iterations {
            diagnostic = Some(format!("iteration cap {} reached", config.max_iterations));
            break;
        }
        let projected: Vec<f64> = g
            .iter()
            .zip(&grad)
            .map(|(&gi, &di)| if gi <= 0.0 && di > 0.0 { 0.0 } else { di })
            .collect();
        let pg_norm = norm(&projected);
        if pg_norm <= 1e-10 * (1.0 + norm(&g)) {
            converged = true;
            break;
        }
        let mut step = match &previous {
            Some((g_prev, grad_prev)) => {
                let s: Vec<f64> = g.iter().zip(g_prev).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = grad.iter().zip(grad_prev).map(|(a, b)| a - b).collect();
                let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
                let ss: f64 = s.iter().map(|a| a * a).sum();
                if sy > 0.0 {
                    ss / sy
                } else {
                    norm(&g) / (norm(&grad) + f64::EPSILON)
                }
            }
            None => g0_norm / (norm(&grad) + f64::EPSILON),
        };

        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let candidate: Vec<f64> = g.iter().zip(&grad).map(|(gi, di)| (gi - step * di).max(0.0)).collect();
            if candidate == g {
                break;
            }
            let demand = OdMatrix::new(pairs, candidate.clone())?;
            let trial = frank_wolfe_warm(network, &demand, &config.assignment, Some(&ue))?;
            let f_trial = objective_from_flows(&candidate, g0, &trial.flows, observed, config);
            if f_trial < f {
                accepted = Some((candidate, trial, f_trial));
                break;
            }
            if !f_trial.is_finite() && f_trial != f64::INFINITY {
                return Err(Error::Numerical("adjustment objective is not finite".into()));
            }
            step *= 0.5;
        }
        let Some((candidate, trial, f_new)) = accepted else {
            diagnostic = Some(format!(
                "no descent step found at iteration {} (F = {f:.6e})",
                iterations + 1
            ));
            break;
        };
        iterations += 1;
        let decrease = (f - f_new) / f;
        previous = Some((std::mem::replace(&mut g, candidate), std::mem::take(&mut grad)));
        ue = trial;
        f = f_new;
        grad = gradient_at(&g, g0, observed, &ue, config);
        trace.push(AdjustTraceRow {
            iter: iterations,
            objective: f,
            grad_norm: norm(&grad),
            step,
        });
        debug!("adjust iteration {iterations}: F = {f:.6e}");
        if f == 0.0 || decrease < config.tolerance {
            converged = true;
        }
    }

    Ok(AdjustmentResult {
        demand: OdMatrix::new(pairs, g)?,
        objective: f,
        trace,
        converged,
        iterations,
        diagnostic,
        equilibrium: ue,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{SuperEdge, SuperNode};

    fn single_edge() -> RoadNetwork {
        RoadNetwork::new(
            vec![SuperNode::new("u"), SuperNode::new("v")],
            vec![
                SuperEdge::new("uv", "u", "v", 1.0, 1000.0, 1.0),
            ],
        )
        .unwrap()
    }

    fn demand(net: &RoadNetwork, uv: f64) -> OdMatrix {
        let pairs = net.pairs();
        let mut v = vec![0.0; pairs.len()];
        v[pairs.index(0, 1).unwrap()] = uv;
        OdMatrix::new(pairs, v).unwrap()
    }

    #[test]
    fn objective_single_edge() {
        let net = single_edge();
        let f = evaluate_objective(&net, &demand(&net, 110.0), &demand(&net, 100.0), &[100.0], &AdjustmentConfig::default())
            .unwrap();
        assert!((f - 200.0).abs() < 1e-9);
    }

    #[test]
    fn converges_to_quadratic_minimiser() {
        let net = single_edge();
        let res = adjust(&net, &demand(&net, 120.0), &[100.0], &AdjustmentConfig::default()).unwrap();
        assert!(res.converged, "{:?}", res.diagnostic);
        let uv = net.pairs().index(0, 1).unwrap();
        assert!((res.demand.values()[uv] - 110.0).abs() < 1e-3);
        assert!(res.trace.windows(2).all(|w| w[1].objective < w[0].objective));
    }

    #[test]
    fn prior_at_truth_does_not_move() {
        let net = single_edge();
        let res = adjust(&net, &demand(&net, 80.0), &[80.0], &AdjustmentConfig::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 0);
        assert_eq!(res.demand.values(), demand(&net, 80.0).values());
    }

    #[test]
    fn zero_prior_reports_non_convergence() {
        let net = single_edge();
        let res = adjust(&net, &demand(&net, 0.0), &[500.0], &AdjustmentConfig::default()).unwrap();
        assert!(!res.converged);
        assert!(res.diagnostic.is_some());
    }

    #[test]
    fn gradient_needs_equilibrium() {
        let net = single_edge();
        let g = demand(&net, 1.0);
        let err = gradient(&net, &g, &g, &[0.0], None, &AdjustmentConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }
}
