//! Synthetic block networks built from the nine-node three-triangle unit,
//! random ground-truth demand, and Poisson flow samples around the
//! uncongested equilibrium.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::assignment::{frank_wolfe, AssignmentConfig, CostModel};
use crate::demand::OdMatrix;
use crate::error::{Error, Result};
use crate::network::{FlowSampleSet, FlowSnapshot, RoadNetwork, SuperEdge, SuperNode};

const TRIANGLES: [[usize; 3]; 3] = [[1, 2, 3], [4, 5, 6], [7, 8, 9]];
const CONNECTORS: [(usize, usize); 3] = [(2, 4), (6, 7), (3, 9)];
const MAX_CONNECT_DEGREE: usize = 6;
/// Capacity used before the equilibrium flows are known.
const PLACEHOLDER_CAPACITY: f64 = 1e9;

const STREAM_NETWORK: u64 = 0;
const STREAM_DEMAND: u64 = 1;
const STREAM_FIT: u64 = 2 << 32;
const STREAM_VALIDATION: u64 = 3 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub blocks: usize,
    pub seed: u64,
    pub intra_distance: f64,
    pub inter_distance: f64,
    pub connector_distance: f64,
    pub demand_max: u32,
    /// Draw integer demands; otherwise uniform reals on `[0, demand_max]`.
    pub integer_demand: bool,
    /// Number of fitting samples is `ceil(sample_multiplier * |A|)`.
    pub sample_multiplier: f64,
    pub validation_days: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            blocks: 1,
            seed: 0,
            intra_distance: 1.0,
            inter_distance: 5.0,
            connector_distance: 10.0,
            demand_max: 10,
            integer_demand: true,
            sample_multiplier: 2.5,
            validation_days: 19,
        }
    }
}

impl SynthConfig {
    pub fn with_blocks(blocks: usize, seed: u64) -> Self {
        SynthConfig {
            blocks,
            seed,
            ..SynthConfig::default()
        }
    }

    fn check(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("at least one block is required".into()));
        }
        let d = [self.intra_distance, self.inter_distance, self.connector_distance];
        if d.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("synthetic distances must be positive".into()));
        }
        if !(self.sample_multiplier.is_finite() && self.sample_multiplier > 0.0) {
            return Err(Error::Config("sample multiplier must be positive".into()));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    pub fn sample_count(&self, edges: usize) -> usize {
        (self.sample_multiplier * edges as f64).ceil() as usize
    }
}

fn push_pair(edges: &mut Vec<SuperEdge>, u: &str, v: &str, length: f64) {
    for (t, h) in [(u, v), (v, u)] {
        edges.push(SuperEdge::new(format!("{t}-{h}"), t, h, length, PLACEHOLDER_CAPACITY, length));
    }
}

/// Chains `blocks` copies of the nine-node unit. Node ids are consecutive
/// integers from 1; block `b` holds `9b+1 ..= 9b+9`. Every new block is
/// joined to the network built so far by one bidirected edge between a
/// random node of each side whose total degree is below six. Free-flow
/// time equals distance and capacities are a large placeholder.
pub fn build_block_network(config: &SynthConfig) -> Result<RoadNetwork> {
    config.check()?;
    let mut rng = config.rng(STREAM_NETWORK);
    let mut nodes = Vec::with_capacity(9 * config.blocks);
    let mut edges: Vec<SuperEdge> = Vec::with_capacity(26 * config.blocks);
    let mut degree: Vec<usize> = Vec::with_capacity(9 * config.blocks);
    let id = |b: usize, i: usize| (9 * b + i).to_string();

    for b in 0..config.blocks {
        for i in 1..=9 {
            nodes.push(SuperNode::new(id(b, i)));
            degree.push(0);
        }
        let base = 9 * b;
        for t in TRIANGLES {
            for (x, y) in [(t[0], t[1]), (t[1], t[2]), (t[0], t[2])] {
                push_pair(&mut edges, &id(b, x), &id(b, y), config.intra_distance);
                degree[base + x - 1] += 2;
                degree[base + y - 1] += 2;
            }
        }
        for (x, y) in CONNECTORS {
            push_pair(&mut edges, &id(b, x), &id(b, y), config.inter_distance);
            degree[base + x - 1] += 2;
            degree[base + y - 1] += 2;
        }
        if b > 0 {
            let existing: Vec<usize> = (0..base).filter(|&v| degree[v] < MAX_CONNECT_DEGREE).collect();
            let fresh: Vec<usize> = (base..base + 9).filter(|&v| degree[v] < MAX_CONNECT_DEGREE).collect();
            let (Some(&u), Some(&v)) = (existing.choose(&mut rng), fresh.choose(&mut rng)) else {
                return Err(Error::InvalidInput(format!("no eligible connector node for block {b}")));
            };
            push_pair(&mut edges, &nodes[u].id.clone(), &nodes[v].id.clone(), config.connector_distance);
            degree[u] += 2;
            degree[v] += 2;
        }
    }
    RoadNetwork::new(nodes, edges)
}

/// Independent uniform demand on every ordered pair.
pub fn random_demand(network: &RoadNetwork, config: &SynthConfig) -> OdMatrix {
    let mut rng = config.rng(STREAM_DEMAND);
    let pairs = network.pairs();
    let values = (0..pairs.len())
        .map(|_| {
            if config.integer_demand {
                rng.random_range(0..=config.demand_max) as f64
            } else {
                rng.random_range(0.0..=config.demand_max as f64)
            }
        })
        .collect();
    OdMatrix::new(pairs, values).expect("uniform draws are finite and non-negative")
}

/// Equilibrium edge flows under distance costs.
pub fn uncongested_flows(network: &RoadNetwork, demand: &OdMatrix) -> Result<Vec<f64>> {
    Ok(frank_wolfe(network, demand, &AssignmentConfig::with_cost(CostModel::Length))?.flows)
}

fn poisson_days(config: &SynthConfig, means: &[f64], days: usize, stream: u64, prefix: &str) -> Result<FlowSampleSet> {
    let snapshots = (0..days)
        .into_par_iter()
        .map(|d| {
            let mut rng = config.rng(stream + d as u64);
            let flows = means
                .iter()
                .map(|&lambda| {
                    if lambda > 0.0 {
                        Poisson::new(lambda)
                            .map(|p| p.sample(&mut rng))
                            .map_err(|e| Error::Numerical(format!("poisson mean {lambda}: {e}")))
                    } else {
                        Ok(0.0)
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(FlowSnapshot {
                label: format!("{prefix}{d:03}"),
                flows,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FlowSampleSet::new(means.len(), snapshots)
}

/// `ceil(multiplier * |A|)` fitting days of Poisson flows around the
/// uncongested equilibrium of `truth`.
pub fn simulate_flows(network: &RoadNetwork, truth: &OdMatrix, config: &SynthConfig) -> Result<FlowSampleSet> {
    let means = uncongested_flows(network, truth)?;
    poisson_days(config, &means, config.sample_count(network.edge_count()), STREAM_FIT, "fit")
}

/// Held-out days drawn from an independent random stream.
pub fn simulate_validation(network: &RoadNetwork, truth: &OdMatrix, config: &SynthConfig) -> Result<FlowSampleSet> {
    let means = uncongested_flows(network, truth)?;
    poisson_days(config, &means, config.validation_days, STREAM_VALIDATION, "val")
}

/// A complete synthetic experiment: network, truth and samples.
#[derive(Debug, Clone)]
pub struct SynthScenario {
    pub network: RoadNetwork,
    pub truth: OdMatrix,
    pub mean_flows: Vec<f64>,
    pub fitting: FlowSampleSet,
    pub validation: FlowSampleSet,
}

impl SynthScenario {
    /// Builds the network, draws the truth, sets every capacity to ten times
    /// the largest equilibrium flow, and samples fitting and validation days.
    pub fn generate(config: &SynthConfig) -> Result<Self> {
        let network = build_block_network(config)?;
        let truth = random_demand(&network, config);
        let mean_flows = uncongested_flows(&network, &truth)?;
        let max_flow = mean_flows.iter().copied().fold(0.0, f64::max);
        let capacity = if max_flow > 0.0 { 10.0 * max_flow } else { 1.0 };
        let network = network.map_edges(|_, e| SuperEdge {
            capacity_vph: capacity,
            ..e.clone()
        })?;
        let fitting = poisson_days(
            config,
            &mean_flows,
            config.sample_count(network.edge_count()),
            STREAM_FIT,
            "fit",
        )?;
        let validation = poisson_days(config, &mean_flows, config.validation_days, STREAM_VALIDATION, "val")?;
        Ok(SynthScenario {
            network,
            truth,
            mean_flows,
            fitting,
            validation,
        })
    }
}
