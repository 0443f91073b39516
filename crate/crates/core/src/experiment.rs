//! End-to-end experiment: partition, build a prior with one strategy,
//! adjust it to the fitting flows, assign, and score the assignment
//! against held-out days, once per partition size and time bin.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::adjustment::{adjust, AdjustTraceRow, AdjustmentConfig};
use crate::assignment::{frank_wolfe, CostModel};
use crate::demand::OdMatrix;
use crate::error::{Error, Result};
use crate::estimation::{
    combined_prior, degenerate_prior, external_prior, internal_prior, unpartitioned_estimate, GlsConfig,
};
use crate::memory;
use crate::network::{FlowSampleSet, RoadNetwork};
use crate::partition::{build_community_network, louvain, resolution_sweep, sweep_seed, CommunityNetwork, Partitioning};
use crate::routing::DEFAULT_K;
use crate::validation::{rae_flow, rae_time, summarize, Summary};

/// Adjustment iteration cap used by experiments. First-order adjustment
/// from a GLS prior typically needs 30 to 150 iterations on the synthetic
/// block networks.
pub const EXPERIMENT_ADJUST_ITERATIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Degenerate,
    Internal,
    External,
    Combined,
    Unpartitioned,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "degenerate" => Ok(Strategy::Degenerate),
            "internal" => Ok(Strategy::Internal),
            "external" => Ok(Strategy::External),
            "combined" => Ok(Strategy::Combined),
            "unpartitioned" => Ok(Strategy::Unpartitioned),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::Degenerate => "degenerate",
            Strategy::Internal => "internal",
            Strategy::External => "external",
            Strategy::Combined => "combined",
            Strategy::Unpartitioned => "unpartitioned",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResolutionChoice {
    /// Every distinct community count found by the resolution sweep.
    Sweep,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub resolution: ResolutionChoice,
    pub k: usize,
    pub seed: u64,
    pub gls: GlsConfig,
    /// Also carries the assignment settings used for validation.
    pub adjustment: AdjustmentConfig,
    /// Skip the adjustment stage and assign the prior directly.
    pub skip_adjustment: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategy: Strategy::Unpartitioned,
            resolution: ResolutionChoice::Sweep,
            k: DEFAULT_K,
            seed: 0,
            gls: GlsConfig::default(),
            adjustment: AdjustmentConfig {
                max_iterations: EXPERIMENT_ADJUST_ITERATIONS,
                ..Default::default()
            },
            skip_adjustment: false,
        }
    }
}

/// Fitting and validation data for one time bin.
#[derive(Debug, Clone)]
pub struct BinData {
    pub label: String,
    pub fitting: FlowSampleSet,
    pub validation: FlowSampleSet,
    /// Mean observed speed per edge over the validation days, km/h.
    pub speeds: Option<Vec<Option<f64>>>,
}

/// One partition size in one time bin.
#[derive(Debug, Clone, Serialize)]
pub struct SizeEntry {
    pub bin: String,
    pub community_count: usize,
    pub resolution: Option<f64>,
    /// Mean share of supernodes per community, `100 / community_count`.
    pub percent: f64,
    pub flow_rae: Option<Vec<Option<f64>>>,
    pub flow_summary: Option<Summary>,
    pub time_rae: Option<Vec<Option<f64>>>,
    pub time_summary: Option<Summary>,
    pub wall_seconds: f64,
    /// Heap growth above the live size at the start of the entry.
    pub peak_heap_bytes: Option<usize>,
    pub peak_rss_bytes: Option<u64>,
    pub converged: bool,
    pub diagnostic: Option<String>,
    pub error: Option<String>,
    /// Estimated demand; community-level for the degenerate strategy.
    #[serde(skip)]
    pub demand: Option<OdMatrix>,
    #[serde(skip)]
    pub predicted_flows: Option<Vec<f64>>,
    #[serde(skip)]
    pub adjust_trace: Vec<AdjustTraceRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub strategy: Strategy,
    pub seed: u64,
    /// Sorted by bin, then by descending community count.
    pub entries: Vec<SizeEntry>,
}

impl ValidationReport {
    pub fn entries_for_bin<'a>(&'a self, bin: &'a str) -> impl Iterator<Item = &'a SizeEntry> + 'a {
        self.entries.iter().filter(move |e| e.bin == bin)
    }
}

impl ExperimentConfig {
    pub fn with_cost(mut self, cost: CostModel) -> Self {
        self.adjustment.assignment.cost = cost;
        self
    }
}

fn check_config(network: &RoadNetwork, bins: &[BinData], config: &ExperimentConfig) -> Result<()> {
    if config.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if let ResolutionChoice::Fixed(r) = config.resolution {
        if !(r.is_finite() && r >= 0.0) {
            return Err(Error::Config(format!("resolution {r} must be finite and non-negative")));
        }
    }
    if bins.is_empty() {
        return Err(Error::Config("no time bins to run".into()));
    }
    let mut labels = BTreeSet::new();
    let m = network.edge_count();
    for b in bins {
        if !labels.insert(&b.label) {
            return Err(Error::Config(format!("duplicate bin {}", b.label)));
        }
        if b.fitting.edge_count() != m || b.validation.edge_count() != m {
            return Err(Error::Config(format!("bin {} samples do not match the network", b.label)));
        }
        if b.fitting.len() < 2 {
            return Err(Error::Config(format!("bin {} needs at least two fitting samples", b.label)));
        }
        if b.validation.is_empty() {
            return Err(Error::Config(format!("bin {} has no validation samples", b.label)));
        }
        let fit: BTreeSet<&str> = b.fitting.snapshots().iter().map(|s| s.label.as_str()).collect();
        if let Some(s) = b.validation.snapshots().iter().find(|s| fit.contains(s.label.as_str())) {
            return Err(Error::Config(format!(
                "bin {}: day {} is used for both fitting and validation",
                b.label, s.label
            )));
        }
        if let Some(speeds) = &b.speeds {
            if speeds.len() != m {
                return Err(Error::Config(format!("bin {} speeds do not match the network", b.label)));
            }
        }
    }
    Ok(())
}

struct Outcome {
    demand: OdMatrix,
    predicted: Vec<f64>,
    converged: bool,
    diagnostic: Option<String>,
    trace: Vec<AdjustTraceRow>,
    flow_rae: Option<Vec<Option<f64>>>,
    time_rae: Option<Vec<Option<f64>>>,
}

/// Adjusts (unless disabled), assigns and scores on `net`. A run that
/// fails to converge gets no RAE values.
fn finish(
    net: &RoadNetwork,
    prior: OdMatrix,
    fit_mean: &[f64],
    val_mean: &[f64],
    speeds: Option<&[Option<f64>]>,
    config: &ExperimentConfig,
) -> Result<Outcome> {
    let (demand, predicted, converged, diagnostic, trace) = if config.skip_adjustment {
        let ue = frank_wolfe(net, &prior, &config.adjustment.assignment)?;
        let diag = (!ue.converged).then(|| format!("assignment stopped at relative gap {:.3e}", ue.relative_gap));
        (prior, ue.flows, ue.converged, diag, Vec::new())
    } else {
        let res = adjust(net, &prior, fit_mean, &config.adjustment)?;
        (res.demand, res.equilibrium.flows, res.converged, res.diagnostic, res.trace)
    };
    let (flow_rae, time_rae) = if converged {
        let flow = Some(rae_flow(&predicted, val_mean)?);
        let time = match speeds {
            Some(s) => Some(rae_time(&predicted, net, s)?),
            None => None,
        };
        (flow, time)
    } else {
        (None, None)
    };
    Ok(Outcome {
        demand,
        predicted,
        converged,
        diagnostic,
        trace,
        flow_rae,
        time_rae,
    })
}

/// Observed community-edge speeds: member travel times averaged with the
/// observed flows as weights (plain mean if those are all zero), turned
/// back into a speed over the community edge length.
fn community_speeds(
    community: &CommunityNetwork,
    network: &RoadNetwork,
    flows: &[f64],
    speeds: &[Option<f64>],
) -> Vec<Option<f64>> {
    community
        .network
        .edges()
        .iter()
        .zip(&community.members)
        .map(|(ce, members)| {
            let obs: Vec<(f64, f64)> = members
                .iter()
                .filter_map(|&a| match speeds[a] {
                    Some(v) if v > 0.0 => Some((network.edges()[a].length_km / v, flows[a])),
                    _ => None,
                })
                .collect();
            if obs.is_empty() {
                return None;
            }
            let w: f64 = obs.iter().map(|o| o.1).sum();
            let t = if w > 0.0 {
                obs.iter().map(|(t, f)| t * f).sum::<f64>() / w
            } else {
                obs.iter().map(|o| o.0).sum::<f64>() / obs.len() as f64
            };
            (t > 0.0).then(|| ce.length_km / t)
        })
        .collect()
}

fn run_size(
    network: &RoadNetwork,
    partitioning: Option<&Partitioning>,
    bin: &BinData,
    config: &ExperimentConfig,
) -> Result<Outcome> {
    let fit_mean = bin.fitting.mean();
    let val_mean = bin.validation.mean();
    let speeds = bin.speeds.as_deref();
    let community = |p: &Partitioning| build_community_network(network, p, &bin.fitting);
    let prior = match (config.strategy, partitioning) {
        (Strategy::Unpartitioned, _) => unpartitioned_estimate(network, &bin.fitting, config.k, &config.gls)?.demand,
        (_, None) => return Err(Error::Config(format!("{} strategy needs a partitioning", config.strategy))),
        (Strategy::Degenerate, Some(p)) => {
            let com = community(p)?;
            let h = degenerate_prior(&com, config.k, &config.gls)?.demand;
            let val = com.aggregate(&bin.validation)?.mean();
            let com_speeds = speeds.map(|s| community_speeds(&com, network, &val_mean, s));
            return finish(&com.network, h, &com.samples.mean(), &val, com_speeds.as_deref(), config);
        }
        (Strategy::Internal, Some(p)) => internal_prior(network, p, &bin.fitting, config.k, &config.gls)?,
        (Strategy::External, Some(p)) => {
            let h = degenerate_prior(&community(p)?, config.k, &config.gls)?.demand;
            external_prior(&h, p)?
        }
        (Strategy::Combined, Some(p)) => {
            let h = degenerate_prior(&community(p)?, config.k, &config.gls)?.demand;
            let ext = external_prior(&h, p)?;
            let int = internal_prior(network, p, &bin.fitting, config.k, &config.gls)?;
            combined_prior(&int, &ext)?
        }
    };
    finish(network, prior, &fit_mean, &val_mean, speeds, config)
}

fn partitionings(network: &RoadNetwork, config: &ExperimentConfig) -> Result<Vec<Partitioning>> {
    match config.resolution {
        ResolutionChoice::Sweep => {
            let sweep = resolution_sweep(network, config.seed)?;
            Ok(sweep)
        }
        ResolutionChoice::Fixed(r) => Ok(vec![louvain(network, r, sweep_seed(config.seed, r))?]),
    }
}

/// Runs the configured strategy for every partition size and bin. Sizes
/// run one after another so that the memory figures of different sizes do
/// not mix. Failures of a single size are recorded in its entry.
pub fn run_experiment(network: &RoadNetwork, bins: &[BinData], config: &ExperimentConfig) -> Result<ValidationReport> {
    check_config(network, bins, config)?;
    let sizes: Vec<Option<Partitioning>> = match config.strategy {
        Strategy::Unpartitioned => vec![None],
        _ => partitionings(network, config)?.into_iter().map(Some).collect(),
    };
    let mut entries = Vec::new();
    for bin in bins {
        for p in &sizes {
            let count = p.as_ref().map_or(1, |p| p.community_count);
            info!("{} strategy, bin {}, {count} communities", config.strategy, bin.label);
            let heap_before = memory::current_heap_bytes();
            memory::reset_peak();
            memory::reset_peak_rss();
            let start = Instant::now();
            let result = run_size(network, p.as_ref(), bin, config);
            let wall_seconds = start.elapsed().as_secs_f64();
            let peak_heap_bytes = memory::peak_heap_bytes().zip(heap_before).map(|(p, b)| p.saturating_sub(b));
            let peak_rss_bytes = memory::peak_rss_bytes();
            let mut entry = SizeEntry {
                bin: bin.label.clone(),
                community_count: count,
                resolution: p.as_ref().map(|p| p.resolution),
                percent: 100.0 / count as f64,
                flow_rae: None,
                flow_summary: None,
                time_rae: None,
                time_summary: None,
                wall_seconds,
                peak_heap_bytes,
                peak_rss_bytes,
                converged: false,
                diagnostic: None,
                error: None,
                demand: None,
                predicted_flows: None,
                adjust_trace: Vec::new(),
            };
            match result {
                Ok(o) => {
                    if let Some(d) = &o.diagnostic {
                        warn!("bin {}, {count} communities: {d}", bin.label);
                    }
                    entry.flow_summary = o.flow_rae.as_deref().and_then(summarize);
                    entry.time_summary = o.time_rae.as_deref().and_then(summarize);
                    entry.flow_rae = o.flow_rae;
                    entry.time_rae = o.time_rae;
                    entry.converged = o.converged;
                    entry.diagnostic = o.diagnostic;
                    entry.demand = Some(o.demand);
                    entry.predicted_flows = Some(o.predicted);
                    entry.adjust_trace = o.trace;
                }
                Err(e) => {
                    warn!("bin {}, {count} communities failed: {e}", bin.label);
                    entry.error = Some(e.to_string());
                }
            }
            entries.push(entry);
        }
    }
    Ok(ValidationReport {
        strategy: config.strategy,
        seed: config.seed,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{SynthConfig, SynthScenario};

    fn synth_bin(blocks: usize, seed: u64) -> (RoadNetwork, BinData) {
        let s = SynthScenario::generate(&SynthConfig::with_blocks(blocks, seed)).unwrap();
        let bin = BinData {
            label: "sim".into(),
            fitting: s.fitting,
            validation: s.validation,
            speeds: None,
        };
        (s.network, bin)
    }

    fn length_config(strategy: Strategy) -> ExperimentConfig {
        ExperimentConfig {
            strategy,
            ..Default::default()
        }
        .with_cost(CostModel::Length)
    }

    #[test]
    fn unpartitioned_has_one_entry() {
        let (net, bin) = synth_bin(1, 4);
        let report = run_experiment(&net, &[bin], &length_config(Strategy::Unpartitioned)).unwrap();
        assert_eq!(report.entries.len(), 1);
        let e = &report.entries[0];
        assert_eq!(e.community_count, 1);
        assert!(e.converged, "{:?}", e.diagnostic);
        let s = e.flow_summary.unwrap();
        assert!(s.min <= s.median && s.median <= s.max && s.min >= 0.0);
    }

    #[test]
    fn singleton_internal_is_not_converged() {
        let (net, bin) = synth_bin(1, 4);
        let mut cfg = length_config(Strategy::Internal);
        cfg.resolution = ResolutionChoice::Fixed(0.0);
        let report = run_experiment(&net, &[bin], &cfg).unwrap();
        let e = &report.entries[0];
        assert_eq!(e.community_count, 9);
        assert!(!e.converged);
        assert!(e.flow_rae.is_none());
        assert!(e.error.is_none());
    }

    #[test]
    fn overlapping_days_are_rejected() {
        let (net, mut bin) = synth_bin(1, 4);
        bin.validation = bin.fitting.clone();
        let r = run_experiment(&net, &[bin], &length_config(Strategy::Unpartitioned));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn one_community_size_is_recorded_as_failure() {
        let (net, bin) = synth_bin(1, 4);
        let mut cfg = length_config(Strategy::External);
        cfg.resolution = ResolutionChoice::Fixed(1e9);
        let report = run_experiment(&net, &[bin], &cfg).unwrap();
        let e = &report.entries[0];
        assert_eq!(e.community_count, 1);
        assert!(e.error.as_deref().unwrap().contains("degenerate"));
        assert!(e.wall_seconds >= 0.0);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [
            Strategy::Degenerate,
            Strategy::Internal,
            Strategy::External,
            Strategy::Combined,
            Strategy::Unpartitioned,
        ] {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("nope".parse::<Strategy>().is_err());
    }
}
