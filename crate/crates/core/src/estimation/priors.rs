//! Prior demand matrices built from a partitioning: on the community
//! network, inside each community, split from community totals, or both.

use log::warn;

use super::{gls_estimate, GlsConfig, GlsEstimate};
use crate::demand::OdMatrix;
use crate::error::{Error, Result};
use crate::network::{FlowSampleSet, RoadNetwork};
use crate::partition::{CommunityNetwork, Partitioning};
use crate::routing::route_all_pairs;

/// GLS over the whole network with k routes per pair.
pub fn unpartitioned_estimate(
    network: &RoadNetwork,
    samples: &FlowSampleSet,
    k: usize,
    config: &GlsConfig,
) -> Result<GlsEstimate> {
    let routes = route_all_pairs(network, k)?;
    gls_estimate(network, samples, &routes, config)
}

/// GLS run entirely on the community network; the result is indexed by
/// community pairs.
pub fn degenerate_prior(community: &CommunityNetwork, k: usize, config: &GlsConfig) -> Result<GlsEstimate> {
    if !community.network.is_strongly_connected() {
        return Err(Error::DegenerateNetwork("community network is not strongly connected".into()));
    }
    unpartitioned_estimate(&community.network, &community.samples, k, config)
}

/// Block-diagonal prior: one GLS problem per community on its induced
/// subnetwork, with inter-community pairs left at zero.
pub fn internal_prior(
    network: &RoadNetwork,
    partitioning: &Partitioning,
    samples: &FlowSampleSet,
    k: usize,
    config: &GlsConfig,
) -> Result<OdMatrix> {
    if partitioning.assignment.len() != network.node_count() {
        return Err(Error::InvalidAssignment(format!(
            "assignment covers {} nodes, network has {}",
            partitioning.assignment.len(),
            network.node_count()
        )));
    }
    let pairs = network.pairs();
    let mut values = vec![0.0; pairs.len()];
    for (c, members) in partitioning.communities().into_iter().enumerate() {
        if members.len() < 2 {
            continue;
        }
        let (sub, node_map, edge_map) = network.induced_subnetwork(&members)?;
        if sub.edge_count() == 0 {
            warn!("community {c} has no internal edges; its demand block is zero");
            continue;
        }
        let est = unpartitioned_estimate(&sub, &samples.restrict(&edge_map), k, config)?;
        let sub_pairs = sub.pairs();
        for (i, &g) in est.demand.values().iter().enumerate() {
            let (o, d) = sub_pairs.pair(i);
            let full = pairs
                .index(node_map[o], node_map[d])
                .expect("distinct subnetwork nodes map to distinct nodes");
            values[full] = g;
        }
    }
    OdMatrix::new(pairs, values)
}

/// Splits each community-pair demand equally over its node pairs. The last
/// node pair of each block (row-major order) takes the remainder so that
/// the block total reproduces the community demand exactly.
pub fn external_prior(h_com: &OdMatrix, partitioning: &Partitioning) -> Result<OdMatrix> {
    let c = partitioning.community_count;
    if h_com.pairs().node_count() != c {
        return Err(Error::InvalidInput(format!(
            "community demand has {} communities, partitioning has {c}",
            h_com.pairs().node_count()
        )));
    }
    let communities = partitioning.communities();
    let n = partitioning.assignment.len();
    let pairs = crate::network::OdPairSet::new(n);
    let mut values = vec![0.0; pairs.len()];
    for (k, &h) in h_com.values().iter().enumerate() {
        if h == 0.0 {
            continue;
        }
        let (x, y) = h_com.pairs().pair(k);
        let (from, to) = (&communities[x], &communities[y]);
        let count = from.len() * to.len();
        let share = h / count as f64;
        let mut running = 0.0;
        let mut seen = 0;
        for &o in from {
            for &d in to {
                seen += 1;
                let v = if seen == count { (h - running).max(0.0) } else { share };
                running += v;
                values[pairs.index(o, d).expect("communities are disjoint")] = v;
            }
        }
    }
    OdMatrix::new(pairs, values)
}

/// Entrywise sum of an internal and an external prior whose supports must
/// not overlap.
pub fn combined_prior(internal: &OdMatrix, external: &OdMatrix) -> Result<OdMatrix> {
    if internal.pairs() != external.pairs() {
        return Err(Error::Inconsistency("priors are over different pair sets".into()));
    }
    let mut values = Vec::with_capacity(internal.len());
    for (i, (&a, &b)) in internal.values().iter().zip(external.values()).enumerate() {
        if a != 0.0 && b != 0.0 {
            let (o, d) = internal.pairs().pair(i);
            return Err(Error::Inconsistency(format!(
                "internal and external priors both nonzero for pair ({o}, {d})"
            )));
        }
        values.push(a + b);
    }
    OdMatrix::new(internal.pairs(), values)
}
