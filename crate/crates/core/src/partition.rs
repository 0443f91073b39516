//! Louvain community detection on the undirected distance-weighted graph,
//! the resolution sweep, and aggregation into a community network.
//!
//! Resolution convention: a resolution `r` scales the null-model term of
//! modularity by `1 / r`. `r = 0` therefore yields singletons (the
//! unpartitioned network) and larger values yield fewer communities.
//! [`Partitioning::modularity`] always reports the standard `Q` (null-model
//! factor one).

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{FlowSampleSet, FlowSnapshot, RoadNetwork, SuperEdge, SuperNode};

pub const SWEEP_GRID_POINTS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Partitioning {
    pub resolution: f64,
    /// Community of each node, by node index; ids are contiguous from 0 and
    /// numbered in order of first appearance.
    pub assignment: Vec<usize>,
    pub community_count: usize,
    /// Standard modularity of the assignment.
    pub modularity: f64,
}

impl Partitioning {
    /// Node indices of every community.
    pub fn communities(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.community_count];
        for (v, &c) in self.assignment.iter().enumerate() {
            out[c].push(v);
        }
        out
    }

    /// Builds a partitioning from any labelling, renumbering communities in
    /// order of first appearance.
    pub fn from_labels(network: &RoadNetwork, labels: &[usize], resolution: f64) -> Result<Self> {
        if labels.len() != network.node_count() {
            return Err(Error::InvalidAssignment(format!(
                "assignment covers {} nodes, network has {}",
                labels.len(),
                network.node_count()
            )));
        }
        let (assignment, community_count) = renumber(labels);
        let modularity = modularity(network, &assignment, 1.0)?;
        Ok(Partitioning {
            resolution,
            assignment,
            community_count,
            modularity,
        })
    }
}

fn renumber(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        let next = map.len();
        out.push(*map.entry(l).or_insert(next));
    }
    (out, map.len())
}

/// Weighted undirected graph with explicit self-loop weights `A_ii`.
#[derive(Debug, Clone)]
struct Graph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
    degree: Vec<f64>,
    two_m: f64,
}

impl Graph {
    fn from_pairs(n: usize, pairs: &BTreeMap<(usize, usize), f64>, self_loops: Vec<f64>) -> Graph {
        let mut adj = vec![Vec::new(); n];
        for (&(u, v), &w) in pairs {
            adj[u].push((v, w));
            adj[v].push((u, w));
        }
        let degree: Vec<f64> = (0..n)
            .map(|i| adj[i].iter().map(|&(_, w)| w).sum::<f64>() + self_loops[i])
            .collect();
        let two_m = degree.iter().sum();
        Graph {
            adj,
            self_loops,
            degree,
            two_m,
        }
    }

    fn len(&self) -> usize {
        self.degree.len()
    }
}

/// Undirected graph with weights `1 / length_km`. Parallel edges in one
/// direction add up; the two directions of a carriageway pair are merged
/// into one undirected edge carrying the mean of the two direction weights.
fn undirected_graph(network: &RoadNetwork) -> Graph {
    let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (a, e) in network.edges().iter().enumerate() {
        let (t, h) = (network.tail(a), network.head(a));
        if t == h {
            continue;
        }
        *directed.entry((t, h)).or_insert(0.0) += 1.0 / e.length_km;
    }
    let mut undirected = BTreeMap::new();
    for (&(t, h), &w) in &directed {
        let key = (t.min(h), t.max(h));
        if undirected.contains_key(&key) {
            continue;
        }
        let w = match directed.get(&(h, t)) {
            Some(&back) => {
                if (w - back).abs() > 1e-9 * w.max(back) {
                    warn!(
                        "carriageways between {} and {} have different lengths; using the mean weight",
                        network.nodes()[t].id,
                        network.nodes()[h].id
                    );
                }
                0.5 * (w + back)
            }
            None => w,
        };
        undirected.insert(key, w);
    }
    Graph::from_pairs(network.node_count(), &undirected, vec![0.0; network.node_count()])
}

fn check_resolution(resolution: f64) -> Result<()> {
    if !(resolution >= 0.0) || resolution.is_infinite() {
        return Err(Error::InvalidInput(format!("resolution must be finite and >= 0, got {resolution}")));
    }
    Ok(())
}

fn graph_modularity(graph: &Graph, assignment: &[usize], gamma: f64) -> f64 {
    if graph.two_m <= 0.0 {
        return 0.0;
    }
    let communities = assignment.iter().copied().max().map_or(0, |c| c + 1);
    let mut internal = vec![0.0; communities];
    let mut tot = vec![0.0; communities];
    for i in 0..graph.len() {
        let c = assignment[i];
        tot[c] += graph.degree[i];
        internal[c] += graph.self_loops[i];
        for &(j, w) in &graph.adj[i] {
            if assignment[j] == c {
                internal[c] += w;
            }
        }
    }
    let two_m = graph.two_m;
    internal
        .iter()
        .zip(&tot)
        .map(|(a, t)| a / two_m - gamma * (t / two_m) * (t / two_m))
        .sum()
}

/// Modularity of `assignment` (community per node index) on the undirected
/// inverse-length graph, with the null-model term scaled by `1/resolution`.
pub fn modularity(network: &RoadNetwork, assignment: &[usize], resolution: f64) -> Result<f64> {
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(Error::InvalidInput(format!("resolution must be finite and > 0, got {resolution}")));
    }
    if assignment.len() != network.node_count() {
        return Err(Error::InvalidAssignment(format!(
            "assignment covers {} nodes, network has {}",
            assignment.len(),
            network.node_count()
        )));
    }
    let (labels, _) = renumber(assignment);
    Ok(graph_modularity(&undirected_graph(network), &labels, 1.0 / resolution))
}

/// One level of local moves. Returns the community of each graph node and
/// whether anything moved.
fn local_moves(graph: &Graph, gamma: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
    let n = graph.len();
    let mut community: Vec<usize> = (0..n).collect();
    let mut tot: Vec<f64> = graph.degree.clone();
    let mut size = vec![1usize; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let two_m = graph.two_m;
    let mut moved_any = false;
    let mut links: BTreeMap<usize, f64> = BTreeMap::new();

    loop {
        let mut moved = false;
        for &i in &order {
            let ki = graph.degree[i];
            let own = community[i];
            links.clear();
            for &(j, w) in &graph.adj[i] {
                *links.entry(community[j]).or_insert(0.0) += w;
            }
            tot[own] -= ki;
            size[own] -= 1;
            let gain = |c: usize, k_ic: f64, tot: &[f64]| k_ic - gamma * ki * tot[c] / two_m;
            let own_gain = gain(own, links.get(&own).copied().unwrap_or(0.0), &tot);
            let eps = 1e-12 * ki.max(f64::MIN_POSITIVE);
            let mut best = own;
            let mut best_gain = own_gain;
            for (&c, &k_ic) in &links {
                if c == own {
                    continue;
                }
                let g = gain(c, k_ic, &tot);
                if g > best_gain + eps {
                    best = c;
                    best_gain = g;
                }
            }
            // moving into an empty community has gain zero
            if size[own] > 0 && 0.0 > best_gain + eps {
                if let Some(empty) = size.iter().position(|&s| s == 0) {
                    best = empty;
                }
            }
            community[i] = best;
            tot[best] += ki;
            size[best] += 1;
            if best != own {
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            break;
        }
    }
    (community, moved_any)
}

fn aggregate(graph: &Graph, community: &[usize], count: usize) -> Graph {
    let mut pairs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut self_loops = vec![0.0; count];
    for i in 0..graph.len() {
        let ci = community[i];
        self_loops[ci] += graph.self_loops[i];
        for &(j, w) in &graph.adj[i] {
            let cj = community[j];
            if ci == cj {
                // each internal edge is seen from both ends, matching A_ii
                // as a sum over ordered pairs
                self_loops[ci] += w;
            } else if ci < cj {
                *pairs.entry((ci, cj)).or_insert(0.0) += w;
            }
        }
    }
    Graph::from_pairs(count, &pairs, self_loops)
}

/// Louvain community detection at one resolution. Deterministic for a given
/// network, resolution and seed.
pub fn louvain(network: &RoadNetwork, resolution: f64, seed: u64) -> Result<Partitioning> {
    check_resolution(resolution)?;
    let n = network.node_count();
    if resolution == 0.0 || n == 0 {
        return Partitioning::from_labels(network, &(0..n).collect::<Vec<_>>(), resolution);
    }
    let gamma = 1.0 / resolution;
    let mut graph = undirected_graph(network);
    if graph.two_m <= 0.0 {
        return Partitioning::from_labels(network, &(0..n).collect::<Vec<_>>(), resolution);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).collect();
    loop {
        let (community, moved) = local_moves(&graph, gamma, &mut rng);
        if !moved {
            break;
        }
        let (community, count) = renumber(&community);
        for l in labels.iter_mut() {
            *l = community[*l];
        }
        if count == graph.len() {
            break;
        }
        graph = aggregate(&graph, &community, count);
    }
    Partitioning::from_labels(network, &labels, resolution)
}

/// Seed of the Louvain run at `resolution` within a sweep seeded with
/// `master`. Fixed-resolution runs use it too, so they reproduce the
/// corresponding sweep entry.
pub fn sweep_seed(master: u64, resolution: f64) -> u64 {
    master ^ resolution.to_bits()
}

/// Scans resolutions from the unpartitioned end to the two-community end
/// and keeps, for each community count, the partitioning found at the
/// lowest resolution. Sorted by descending community count; the trivial
/// one-community partitioning is left out.
pub fn resolution_sweep(network: &RoadNetwork, seed: u64) -> Result<Vec<Partitioning>> {
    let n = network.node_count();
    let run = |r: f64| louvain(network, r, sweep_seed(seed, r));

    let mut lo = 1.0f64;
    while lo > 1e-12 && run(lo)?.community_count < n {
        lo *= 0.5;
    }
    let mut hi = 1.0f64;
    let mut hi_count = run(hi)?.community_count;
    while hi_count > 2 && hi < 1e12 {
        hi *= 2.0;
        hi_count = run(hi)?.community_count;
    }
    if hi_count < 2 {
        // bracket the two-community regime from below
        let mut below = hi / 2.0;
        let mut above = hi;
        if below < lo {
            below = lo;
        }
        for _ in 0..40 {
            let mid = (below * above).sqrt();
            let c = run(mid)?.community_count;
            if c == 2 {
                hi = mid;
                break;
            }
            if c > 2 {
                below = mid;
            } else {
                above = mid;
            }
            hi = above;
        }
    }
    if hi < lo {
        hi = lo;
    }

    let grid: Vec<f64> = (0..SWEEP_GRID_POINTS)
        .map(|k| {
            if SWEEP_GRID_POINTS == 1 || hi == lo {
                lo
            } else {
                lo * (hi / lo).powf(k as f64 / (SWEEP_GRID_POINTS - 1) as f64)
            }
        })
        .collect();
    let mut results: Vec<Partitioning> = std::iter::once(run(0.0))
        .chain(grid.par_iter().map(|&r| run(r)).collect::<Vec<_>>())
        .collect::<Result<_>>()?;
    results.sort_by(|a, b| a.resolution.total_cmp(&b.resolution));

    let mut by_count: BTreeMap<usize, Partitioning> = BTreeMap::new();
    for p in results {
        if p.community_count > 1 {
            by_count.entry(p.community_count).or_insert(p);
        }
    }
    if !by_count.contains_key(&2) {
        warn!(
            "resolution sweep did not reach two communities; coarsest has {}",
            by_count.keys().next().copied().unwrap_or(n)
        );
    }
    Ok(by_count.into_values().rev().collect())
}

/// Network whose nodes are communities and whose edges aggregate the
/// original edges crossing between each ordered community pair.
#[derive(Debug, Clone)]
pub struct CommunityNetwork {
    pub network: RoadNetwork,
    /// Original edge indices behind each community edge.
    pub members: Vec<Vec<usize>>,
    /// Summed flows per community edge for every snapshot.
    pub samples: FlowSampleSet,
    pub partitioning: Partitioning,
}

impl CommunityNetwork {
    /// Aggregates another sample set (e.g. validation days) onto the
    /// community edges.
    pub fn aggregate(&self, samples: &FlowSampleSet) -> Result<FlowSampleSet> {
        aggregate_samples(&self.members, samples)
    }
}

fn aggregate_samples(members: &[Vec<usize>], samples: &FlowSampleSet) -> Result<FlowSampleSet> {
    let snaps = samples
        .snapshots()
        .iter()
        .map(|s| FlowSnapshot {
            label: s.label.clone(),
            flows: members.iter().map(|m| m.iter().map(|&a| s.flows[a]).sum()).collect(),
        })
        .collect();
    FlowSampleSet::new(members.len(), snaps)
}

fn weighted_mean(values: impl Iterator<Item = (f64, f64)> + Clone) -> f64 {
    let total: f64 = values.clone().map(|(_, w)| w).sum();
    if total > 0.0 {
        values.map(|(v, w)| v * w).sum::<f64>() / total
    } else {
        let (sum, n) = values.fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        sum / n as f64
    }
}

/// Aggregates the network over `partitioning`. Length, free-flow time and
/// BPR parameters are means weighted by each edge's mean flow over all
/// snapshots (plain means when those flows are all zero); capacities and
/// flows add up.
pub fn build_community_network(
    network: &RoadNetwork,
    partitioning: &Partitioning,
    samples: &FlowSampleSet,
) -> Result<CommunityNetwork> {
    if partitioning.assignment.len() != network.node_count() {
        return Err(Error::InvalidAssignment(format!(
            "assignment covers {} nodes, network has {}",
            partitioning.assignment.len(),
            network.node_count()
        )));
    }
    if samples.edge_count() != network.edge_count() {
        return Err(Error::InvalidInput("samples do not match the network".into()));
    }
    let assign = &partitioning.assignment;
    let mut crossing: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for a in 0..network.edge_count() {
        let (x, y) = (assign[network.tail(a)], assign[network.head(a)]);
        if x != y {
            crossing.entry((x, y)).or_default().push(a);
        }
    }
    if crossing.is_empty() {
        return Err(Error::DegenerateNetwork("no edges cross between communities".into()));
    }
    let mean = samples.mean();
    let nodes: Vec<SuperNode> = (0..partitioning.community_count)
        .map(|c| SuperNode::new(format!("C{c}")))
        .collect();
    let mut edges = Vec::with_capacity(crossing.len());
    let mut members = Vec::with_capacity(crossing.len());
    for (&(x, y), list) in &crossing {
        let src = network.edges();
        let weighted = |f: fn(&SuperEdge) -> f64| weighted_mean(list.iter().map(|&a| (f(&src[a]), mean[a])));
        let mut edge = SuperEdge::new(
            format!("c{x}-c{y}"),
            format!("C{x}"),
            format!("C{y}"),
            weighted(|e| e.length_km),
            list.iter().map(|&a| src[a].capacity_vph).sum(),
            weighted(|e| e.free_flow_time_h),
        );
        edge.alpha = weighted(|e| e.alpha);
        edge.beta = weighted(|e| e.beta);
        edges.push(edge);
        members.push(list.clone());
    }
    let community = RoadNetwork::new(nodes, edges)?;
    if !community.is_strongly_connected() {
        return Err(Error::DegenerateNetwork(format!(
            "community network with {} communities is not strongly connected",
            partitioning.community_count
        )));
    }
    let aggregated = aggregate_samples(&members, samples)?;
    Ok(CommunityNetwork {
        network: community,
        members,
        samples: aggregated,
        partitioning: partitioning.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bidirected(nodes: &[&str], links: &[(&str, &str, f64)]) -> RoadNetwork {
        let mut edges = Vec::new();
        for &(u, v, len) in links {
            edges.push(SuperEdge::new(format!("{u}-{v}"), u, v, len, 100.0, len));
            edges.push(SuperEdge::new(format!("{v}-{u}"), v, u, len, 100.0, len));
        }
        RoadNetwork::new(nodes.iter().map(|&n| SuperNode::new(n)).collect(), edges).unwrap()
    }

    #[test]
    fn single_community_has_zero_modularity() {
        let net = bidirected(&["a", "b", "c"], &[("a", "b", 1.0), ("b", "c", 2.0)]);
        assert!(modularity(&net, &[0, 0, 0], 1.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn singletons_modularity_is_minus_sum_of_squares() {
        let net = bidirected(&["a", "b", "c"], &[("a", "b", 1.0), ("b", "c", 2.0)]);
        let k = [1.0, 1.5, 0.5];
        let two_m: f64 = k.iter().sum();
        let want: f64 = -k.iter().map(|x| x * x).sum::<f64>() / (two_m * two_m);
        assert!((modularity(&net, &[0, 1, 2], 1.0).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn disconnected_cliques_score_one_half() {
        let net = bidirected(
            &["a", "b", "c", "d", "e", "f"],
            &[
                ("a", "b", 1.0),
                ("b", "c", 1.0),
                ("a", "c", 1.0),
                ("d", "e", 1.0),
                ("e", "f", 1.0),
                ("d", "f", 1.0),
            ],
        );
        assert!((modularity(&net, &[0, 0, 0, 1, 1, 1], 1.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bad_assignment_length_rejected() {
        let net = bidirected(&["a", "b"], &[("a", "b", 1.0)]);
        assert!(matches!(modularity(&net, &[0], 1.0), Err(Error::InvalidAssignment(_))));
        assert!(matches!(modularity(&net, &[0, 0], 0.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_resolution_is_singletons() {
        let net = bidirected(&["a", "b", "c"], &[("a", "b", 1.0), ("b", "c", 1.0)]);
        let p = louvain(&net, 0.0, 7).unwrap();
        assert_eq!(p.community_count, 3);
        assert_eq!(p.assignment, vec![0, 1, 2]);
    }

    #[test]
    fn weighted_lengths_aggregate() {
        // two crossing edges from {a} to {b} with lengths 1 and 3, mean flows 100 and 300
        let net = RoadNetwork::new(
            vec![SuperNode::new("a"), SuperNode::new("b")],
            vec![
                SuperEdge::new("e1", "a", "b", 1.0, 50.0, 1.0),
                SuperEdge::new("e2", "a", "b", 3.0, 70.0, 3.0),
                SuperEdge::new("e3", "b", "a", 2.0, 10.0, 2.0),
            ],
        )
        .unwrap();
        let samples = FlowSampleSet::new(
            3,
            vec![
                FlowSnapshot {
                    label: "d0".into(),
                    flows: vec![50.0, 200.0, 5.0],
                },
                FlowSnapshot {
                    label: "d1".into(),
                    flows: vec![150.0, 400.0, 7.0],
                },
            ],
        )
        .unwrap();
        let p = Partitioning::from_labels(&net, &[0, 1], 1.0).unwrap();
        let cn = build_community_network(&net, &p, &samples).unwrap();
        let ab = cn.network.edge_index("c0-c1").unwrap();
        let e = &cn.network.edges()[ab];
        assert!((e.length_km - 2.5).abs() < 1e-12);
        assert_eq!(e.capacity_vph, 120.0);
        assert_eq!(cn.samples.snapshots()[0].flows[ab], 250.0);
        assert_eq!(cn.samples.snapshots()[1].flows[ab], 550.0);
    }

    #[test]
    fn one_community_is_degenerate() {
        let net = bidirected(&["a", "b"], &[("a", "b", 1.0)]);
        let samples = FlowSampleSet::new(2, vec![]).unwrap();
        let p = Partitioning::from_labels(&net, &[0, 0], 1.0).unwrap();
        assert!(matches!(
            build_community_network(&net, &p, &samples),
            Err(Error::DegenerateNetwork(_))
        ));
    }
}
