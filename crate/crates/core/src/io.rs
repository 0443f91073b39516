//! Flat-file formats: network, flow, demand, route, partition and trace
//! CSVs, raw detector readings, and TNTP network files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::adjustment::AdjustTraceRow;
use crate::assignment::{EquilibriumSolution, FwTraceRow};
use crate::demand::OdMatrix;
use crate::error::{Error, Result};
use crate::ingest::Reading;
use crate::network::{FlowSampleSet, FlowSnapshot, RoadNetwork, SuperEdge, SuperNode, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::partition::{CommunityNetwork, Partitioning};
use crate::routing::RouteSet;

#[derive(Debug, Serialize, Deserialize)]
struct NodeRow {
    id: String,
    label: String,
    lat: Option<f64>,
    lon: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRow {
    id: String,
    tail: String,
    head: String,
    length_km: f64,
    capacity_vph: f64,
    t0_hours: f64,
    alpha: Option<f64>,
    beta: Option<f64>,
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = reader(path)?;
    let mut rows = Vec::new();
    for (i, r) in rdr.deserialize().enumerate() {
        rows.push(r.map_err(|e| Error::parse(format!("{} row {}", path.display(), i + 2), e.to_string()))?);
    }
    Ok(rows)
}

pub fn write_network(network: &RoadNetwork, nodes_path: &Path, edges_path: &Path) -> Result<()> {
    let mut w = writer(nodes_path)?;
    for n in network.nodes() {
        w.serialize(NodeRow {
            id: n.id.clone(),
            label: n.label.clone(),
            lat: n.lat,
            lon: n.lon,
        })?;
    }
    w.flush()?;
    let mut w = writer(edges_path)?;
    for e in network.edges() {
        w.serialize(EdgeRow {
            id: e.id.clone(),
            tail: e.tail.clone(),
            head: e.head.clone(),
            length_km: e.length_km,
            capacity_vph: e.capacity_vph,
            t0_hours: e.free_flow_time_h,
            alpha: Some(e.alpha),
            beta: Some(e.beta),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `nodes.csv` and `edges.csv`. Missing alpha/beta take the defaults.
pub fn read_network(nodes_path: &Path, edges_path: &Path) -> Result<RoadNetwork> {
    let nodes = read_rows::<NodeRow>(nodes_path)?
        .into_iter()
        .map(|r| SuperNode {
            id: r.id,
            label: r.label,
            lat: r.lat,
            lon: r.lon,
        })
        .collect();
    let edges = read_rows::<EdgeRow>(edges_path)?
        .into_iter()
        .map(|r| SuperEdge {
            id: r.id,
            tail: r.tail,
            head: r.head,
            length_km: r.length_km,
            capacity_vph: r.capacity_vph,
            free_flow_time_h: r.t0_hours,
            alpha: r.alpha.unwrap_or(DEFAULT_ALPHA),
            beta: r.beta.unwrap_or(DEFAULT_BETA),
        })
        .collect();
    RoadNetwork::new(nodes, edges)
}

pub fn read_network_dir(dir: &Path) -> Result<RoadNetwork> {
    read_network(&dir.join("nodes.csv"), &dir.join("edges.csv"))
}

pub fn write_network_dir(network: &RoadNetwork, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_network(network, &dir.join("nodes.csv"), &dir.join("edges.csv"))
}

#[derive(Debug, Serialize, Deserialize)]
struct FlowRow {
    day: String,
    edge_id: String,
    flow_vph: f64,
}

/// Long format `day,edge_id,flow_vph`, days and edges in sample order.
pub fn write_flows(samples: &FlowSampleSet, network: &RoadNetwork, path: &Path) -> Result<()> {
    if samples.edge_count() != network.edge_count() {
        return Err(Error::InvalidInput("samples do not match the network".into()));
    }
    let mut w = writer(path)?;
    for s in samples.snapshots() {
        for (e, &f) in network.edges().iter().zip(&s.flows) {
            w.serialize(FlowRow {
                day: s.label.clone(),
                edge_id: e.id.clone(),
                flow_vph: f,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads long-format flows. Days keep their first-appearance order; days
/// missing some edge are dropped with a warning.
pub fn read_flows(network: &RoadNetwork, path: &Path) -> Result<FlowSampleSet> {
    let m = network.edge_count();
    let mut order: Vec<String> = Vec::new();
    let mut days: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for row in read_rows::<FlowRow>(path)? {
        let a = network
            .edge_index(&row.edge_id)
            .ok_or_else(|| Error::parse(path.display().to_string(), format!("unknown edge {}", row.edge_id)))?;
        let entry = days.entry(row.day.clone()).or_insert_with(|| {
            order.push(row.day.clone());
            vec![None; m]
        });
        if entry[a].replace(row.flow_vph).is_some() {
            return Err(Error::parse(
                path.display().to_string(),
                format!("duplicate flow for day {} edge {}", row.day, row.edge_id),
            ));
        }
    }
    let mut snapshots = Vec::with_capacity(order.len());
    for day in order {
        let flows = days.remove(&day).expect("recorded");
        if flows.iter().any(Option::is_none) {
            warn!("dropping day {day} from {}: incomplete edge coverage", path.display());
            continue;
        }
        snapshots.push(FlowSnapshot {
            label: day,
            flows: flows.into_iter().flatten().collect(),
        });
    }
    FlowSampleSet::new(m, snapshots)
}

#[derive(Debug, Serialize, Deserialize)]
struct OdRow {
    origin_id: String,
    destination_id: String,
    demand_vph: f64,
}

/// `origin_id,destination_id,demand_vph` with zero rows omitted.
pub fn write_od(od: &OdMatrix, network: &RoadNetwork, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let nodes = network.nodes();
    for (i, &g) in od.values().iter().enumerate() {
        if g != 0.0 {
            let (o, d) = od.pairs().pair(i);
            w.serialize(OdRow {
                origin_id: nodes[o].id.clone(),
                destination_id: nodes[d].id.clone(),
                demand_vph: g,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_od(network: &RoadNetwork, path: &Path) -> Result<OdMatrix> {
    let pairs = network.pairs();
    let mut values = vec![0.0; pairs.len()];
    for row in read_rows::<OdRow>(path)? {
        let lookup = |id: &str| {
            network
                .node_index(id)
                .ok_or_else(|| Error::InvalidPair(format!("unknown node {id} in {}", path.display())))
        };
        let (o, d) = (lookup(&row.origin_id)?, lookup(&row.destination_id)?);
        let i = pairs
            .index(o, d)
            .ok_or_else(|| Error::InvalidPair(format!("origin equals destination {}", row.origin_id)))?;
        values[i] = row.demand_vph;
    }
    OdMatrix::new(pairs, values)
}

#[derive(Debug, Serialize)]
struct RouteRow<'a> {
    origin_id: &'a str,
    destination_id: &'a str,
    rank: usize,
    length_km: f64,
    edge_ids: String,
}

/// One row per route; edge ids are `;`-separated.
pub fn write_routes(routes: &RouteSet, network: &RoadNetwork, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let nodes = network.nodes();
    for entry in routes.entries() {
        let (o, d) = routes.pair_set().pair(entry.pair);
        for (rank, r) in entry.routes.iter().enumerate() {
            let ids: Vec<&str> = r.edges.iter().map(|&a| network.edges()[a].id.as_str()).collect();
            w.serialize(RouteRow {
                origin_id: &nodes[o].id,
                destination_id: &nodes[d].id,
                rank,
                length_km: r.length_km,
                edge_ids: ids.join(";"),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PartitionRow {
    node_id: String,
    community_id: usize,
}

pub fn write_partition(partitioning: &Partitioning, network: &RoadNetwork, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    for (n, &c) in network.nodes().iter().zip(&partitioning.assignment) {
        w.serialize(PartitionRow {
            node_id: n.id.clone(),
            community_id: c,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a partition file; every node must appear exactly once.
pub fn read_partition(network: &RoadNetwork, path: &Path, resolution: f64) -> Result<Partitioning> {
    let mut labels = vec![None; network.node_count()];
    for row in read_rows::<PartitionRow>(path)? {
        let v = network
            .node_index(&row.node_id)
            .ok_or_else(|| Error::InvalidAssignment(format!("unknown node {}", row.node_id)))?;
        if labels[v].replace(row.community_id).is_some() {
            return Err(Error::InvalidAssignment(format!("node {} assigned twice", row.node_id)));
        }
    }
    let labels: Vec<usize> = labels
        .into_iter()
        .enumerate()
        .map(|(v, l)| l.ok_or_else(|| Error::InvalidAssignment(format!("node {} unassigned", network.nodes()[v].id))))
        .collect::<Result<_>>()?;
    Partitioning::from_labels(network, &labels, resolution)
}

/// `community_edge_id,edge_id`, one row per constituent edge.
pub fn write_members(community: &CommunityNetwork, network: &RoadNetwork, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["community_edge_id", "edge_id"])?;
    for (ce, members) in community.network.edges().iter().zip(&community.members) {
        for &a in members {
            w.write_record([ce.id.as_str(), network.edges()[a].id.as_str()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_adjust_trace(trace: &[AdjustTraceRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["iter", "F", "grad_norm", "step"])?;
    for r in trace {
        w.write_record([
            r.iter.to_string(),
            r.objective.to_string(),
            r.grad_norm.to_string(),
            r.step.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ue_flows(solution: &EquilibriumSolution, network: &RoadNetwork, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["edge_id", "flow_vph", "time_h"])?;
    for ((e, x), t) in network.edges().iter().zip(&solution.flows).zip(&solution.times) {
        w.write_record([e.id.clone(), x.to_string(), t.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_fw_trace(trace: &[FwTraceRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["iter", "objective", "gap"])?;
    for r in trace {
        w.write_record([r.iter.to_string(), r.objective.to_string(), r.gap.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `edge_id,speed_kmh`; an empty speed marks an edge without observations.
pub fn write_speeds(speeds: &[Option<f64>], network: &RoadNetwork, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["edge_id", "speed_kmh"])?;
    for (e, v) in network.edges().iter().zip(speeds) {
        w.write_record([e.id.clone(), v.map(|x| x.to_string()).unwrap_or_default()])?;
    }
    w.flush()?;
    Ok(())
}

/// Edges missing from the file have no speed.
pub fn read_speeds(network: &RoadNetwork, path: &Path) -> Result<Vec<Option<f64>>> {
    #[derive(Deserialize)]
    struct Row {
        edge_id: String,
        speed_kmh: Option<f64>,
    }
    let mut out = vec![None; network.edge_count()];
    for row in read_rows::<Row>(path)? {
        let a = network
            .edge_index(&row.edge_id)
            .ok_or_else(|| Error::parse(path.display().to_string(), format!("unknown edge {}", row.edge_id)))?;
        out[a] = row.speed_kmh;
    }
    Ok(out)
}

/// Reads `edge_id,flow_vph` (extra columns ignored), e.g. `ue_flows.csv`.
pub fn read_edge_flows(network: &RoadNetwork, path: &Path) -> Result<Vec<f64>> {
    #[derive(Deserialize)]
    struct Row {
        edge_id: String,
        flow_vph: f64,
    }
    let mut out = vec![None; network.edge_count()];
    for row in read_rows::<Row>(path)? {
        let a = network
            .edge_index(&row.edge_id)
            .ok_or_else(|| Error::parse(path.display().to_string(), format!("unknown edge {}", row.edge_id)))?;
        out[a] = Some(row.flow_vph);
    }
    out.into_iter()
        .enumerate()
        .map(|(a, f)| f.ok_or_else(|| Error::parse(path.display().to_string(), format!("no flow for edge {}", network.edges()[a].id))))
        .collect()
}

/// Raw readings `sensor_id,edge_id,date,minute_of_day,flow_vpm,speed_kmh`;
/// empty cells are missing values.
pub fn read_readings(path: &Path) -> Result<Vec<Reading>> {
    #[derive(Deserialize)]
    struct Row {
        sensor_id: String,
        edge_id: String,
        date: String,
        minute_of_day: u32,
        flow_vpm: Option<f64>,
        speed_kmh: Option<f64>,
    }
    Ok(read_rows::<Row>(path)?
        .into_iter()
        .map(|r| Reading {
            sensor_id: r.sensor_id,
            edge_id: r.edge_id,
            date: r.date,
            minute_of_day: r.minute_of_day,
            flow_vpm: r.flow_vpm,
            speed_kmh: r.speed_kmh,
        })
        .collect())
}

pub fn write_readings(readings: &[Reading], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["sensor_id", "edge_id", "date", "minute_of_day", "flow_vpm", "speed_kmh"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in readings {
        w.write_record([
            r.sensor_id.clone(),
            r.edge_id.clone(),
            r.date.clone(),
            r.minute_of_day.to_string(),
            opt(r.flow_vpm),
            opt(r.speed_kmh),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a TNTP `_net.tntp` file. Nodes are numbered `1..=N` from the
/// metadata; free-flow times are taken to be minutes and converted to
/// hours, lengths are used as kilometres, `b` and `power` become the BPR
/// alpha and beta. Parallel links get a `#k` suffix on their id.
pub fn read_tntp(path: &Path) -> Result<RoadNetwork> {
    let ctx = || path.display().to_string();
    let file = BufReader::new(File::open(path)?);
    let mut node_count: Option<usize> = None;
    let mut in_body = false;
    let mut edges: Vec<SuperEdge> = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut max_node = 0usize;
    for line in file.lines() {
        let line = line?;
        let t = line.trim();
        if !in_body {
            if let Some(rest) = t.strip_prefix("<NUMBER OF NODES>") {
                node_count = Some(rest.trim().parse().map_err(|_| Error::parse(ctx(), "bad node count"))?);
            } else if t.starts_with("<END OF METADATA>") {
                in_body = true;
            }
            continue;
        }
        if t.is_empty() || t.starts_with('~') {
            continue;
        }
        let fields: Vec<&str> = t.trim_end_matches(';').split_whitespace().collect();
        if fields.len() < 7 {
            return Err(Error::parse(ctx(), format!("short link line: {t}")));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| Error::parse(ctx(), format!("bad number {:?} in {t}", fields[i])))
        };
        let tail: usize = fields[0].parse().map_err(|_| Error::parse(ctx(), format!("bad node in {t}")))?;
        let head: usize = fields[1].parse().map_err(|_| Error::parse(ctx(), format!("bad node in {t}")))?;
        max_node = max_node.max(tail).max(head);
        let base = format!("{tail}-{head}");
        let k = seen.entry(base.clone()).or_insert(0);
        *k += 1;
        let id = if *k == 1 { base } else { format!("{base}#{k}") };
        edges.push(SuperEdge {
            id,
            tail: tail.to_string(),
            head: head.to_string(),
            capacity_vph: num(2)?,
            length_km: num(3)?,
            free_flow_time_h: num(4)? / 60.0,
            alpha: num(5)?,
            beta: num(6)?,
        });
    }
    if !in_body {
        return Err(Error::parse(ctx(), "missing <END OF METADATA>"));
    }
    let n = node_count.unwrap_or(max_node).max(max_node);
    let nodes = (1..=n).map(|i| SuperNode::new(i.to_string())).collect();
    RoadNetwork::new(nodes, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tntp_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.tntp");
        std::fs::write(
            &p,
            "<NUMBER OF ZONES> 2\n<NUMBER OF NODES> 2\n<FIRST THRU NODE> 1\n<NUMBER OF LINKS> 2\n<END OF METADATA>\n\n\
             ~ \tinit_node\tterm_node\tcapacity\tlength\tfree_flow_time\tb\tpower\tspeed\ttoll\tlink_type\t;\n\
             \t1\t2\t25900.2\t6\t6\t0.15\t4\t0\t0\t1\t;\n\
             \t2\t1\t25900.2\t6\t6\t0.15\t4\t0\t0\t1\t;\n",
        )
        .unwrap();
        let net = read_tntp(&p).unwrap();
        assert_eq!(net.node_count(), 2);
        assert_eq!(net.edge_count(), 2);
        let e = &net.edges()[0];
        assert_eq!(e.id, "1-2");
        assert_eq!(e.capacity_vph, 25900.2);
        assert_eq!(e.free_flow_time_h, 0.1);
        assert!(net.validate().passed());
    }
}
