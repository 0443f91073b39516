//! Cleaning of per-minute detector readings into binned flow snapshots,
//! plus capacity and free-flow time estimates per edge.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;

use crate::error::{Error, Result};
use crate::network::{FlowSampleSet, FlowSnapshot, RoadNetwork, SuperEdge};

pub const MINUTES_PER_DAY: usize = 1440;
pub const ROLLING_WINDOW: usize = 10;
pub const DEFAULT_MIN_OBSERVATIONS: usize = 1000;

/// One raw row: a sensor's reading for one minute.
#[derive(Debug, Clone, PartialEq)]
pub struct Reading {
    pub sensor_id: String,
    pub edge_id: String,
    pub date: String,
    pub minute_of_day: u32,
    pub flow_vpm: Option<f64>,
    pub speed_kmh: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeBin {
    pub label: String,
    pub start_hour: u32,
    pub end_hour: u32,
}

impl TimeBin {
    pub fn new(label: &str, start_hour: u32, end_hour: u32) -> Self {
        TimeBin {
            label: label.to_string(),
            start_hour,
            end_hour,
        }
    }

    fn minutes(&self) -> std::ops::Range<usize> {
        (self.start_hour as usize * 60)..(self.end_hour as usize * 60)
    }
}

/// AM `[6,10)`, MD `[10,16)`, PM `[16,20)`.
pub fn standard_bins() -> Vec<TimeBin> {
    vec![TimeBin::new("AM", 6, 10), TimeBin::new("MD", 10, 16), TimeBin::new("PM", 16, 20)]
}

fn check_bins(bins: &[TimeBin]) -> Result<()> {
    for b in bins {
        if b.start_hour >= b.end_hour || b.end_hour > 24 {
            return Err(Error::InvalidInput(format!("time bin {} has an invalid range", b.label)));
        }
    }
    for (i, a) in bins.iter().enumerate() {
        for b in &bins[i + 1..] {
            if a.start_hour < b.end_hour && b.start_hour < a.end_hour {
                return Err(Error::InvalidInput(format!("time bins {} and {} overlap", a.label, b.label)));
            }
        }
    }
    Ok(())
}

/// Trailing mean over `window` minutes ending at each index, ignoring
/// missing values. An index with no value in its window stays missing.
pub fn rolling_mean(series: &[Option<f64>], window: usize) -> Result<Vec<Option<f64>>> {
    if series.is_empty() {
        return Err(Error::InvalidInput("rolling mean of an empty series".into()));
    }
    if window == 0 {
        return Err(Error::InvalidInput("rolling window must be positive".into()));
    }
    Ok((0..series.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let (sum, n) = series[lo..=i]
                .iter()
                .flatten()
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            (n > 0).then(|| sum / n as f64)
        })
        .collect())
}

/// `60 * max` of the smoothed per-minute flows when at least
/// `min_observations` of them exist, otherwise the fallback.
pub fn estimate_capacity(
    edge_id: &str,
    smoothed_flows: &[Option<f64>],
    fallback: Option<f64>,
    min_observations: usize,
) -> Result<f64> {
    let observed: Vec<f64> = smoothed_flows.iter().flatten().copied().collect();
    let max = observed.iter().copied().fold(0.0, f64::max);
    if observed.len() >= min_observations && max > 0.0 {
        return Ok(60.0 * max);
    }
    match fallback {
        Some(c) if c.is_finite() && c > 0.0 => Ok(c),
        _ => Err(Error::MissingCapacity(edge_id.to_string())),
    }
}

/// Nearest-rank percentile (`p` in (0, 100]) of the given values.
pub fn nearest_rank_percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

/// Length divided by the 95th percentile (nearest rank) of the smoothed speeds.
pub fn estimate_free_flow_time(edge_id: &str, smoothed_speeds: &[Option<f64>], length_km: f64) -> Result<f64> {
    let observed: Vec<f64> = smoothed_speeds.iter().flatten().copied().collect();
    if !observed.iter().any(|&s| s > 0.0) {
        return Err(Error::MissingSpeed(edge_id.to_string()));
    }
    let p95 = nearest_rank_percentile(&observed, 95.0).expect("non-empty");
    if p95 <= 0.0 {
        return Err(Error::MissingSpeed(edge_id.to_string()));
    }
    Ok(length_km / p95)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median of the readings after discarding those further than twice the
/// median absolute deviation from the median. With a zero MAD only
/// readings equal to the median survive.
pub fn fuse_sensors(readings: &[f64]) -> Option<f64> {
    if readings.is_empty() {
        return None;
    }
    let m = median(&mut readings.to_vec());
    let mut dev: Vec<f64> = readings.iter().map(|r| (r - m).abs()).collect();
    let mad = median(&mut dev);
    let mut kept: Vec<f64> = readings
        .iter()
        .copied()
        .filter(|r| if mad > 0.0 { (r - m).abs() <= 2.0 * mad } else { *r == m })
        .collect();
    if kept.is_empty() {
        return Some(m);
    }
    Some(median(&mut kept))
}

/// Fused per-minute values of one edge on one day.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDaySeries {
    pub edge: usize,
    pub date: String,
    /// `MINUTES_PER_DAY` entries, `None` where nothing was observed.
    pub minutes: Vec<Option<f64>>,
}

fn bin_mean(minutes: &[Option<f64>], bin: &TimeBin) -> Option<f64> {
    let range = bin.minutes();
    let slice = &minutes[range.start.min(minutes.len())..range.end.min(minutes.len())];
    let (sum, n) = slice.iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// One snapshot per day (sorted by date) holding `60 * mean` per-minute
/// flow in the bin for every edge. Days where some edge has no
/// observation in the bin are dropped with a warning.
pub fn bin_flows(
    network: &RoadNetwork,
    series: &[EdgeDaySeries],
    bin: &TimeBin,
    days: &[String],
) -> Result<FlowSampleSet> {
    check_bins(std::slice::from_ref(bin))?;
    let m = network.edge_count();
    let wanted: BTreeSet<&str> = days.iter().map(String::as_str).collect();
    let mut by_day: BTreeMap<&str, Vec<Option<f64>>> = wanted.iter().map(|&d| (d, vec![None; m])).collect();
    for s in series {
        if s.edge >= m {
            return Err(Error::InvalidInput(format!("series for unknown edge index {}", s.edge)));
        }
        if let Some(row) = by_day.get_mut(s.date.as_str()) {
            row[s.edge] = bin_mean(&s.minutes, bin).map(|v| 60.0 * v);
        }
    }
    let mut snapshots = Vec::with_capacity(by_day.len());
    for (day, row) in by_day {
        let missing: Vec<&str> = row
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(a, _)| network.edges()[a].id.as_str())
            .collect();
        if !missing.is_empty() {
            warn!(
                "dropping {} snapshot for {day}: no data on {} edge(s), e.g. {}",
                bin.label,
                missing.len(),
                missing[0]
            );
            continue;
        }
        snapshots.push(FlowSnapshot {
            label: day.to_string(),
            flows: row.into_iter().map(|v| v.expect("checked")).collect(),
        });
    }
    FlowSampleSet::new(m, snapshots)
}

#[derive(Debug, Clone)]
pub struct IngestConfig {
    pub bins: Vec<TimeBin>,
    /// Days to keep; all days in the readings when `None`.
    pub days: Option<Vec<String>>,
    pub min_observations: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            bins: standard_bins(),
            days: None,
            min_observations: DEFAULT_MIN_OBSERVATIONS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IngestOutput {
    /// Input network with estimated capacities and free-flow times.
    pub network: RoadNetwork,
    /// Snapshots per bin label.
    pub flows: BTreeMap<String, FlowSampleSet>,
    /// Mean observed speed per bin label and edge over the kept days.
    pub speeds: BTreeMap<String, Vec<Option<f64>>>,
}

struct Fused {
    flows: Vec<EdgeDaySeries>,
    speeds: Vec<EdgeDaySeries>,
}

fn fuse_readings(network: &RoadNetwork, readings: &[Reading], days: Option<&BTreeSet<String>>) -> Result<Fused> {
    type Cell = (Vec<f64>, Vec<f64>);
    let mut grouped: BTreeMap<(usize, &str), BTreeMap<u32, Cell>> = BTreeMap::new();
    for r in readings {
        if days.is_some_and(|d| !d.contains(&r.date)) {
            continue;
        }
        let a = network
            .edge_index(&r.edge_id)
            .ok_or_else(|| Error::InvalidInput(format!("reading for unknown edge {}", r.edge_id)))?;
        if r.minute_of_day as usize >= MINUTES_PER_DAY {
            return Err(Error::InvalidInput(format!("minute {} out of range", r.minute_of_day)));
        }
        let cell = grouped
            .entry((a, r.date.as_str()))
            .or_default()
            .entry(r.minute_of_day)
            .or_default();
        if let Some(f) = r.flow_vpm {
            if !(f.is_finite() && f >= 0.0) {
                return Err(Error::InvalidInput(format!("invalid flow {f} from sensor {}", r.sensor_id)));
            }
            cell.0.push(f);
        }
        if let Some(s) = r.speed_kmh {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::InvalidInput(format!("invalid speed {s} from sensor {}", r.sensor_id)));
            }
            cell.1.push(s);
        }
    }
    let mut flows = Vec::with_capacity(grouped.len());
    let mut speeds = Vec::with_capacity(grouped.len());
    for ((edge, date), minutes) in grouped {
        let mut f = vec![None; MINUTES_PER_DAY];
        let mut s = vec![None; MINUTES_PER_DAY];
        for (minute, (fv, sv)) in minutes {
            f[minute as usize] = fuse_sensors(&fv);
            s[minute as usize] = fuse_sensors(&sv);
        }
        flows.push(EdgeDaySeries {
            edge,
            date: date.to_string(),
            minutes: f,
        });
        speeds.push(EdgeDaySeries {
            edge,
            date: date.to_string(),
            minutes: s,
        });
    }
    Ok(Fused { flows, speeds })
}

/// Full cleaning pipeline: per-minute sensor fusion, capacity and
/// free-flow time estimation from the smoothed series, and binning.
/// Existing edge capacities serve as the capacity fallback.
pub fn ingest(network: &RoadNetwork, readings: &[Reading], config: &IngestConfig) -> Result<IngestOutput> {
    check_bins(&config.bins)?;
    let day_filter: Option<BTreeSet<String>> = config.days.as_ref().map(|d| d.iter().cloned().collect());
    let fused = fuse_readings(network, readings, day_filter.as_ref())?;

    let m = network.edge_count();
    let mut smoothed_flows: Vec<Vec<Option<f64>>> = vec![Vec::new(); m];
    let mut smoothed_speeds: Vec<Vec<Option<f64>>> = vec![Vec::new(); m];
    for s in &fused.flows {
        smoothed_flows[s.edge].extend(rolling_mean(&s.minutes, ROLLING_WINDOW)?);
    }
    for s in &fused.speeds {
        smoothed_speeds[s.edge].extend(rolling_mean(&s.minutes, ROLLING_WINDOW)?);
    }
    let mut updated: Vec<SuperEdge> = Vec::with_capacity(m);
    for (a, e) in network.edges().iter().enumerate() {
        let capacity = estimate_capacity(&e.id, &smoothed_flows[a], Some(e.capacity_vph), config.min_observations)?;
        let t0 = estimate_free_flow_time(&e.id, &smoothed_speeds[a], e.length_km)?;
        updated.push(SuperEdge {
            capacity_vph: capacity,
            free_flow_time_h: t0,
            ..e.clone()
        });
    }
    let network = RoadNetwork::new(network.nodes().to_vec(), updated)?;

    let days: Vec<String> = match &config.days {
        Some(d) => d.clone(),
        None => fused
            .flows
            .iter()
            .map(|s| s.date.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let mut flows = BTreeMap::new();
    let mut speeds = BTreeMap::new();
    for bin in &config.bins {
        let set = bin_flows(&network, &fused.flows, bin, &days)?;
        let kept: BTreeSet<&str> = set.snapshots().iter().map(|s| s.label.as_str()).collect();
        let mut sum = vec![0.0; m];
        let mut count = vec![0usize; m];
        for s in &fused.speeds {
            if kept.contains(s.date.as_str()) {
                if let Some(v) = bin_mean(&s.minutes, bin) {
                    sum[s.edge] += v;
                    count[s.edge] += 1;
                }
            }
        }
        let mean = sum
            .iter()
            .zip(&count)
            .map(|(s, &n)| (n > 0).then(|| s / n as f64))
            .collect();
        speeds.insert(bin.label.clone(), mean);
        flows.insert(bin.label.clone(), set);
    }
    Ok(IngestOutput { network, flows, speeds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::SuperNode;

    fn some(v: &[f64]) -> Vec<Option<f64>> {
        v.iter().map(|&x| Some(x)).collect()
    }

    #[test]
    fn rolling_mean_cases() {
        let r = rolling_mean(&some(&[5.0; 12]), 10).unwrap();
        assert!(r.iter().all(|v| *v == Some(5.0)));
        let ramp: Vec<f64> = (0..20).map(f64::from).collect();
        assert_eq!(rolling_mean(&some(&ramp), 10).unwrap()[19], Some(14.5));
        assert_eq!(rolling_mean(&some(&[7.0]), 10).unwrap(), vec![Some(7.0)]);
        assert!(rolling_mean(&[], 10).is_err());
        let gaps = rolling_mean(&[Some(2.0), None, Some(4.0)], 10).unwrap();
        assert_eq!(gaps, vec![Some(2.0), Some(2.0), Some(3.0)]);
    }

    #[test]
    fn capacity_rule_and_fallback() {
        let mut s = some(&[10.0; 1000]);
        s[500] = Some(30.0);
        assert_eq!(estimate_capacity("e", &s, None, 1000).unwrap(), 1800.0);
        assert_eq!(estimate_capacity("e", &some(&[30.0; 10]), Some(4000.0), 1000).unwrap(), 4000.0);
        assert!(matches!(estimate_capacity("e", &[], None, 1000), Err(Error::MissingCapacity(_))));
    }

    #[test]
    fn free_flow_time_cases() {
        assert_eq!(estimate_free_flow_time("e", &some(&[100.0; 100]), 50.0).unwrap(), 0.5);
        let speeds: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(estimate_free_flow_time("e", &some(&speeds), 95.0).unwrap(), 1.0);
        assert!(matches!(estimate_free_flow_time("e", &[], 1.0), Err(Error::MissingSpeed(_))));
        assert!(matches!(estimate_free_flow_time("e", &some(&[0.0, 0.0]), 1.0), Err(Error::MissingSpeed(_))));
    }

    #[test]
    fn fusion_cases() {
        assert_eq!(fuse_sensors(&[10.0, 10.0, 10.0, 100.0]), Some(10.0));
        assert_eq!(fuse_sensors(&[42.0]), Some(42.0));
        assert_eq!(fuse_sensors(&[8.0, 10.0, 12.0]), Some(10.0));
        assert_eq!(fuse_sensors(&[]), None);
        // 50 is more than 2 * MAD = 4 from the median 11
        assert_eq!(fuse_sensors(&[9.0, 11.0, 13.0, 50.0, 10.0]), Some(10.5));
    }

    fn two_edge_net() -> RoadNetwork {
        RoadNetwork::new(
            vec![SuperNode::new("a"), SuperNode::new("b")],
            vec![
                SuperEdge::new("ab", "a", "b", 1.0, 100.0, 1.0),
                SuperEdge::new("ba", "b", "a", 1.0, 100.0, 1.0),
            ],
        )
        .unwrap()
    }

    fn day(edge: usize, date: &str, f: impl Fn(usize) -> Option<f64>) -> EdgeDaySeries {
        EdgeDaySeries {
            edge,
            date: date.into(),
            minutes: (0..MINUTES_PER_DAY).map(f).collect(),
        }
    }

    #[test]
    fn binning_means_and_outages() {
        let net = two_edge_net();
        let am = TimeBin::new("AM", 6, 10);
        let series = vec![
            day(0, "d1", |_| Some(20.0)),
            day(1, "d1", |m| Some(if m < 480 { 10.0 } else { 30.0 })),
            day(0, "d2", |_| Some(5.0)),
            day(1, "d2", |m| if (360..600).contains(&m) { None } else { Some(1.0) }),
        ];
        let days = vec!["d2".to_string(), "d1".to_string()];
        let set = bin_flows(&net, &series, &am, &days).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.snapshots()[0].label, "d1");
        assert_eq!(set.snapshots()[0].flows, vec![1200.0, 1200.0]);
    }

    #[test]
    fn overlapping_bins_rejected() {
        let bins = vec![TimeBin::new("x", 6, 10), TimeBin::new("y", 9, 12)];
        assert!(check_bins(&bins).is_err());
    }
}
