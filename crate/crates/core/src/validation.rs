//! Relative absolute error of predicted edge flows and travel times, and
//! robust summaries of the per-edge errors.

use log::warn;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{bpr_travel_time, RoadNetwork};

/// `|pred - obs| / obs` per edge; `None` where the observation is zero
/// (excluded with a warning).
pub fn rae_flow(predicted: &[f64], observed: &[f64]) -> Result<Vec<Option<f64>>> {
    if predicted.len() != observed.len() {
        return Err(Error::InvalidInput(format!(
            "{} predicted flows vs {} observed",
            predicted.len(),
            observed.len()
        )));
    }
    let out: Vec<Option<f64>> = predicted
        .iter()
        .zip(observed)
        .map(|(&p, &o)| (o > 0.0).then(|| (p - o).abs() / o))
        .collect();
    finish(out, "flow")
}

/// RAE of BPR travel times at the predicted flows against
/// `length / observed speed`. Edges without a positive observed speed are
/// excluded with a warning.
pub fn rae_time(predicted_flows: &[f64], network: &RoadNetwork, observed_speeds: &[Option<f64>]) -> Result<Vec<Option<f64>>> {
    let m = network.edge_count();
    if predicted_flows.len() != m || observed_speeds.len() != m {
        return Err(Error::InvalidInput("flows and speeds must cover every edge".into()));
    }
    let mut out = Vec::with_capacity(m);
    for (a, e) in network.edges().iter().enumerate() {
        match observed_speeds[a] {
            Some(v) if v > 0.0 => {
                let observed = e.length_km / v;
                let predicted = bpr_travel_time(e, predicted_flows[a])?;
                out.push(Some((predicted - observed).abs() / observed));
            }
            _ => out.push(None),
        }
    }
    finish(out, "travel time")
}

fn finish(out: Vec<Option<f64>>, what: &str) -> Result<Vec<Option<f64>>> {
    let excluded = out.iter().filter(|v| v.is_none()).count();
    if excluded == out.len() {
        return Err(Error::EmptyReport(format!("no edge has a usable observed {what}")));
    }
    if excluded > 0 {
        warn!("{excluded} edge(s) without a usable observed {what} excluded from RAE");
    }
    Ok(out)
}

/// Order statistics of a set of errors. Quartiles interpolate linearly
/// between order statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[Option<f64>]) -> Option<Summary> {
    let mut v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    Some(Summary {
        count: v.len(),
        min: v[0],
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max: v[v.len() - 1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{SuperEdge, SuperNode};

    #[test]
    fn flow_rae_cases() {
        assert_eq!(rae_flow(&[5.0, 7.0], &[5.0, 7.0]).unwrap(), vec![Some(0.0), Some(0.0)]);
        let r = rae_flow(&[110.0, 3.0], &[100.0, 0.0]).unwrap();
        assert!((r[0].unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(r[1], None);
        assert!(matches!(rae_flow(&[1.0], &[0.0]), Err(Error::EmptyReport(_))));
    }

    #[test]
    fn time_rae_cases() {
        let net = RoadNetwork::new(
            vec![SuperNode::new("a"), SuperNode::new("b")],
            vec![
                SuperEdge::new("ab", "a", "b", 100.0, 1000.0, 1.0),
                SuperEdge::new("ba", "b", "a", 100.0, 1000.0, 1.0),
            ],
        )
        .unwrap();
        // free flow at 100 km/h, and 1.15 h predicted at capacity vs 1 h observed
        let r = rae_time(&[0.0, 1000.0], &net, &[Some(100.0), Some(100.0)]).unwrap();
        assert_eq!(r[0], Some(0.0));
        assert!((r[1].unwrap() - 0.15).abs() < 1e-12);
        let r = rae_time(&[0.0, 0.0], &net, &[None, Some(0.0)]);
        assert!(matches!(r, Err(Error::EmptyReport(_))));
    }

    #[test]
    fn summary_statistics() {
        let s = summarize(&[Some(4.0), None, Some(1.0), Some(3.0), Some(2.0)]).unwrap();
        assert_eq!(s.count, 4);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.q1, 1.75);
        assert_eq!(s.q3, 3.25);
        assert_eq!((s.min, s.max), (1.0, 4.0));
        assert!(summarize(&[None]).is_none());
    }
}
