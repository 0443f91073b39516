//! Report files for a sweep: summary and per-edge CSVs, and SVG charts of
//! the median and interquartile range against partition size.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;

use odpart::experiment::{SizeEntry, ValidationReport};
use odpart::validation::Summary;

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_summary_csv(report: &ValidationReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "bin",
        "community_count",
        "percent",
        "resolution",
        "flow_median",
        "flow_q1",
        "flow_q3",
        "time_median",
        "time_q1",
        "time_q3",
        "wall_seconds",
        "peak_heap_bytes",
        "peak_rss_bytes",
        "converged",
        "diagnostic",
        "error",
    ])?;
    for e in &report.entries {
        let f = e.flow_summary;
        let t = e.time_summary;
        w.write_record([
            e.bin.clone(),
            e.community_count.to_string(),
            e.percent.to_string(),
            opt(e.resolution),
            opt(f.map(|s| s.median)),
            opt(f.map(|s| s.q1)),
            opt(f.map(|s| s.q3)),
            opt(t.map(|s| s.median)),
            opt(t.map(|s| s.q1)),
            opt(t.map(|s| s.q3)),
            e.wall_seconds.to_string(),
            opt(e.peak_heap_bytes),
            opt(e.peak_rss_bytes),
            e.converged.to_string(),
            e.diagnostic.clone().unwrap_or_default(),
            e.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long format `bin,community_count,edge_id,rae`; excluded edges are skipped.
pub fn write_rae_csv(
    report: &ValidationReport,
    edge_ids: impl Fn(&SizeEntry, usize) -> String,
    pick: impl Fn(&SizeEntry) -> Option<&Vec<Option<f64>>>,
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin", "community_count", "edge_id", "rae"])?;
    for e in &report.entries {
        if let Some(values) = pick(e) {
            for (a, v) in values.iter().enumerate() {
                if let Some(v) = v {
                    w.write_record([e.bin.clone(), e.community_count.to_string(), edge_ids(e, a), v.to_string()])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Median (solid) and quartiles (dashed) per bin against `100 / C`.
/// Returns `None` when no entry has a summary for this metric.
pub fn line_chart(report: &ValidationReport, title: &str, pick: impl Fn(&SizeEntry) -> Option<Summary>) -> Option<String> {
    let mut bins: Vec<&str> = Vec::new();
    for e in &report.entries {
        if !bins.contains(&e.bin.as_str()) {
            bins.push(&e.bin);
        }
    }
    let points: Vec<(f64, Summary, &str)> = report
        .entries
        .iter()
        .filter_map(|e| pick(e).map(|s| (e.percent, s, e.bin.as_str())))
        .collect();
    if points.is_empty() {
        return None;
    }
    let x_max = points.iter().map(|p| p.0).fold(0.0, f64::max).max(1.0);
    let y_max = points.iter().map(|p| p.1.q3).fold(0.0, f64::max).max(1e-9) * 1.1;
    let sx = |x: f64| MARGIN + x / x_max * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - y / y_max * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, WIDTH / 2.0);
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" stroke="black" fill="none"/>"#);
    for i in 0..=4 {
        let fx = x_max * i as f64 / 4.0;
        let fy = y_max * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{fx:.0}</text>"#,
            sx(fx),
            y0 + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{fy:.3}</text>"#,
            x0 - 4.0,
            sy(fy) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">supernodes per partition (%)</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">RAE</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (i, bin) in bins.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let mut pts: Vec<&(f64, Summary, &str)> = points.iter().filter(|p| p.2 == *bin).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pts.is_empty() {
            continue;
        }
        let line = |f: &dyn Fn(&Summary) -> f64| {
            pts.iter()
                .map(|p| format!("{:.1},{:.1}", sx(p.0), sy(f(&p.1))))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{colour}" fill="none" stroke-width="2"/>"#, line(&|m| m.median));
        for q in [line(&|m| m.q1), line(&|m| m.q3)] {
            let _ = writeln!(
                s,
                r#"<polyline points="{q}" stroke="{colour}" fill="none" stroke-dasharray="5,4"/>"#
            );
        }
        for p in &pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{colour}"/>"#,
                sx(p.0),
                sy(p.1.median)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{colour}">{bin}</text>"#,
            x1 - 60.0,
            y1 + 14.0 * (i as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}
