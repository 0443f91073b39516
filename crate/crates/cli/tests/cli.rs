use std::path::Path;
use std::process::Command;

fn odpart(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_odpart")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = odpart(args);
    assert!(
        out.status.success(),
        "odpart {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_to_validate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let net = d.join("net");
    ok(&["synth", "--blocks", "1", "--seed", "3", "--out", s(&net)]);
    for f in ["nodes.csv", "edges.csv", "od_truth.csv", "flows_sim.csv", "flows_sim_val.csv", "config.toml"] {
        assert!(net.join(f).exists(), "{f} missing");
    }

    let part = d.join("part");
    ok(&["partition", "--network", s(&net), "--seed", "3", "--out", s(&part)]);
    let listing: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(part.join("partitions.json")).unwrap()).unwrap();
    let counts: Vec<u64> = listing
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["community_count"].as_u64().unwrap())
        .collect();
    assert!(counts.windows(2).all(|w| w[0] > w[1]));
    assert!(counts.contains(&3));
    assert!(part.join("partition_3.csv").exists());

    let est = d.join("est");
    ok(&[
        "estimate",
        "--network",
        s(&net),
        "--flows",
        s(&net.join("flows_sim.csv")),
        "--strategy",
        "combined",
        "--partition",
        s(&part.join("partition_3.csv")),
        "--out",
        s(&est),
    ]);
    assert!(est.join("od.csv").exists());
    assert!(est.join("community/members.csv").exists());

    let adj = d.join("adj");
    ok(&[
        "adjust",
        "--network",
        s(&net),
        "--prior",
        s(&est.join("od.csv")),
        "--flows",
        s(&net.join("flows_sim.csv")),
        "--cost",
        "length",
        "--out",
        s(&adj),
    ]);
    let trace = std::fs::read_to_string(adj.join("adjust_trace.csv")).unwrap();
    assert!(trace.starts_with("iter,F,grad_norm,step"));

    let asg = d.join("asg");
    ok(&[
        "assign",
        "--network",
        s(&net),
        "--od",
        s(&adj.join("od_adjusted.csv")),
        "--cost",
        "length",
        "--out",
        s(&asg),
    ]);
    let val = d.join("val");
    ok(&[
        "validate",
        "--network",
        s(&net),
        "--predicted",
        s(&asg.join("ue_flows.csv")),
        "--flows",
        s(&net.join("flows_sim_val.csv")),
        "--out",
        s(&val),
    ]);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(val.join("validate.json")).unwrap()).unwrap();
    let median = summary["flow"]["median"].as_f64().unwrap();
    assert!((0.0..0.5).contains(&median), "median flow RAE {median}");
}

#[test]
fn sweep_writes_report_and_charts() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("net");
    ok(&["synth", "--blocks", "1", "--seed", "5", "--out", s(&net)]);
    let out = dir.path().join("sweep");
    ok(&[
        "sweep",
        "--config",
        s(&net.join("config.toml")),
        "--strategy",
        "external",
        "--out",
        s(&out),
    ]);
    for f in ["report.json", "summary.csv", "rae_flow.csv", "rae_time.csv", "flow_rae.svg"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let entries = report["entries"].as_array().unwrap();
    assert!(!entries.is_empty());
    for e in entries {
        assert!(e["wall_seconds"].as_f64().unwrap() >= 0.0);
    }
    let svg = std::fs::read_to_string(out.join("flow_rae.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth", "--blocks", "2", "--seed", "8", "--out", s(&a)]);
    ok(&["synth", "--blocks", "2", "--seed", "8", "--out", s(&b)]);
    for f in ["nodes.csv", "edges.csv", "od_truth.csv", "flows_sim.csv", "flows_sim_val.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn configuration_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "strategy = \"sideways\"\n").unwrap();
    let out = odpart(&["sweep", "--config", s(&bad), "--out", s(dir.path())]);
    assert!(!out.status.success());

    let out = odpart(&["assign", "--network", s(&dir.path().join("missing")), "--od", "x.csv"]);
    assert!(!out.status.success());
}
