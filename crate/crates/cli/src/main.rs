mod config;
mod report;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use odpart::adjustment::{adjust, AdjustmentConfig};
use odpart::assignment::{frank_wolfe, AssignmentConfig};
use odpart::estimation::{
    combined_prior, degenerate_prior, external_prior, gls_estimate, internal_prior, GlsConfig, GlsEstimate,
};
use odpart::experiment::{run_experiment, BinData, ResolutionChoice, Strategy};
use odpart::ingest::{ingest, IngestConfig, TimeBin};
use odpart::io;
use odpart::network::{FlowSampleSet, RoadNetwork};
use odpart::partition::{build_community_network, louvain, resolution_sweep, sweep_seed, Partitioning};
use odpart::routing::{route_all_pairs, DEFAULT_K};
use odpart::synth::{SynthConfig, SynthScenario};
use odpart::validation::{rae_flow, rae_time, summarize};

use config::{parse_cost, BinFiles, FileConfig};

#[global_allocator]
static ALLOC: odpart::memory::PeakAlloc = odpart::memory::PeakAlloc;

/// O-D demand estimation from link counts on modularity-partitioned road
/// networks.
#[derive(Parser)]
#[command(name = "odpart", version)]
struct Cli {
    /// Master seed for synthetic data and Louvain runs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML or JSON key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean raw detector readings into binned flows, speeds and edge parameters.
    Ingest(IngestArgs),
    /// Generate a synthetic block network with truth demand and Poisson flows.
    Synth(SynthArgs),
    /// Louvain partitioning at one resolution, or the full resolution sweep.
    Partition(PartitionArgs),
    /// Prior demand estimate with one strategy.
    Estimate(EstimateArgs),
    /// Adjust a prior to observed flows through user equilibrium.
    Adjust(AdjustArgs),
    /// User-equilibrium assignment of a demand matrix.
    Assign(AssignArgs),
    /// RAE of predicted flows (and travel times) against held-out days.
    Validate(ValidateArgs),
    /// Full experiment over partition sizes and time bins.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct NetworkArg {
    /// Directory holding nodes.csv and edges.csv.
    #[arg(long)]
    network: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    net: NetworkArg,
    /// readings.csv with sensor_id,edge_id,date,minute_of_day,flow_vpm,speed_kmh.
    #[arg(long)]
    readings: PathBuf,
    /// Time bins as LABEL:START-END hours, e.g. AM:6-10. Defaults to AM, MD, PM.
    #[arg(long, value_delimiter = ',')]
    bins: Vec<String>,
    /// First date (inclusive, compared as text) reserved for validation.
    #[arg(long)]
    validation_from: Option<String>,
    #[arg(long, default_value_t = odpart::ingest::DEFAULT_MIN_OBSERVATIONS)]
    min_observations: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    /// Draw real-valued rather than integer demands.
    #[arg(long)]
    real_demand: bool,
    /// Routes per pair written into the generated run configuration.
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
}

#[derive(Args)]
struct PartitionArgs {
    #[command(flatten)]
    net: NetworkArg,
    /// Fixed resolution; omit for the sweep.
    #[arg(long)]
    resolution: Option<f64>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    net: NetworkArg,
    /// Fitting flows in long format.
    #[arg(long)]
    flows: PathBuf,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    resolution: Option<f64>,
    /// Use this partition file instead of running Louvain.
    #[arg(long, conflicts_with = "resolution")]
    partition: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct AdjustArgs {
    #[command(flatten)]
    net: NetworkArg,
    #[arg(long)]
    prior: PathBuf,
    /// Observed flows; their per-edge mean is the adjustment target.
    #[arg(long)]
    flows: PathBuf,
    #[arg(long)]
    cost: Option<String>,
}

#[derive(Args)]
struct AssignArgs {
    #[command(flatten)]
    net: NetworkArg,
    #[arg(long)]
    od: PathBuf,
    #[arg(long)]
    cost: Option<String>,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    net: NetworkArg,
    /// ue_flows.csv from `assign` or `adjust`.
    #[arg(long)]
    predicted: PathBuf,
    /// Validation flows in long format.
    #[arg(long)]
    flows: PathBuf,
    #[arg(long)]
    speeds: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    net: NetworkArg,
    /// degenerate, internal, external, combined or unpartitioned.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Fixed resolution; omit for the sweep.
    #[arg(long)]
    resolution: Option<f64>,
    /// Routes per pair.
    #[arg(long)]
    k: Option<usize>,
    /// Link cost in assignment: bpr or length.
    #[arg(long)]
    cost: Option<String>,
    /// Single-bin shorthand: fitting flows.
    #[arg(long, requires = "val")]
    fit: Option<PathBuf>,
    /// Single-bin shorthand: validation flows.
    #[arg(long, requires = "fit")]
    val: Option<PathBuf>,
    /// Observed validation speeds per edge.
    #[arg(long, requires = "fit")]
    speeds: Option<PathBuf>,
    /// Label of the single bin.
    #[arg(long, default_value = "all")]
    bin: String,
}

struct Ctx {
    seed: Option<u64>,
    file: FileConfig,
    out: PathBuf,
}

impl Ctx {
    fn network(&self, arg: &NetworkArg) -> Result<RoadNetwork> {
        let dir = arg
            .network
            .clone()
            .or_else(|| self.file.network.clone())
            .context("no network given (use --network or `network` in the config)")?;
        io::read_network_dir(&dir).with_context(|| format!("loading network from {}", dir.display()))
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json(&self, name: &str, value: &serde_json::Value) -> Result<()> {
        fs::write(self.out(name), serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    fn assignment(&self, cost: Option<&str>) -> Result<AssignmentConfig> {
        let mut a = self.file.experiment(self.seed)?.adjustment.assignment;
        if let Some(c) = cost {
            a.cost = parse_cost(c)?;
        }
        Ok(a)
    }
}

fn parse_bin(s: &str) -> Result<TimeBin> {
    let (label, range) = s.split_once(':').context("bin must look like LABEL:START-END")?;
    let (a, b) = range.split_once('-').context("bin must look like LABEL:START-END")?;
    Ok(TimeBin::new(label, a.trim().parse()?, b.trim().parse()?))
}

fn split_days(set: &FlowSampleSet, validation: &BTreeSet<String>) -> Result<(FlowSampleSet, FlowSampleSet)> {
    let (val, fit): (Vec<_>, Vec<_>) = set
        .snapshots()
        .iter()
        .cloned()
        .partition(|s| validation.contains(&s.label));
    Ok((
        FlowSampleSet::new(set.edge_count(), fit)?,
        FlowSampleSet::new(set.edge_count(), val)?,
    ))
}

fn cmd_ingest(ctx: &Ctx, args: &IngestArgs) -> Result<()> {
    let network = ctx.network(&args.net)?;
    let readings = io::read_readings(&args.readings)?;
    let mut cfg = IngestConfig {
        min_observations: args.min_observations,
        ..Default::default()
    };
    if !args.bins.is_empty() {
        cfg.bins = args.bins.iter().map(|b| parse_bin(b)).collect::<Result<_>>()?;
    }
    let all = ingest(&network, &readings, &cfg)?;
    io::write_network_dir(&all.network, &ctx.out)?;
    let dates: BTreeSet<String> = readings.iter().map(|r| r.date.clone()).collect();
    let validation: BTreeSet<String> = match &args.validation_from {
        Some(from) => dates.iter().filter(|d| d.as_str() >= from.as_str()).cloned().collect(),
        None => BTreeSet::new(),
    };
    // speeds for scoring come from the validation days only
    let val_speeds = if validation.is_empty() {
        None
    } else {
        let c = IngestConfig {
            days: Some(validation.iter().cloned().collect()),
            ..cfg.clone()
        };
        Some(ingest(&network, &readings, &c)?.speeds)
    };
    let mut file = FileConfig {
        network: Some(PathBuf::from(".")),
        seed: ctx.seed,
        ..Default::default()
    };
    for (label, set) in &all.flows {
        let (fit, val) = split_days(set, &validation)?;
        let fit_name = format!("flows_{label}.csv");
        io::write_flows(&fit, &all.network, &ctx.out(&fit_name))?;
        let speeds = val_speeds.as_ref().and_then(|m| m.get(label)).unwrap_or(&all.speeds[label]);
        let speed_name = format!("speeds_{label}.csv");
        io::write_speeds(speeds, &all.network, &ctx.out(&speed_name))?;
        if !val.is_empty() {
            let val_name = format!("flows_{label}_val.csv");
            io::write_flows(&val, &all.network, &ctx.out(&val_name))?;
            file.bins.push(BinFiles {
                label: label.clone(),
                fit: fit_name.into(),
                val: val_name.into(),
                speeds: Some(speed_name.into()),
            });
        }
        info!("bin {label}: {} fitting and {} validation days", fit.len(), val.len());
    }
    fs::write(ctx.out("config.toml"), file.to_toml()?)?;
    Ok(())
}

fn cmd_synth(ctx: &Ctx, args: &SynthArgs) -> Result<()> {
    let seed = ctx.seed.or(ctx.file.seed).unwrap_or(0);
    let mut cfg = SynthConfig::with_blocks(args.blocks, seed);
    cfg.integer_demand = !args.real_demand;
    let s = SynthScenario::generate(&cfg)?;
    io::write_network_dir(&s.network, &ctx.out)?;
    io::write_od(&s.truth, &s.network, &ctx.out("od_truth.csv"))?;
    io::write_flows(&s.fitting, &s.network, &ctx.out("flows_sim.csv"))?;
    io::write_flows(&s.validation, &s.network, &ctx.out("flows_sim_val.csv"))?;
    let file = FileConfig {
        network: Some(PathBuf::from(".")),
        seed: Some(seed),
        cost: Some("length".into()),
        k: Some(args.k),
        bins: vec![BinFiles {
            label: "sim".into(),
            fit: "flows_sim.csv".into(),
            val: "flows_sim_val.csv".into(),
            speeds: None,
        }],
        ..Default::default()
    };
    fs::write(ctx.out("config.toml"), file.to_toml()?)?;
    ctx.write_json(
        "synth.json",
        &json!({
            "blocks": args.blocks,
            "seed": seed,
            "nodes": s.network.node_count(),
            "edges": s.network.edge_count(),
            "fitting_days": s.fitting.len(),
            "validation_days": s.validation.len(),
            "truth_total": s.truth.total(),
        }),
    )
}

fn partitions(network: &RoadNetwork, resolution: Option<f64>, seed: u64) -> Result<Vec<Partitioning>> {
    Ok(match resolution {
        Some(r) => vec![louvain(network, r, sweep_seed(seed, r))?],
        None => resolution_sweep(network, seed)?,
    })
}

fn cmd_partition(ctx: &Ctx, args: &PartitionArgs) -> Result<()> {
    let network = ctx.network(&args.net)?;
    let seed = ctx.seed.or(ctx.file.seed).unwrap_or(0);
    let list = partitions(&network, args.resolution.or(ctx.file.resolution), seed)?;
    let mut rows = Vec::new();
    for p in &list {
        let name = format!("partition_{}.csv", p.community_count);
        io::write_partition(p, &network, &ctx.out(&name))?;
        rows.push(json!({
            "resolution": p.resolution,
            "community_count": p.community_count,
            "modularity": p.modularity,
            "file": name,
        }));
    }
    if list.iter().all(|p| p.community_count != 2) && args.resolution.is_none() {
        warn!("sweep did not reach two communities");
    }
    ctx.write_json("partitions.json", &json!(rows))
}

fn gls_summary(est: &GlsEstimate) -> serde_json::Value {
    json!({
        "objective": est.objective,
        "iterations": est.iterations,
        "converged": est.converged,
        "ridge": est.ridge,
        "trace": est.trace,
    })
}

fn cmd_estimate(ctx: &Ctx, args: &EstimateArgs) -> Result<()> {
    let network = ctx.network(&args.net)?;
    let samples = io::read_flows(&network, &args.flows)?;
    let exp = ctx.file.experiment(ctx.seed)?;
    let strategy = args.strategy.unwrap_or(exp.strategy);
    let k = args.k.unwrap_or(exp.k);
    let gls: GlsConfig = exp.gls;
    let partitioning = || -> Result<Partitioning> {
        if let Some(p) = &args.partition {
            return Ok(io::read_partition(&network, p, args.resolution.unwrap_or(1.0))?);
        }
        let r = match (args.resolution, exp.resolution) {
            (Some(r), _) | (None, ResolutionChoice::Fixed(r)) => r,
            (None, ResolutionChoice::Sweep) => bail!("{strategy} needs --resolution or --partition"),
        };
        Ok(louvain(&network, r, sweep_seed(exp.seed, r))?)
    };
    let mut summary = json!({ "strategy": strategy.to_string(), "k": k });
    let prior = match strategy {
        Strategy::Unpartitioned => {
            let routes = route_all_pairs(&network, k)?;
            io::write_routes(&routes, &network, &ctx.out("routes.csv"))?;
            let est = gls_estimate(&network, &samples, &routes, &gls)?;
            summary["gls"] = gls_summary(&est);
            est.demand
        }
        Strategy::Internal => {
            let p = partitioning()?;
            summary["community_count"] = json!(p.community_count);
            internal_prior(&network, &p, &samples, k, &gls)?
        }
        Strategy::Degenerate | Strategy::External | Strategy::Combined => {
            let p = partitioning()?;
            summary["community_count"] = json!(p.community_count);
            let com = build_community_network(&network, &p, &samples)?;
            let est = degenerate_prior(&com, k, &gls)?;
            summary["gls"] = gls_summary(&est);
            let dir = ctx.out("community");
            io::write_network_dir(&com.network, &dir)?;
            io::write_members(&com, &network, &dir.join("members.csv"))?;
            io::write_flows(&com.samples, &com.network, &dir.join("flows.csv"))?;
            if strategy == Strategy::Degenerate {
                io::write_od(&est.demand, &com.network, &dir.join("od.csv"))?;
                info!("community-level demand written to {}", dir.display());
                return ctx.write_json("estimate.json", &summary);
            }
            let ext = external_prior(&est.demand, &p)?;
            if strategy == Strategy::External {
                ext
            } else {
                combined_prior(&internal_prior(&network, &p, &samples, k, &gls)?, &ext)?
            }
        }
    };
    io::write_od(&prior, &network, &ctx.out("od.csv"))?;
    summary["total_demand"] = json!(prior.total());
    ctx.write_json("estimate.json", &summary)
}

fn cmd_adjust(ctx: &Ctx, args: &AdjustArgs) -> Result<()> {
    let network = ctx.network(&args.net)?;
    let prior = io::read_od(&network, &args.prior)?;
    let observed = io::read_flows(&network, &args.flows)?.mean();
    let exp = ctx.file.experiment(ctx.seed)?;
    let config = AdjustmentConfig {
        assignment: ctx.assignment(args.cost.as_deref())?,
        ..exp.adjustment
    };
    let res = adjust(&network, &prior, &observed, &config)?;
    io::write_od(&res.demand, &network, &ctx.out("od_adjusted.csv"))?;
    io::write_adjust_trace(&res.trace, &ctx.out("adjust_trace.csv"))?;
    io::write_ue_flows(&res.equilibrium, &network, &ctx.out("ue_flows.csv"))?;
    if !res.converged {
        warn!("adjustment did not converge: {}", res.diagnostic.as_deref().unwrap_or("unknown"));
    }
    ctx.write_json(
        "adjust.json",
        &json!({
            "converged": res.converged,
            "iterations": res.iterations,
            "objective": res.objective,
            "diagnostic": res.diagnostic,
        }),
    )
}

fn cmd_assign(ctx: &Ctx, args: &AssignArgs) -> Result<()> {
    let network = ctx.network(&args.net)?;
    let od = io::read_od(&network, &args.od)?;
    let sol = frank_wolfe(&network, &od, &ctx.assignment(args.cost.as_deref())?)?;
    io::write_ue_flows(&sol, &network, &ctx.out("ue_flows.csv"))?;
    io::write_fw_trace(&sol.trace, &ctx.out("fw_trace.csv"))?;
    if !sol.converged {
        warn!("assignment stopped at relative gap {:.3e}", sol.relative_gap);
    }
    ctx.write_json(
        "assign.json",
        &json!({
            "converged": sol.converged,
            "iterations": sol.iterations,
            "relative_gap": sol.relative_gap,
        }),
    )
}

fn write_edge_rae(network: &RoadNetwork, values: &[Option<f64>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["edge_id", "rae"])?;
    for (e, v) in network.edges().iter().zip(values) {
        if let Some(v) = v {
            w.write_record([e.id.clone(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_validate(ctx: &Ctx, args: &ValidateArgs) -> Result<()> {
    let network = ctx.network(&args.net)?;
    let predicted = io::read_edge_flows(&network, &args.predicted)?;
    let observed = io::read_flows(&network, &args.flows)?.mean();
    let flow = rae_flow(&predicted, &observed)?;
    write_edge_rae(&network, &flow, &ctx.out("rae_flow.csv"))?;
    let mut summary = json!({ "flow": summarize(&flow) });
    if let Some(p) = &args.speeds {
        let speeds = io::read_speeds(&network, p)?;
        let time = rae_time(&predicted, &network, &speeds)?;
        write_edge_rae(&network, &time, &ctx.out("rae_time.csv"))?;
        summary["time"] = json!(summarize(&time));
    }
    ctx.write_json("validate.json", &summary)
}

fn cmd_sweep(ctx: &Ctx, args: &SweepArgs) -> Result<()> {
    let network = ctx.network(&args.net)?;
    let mut exp = ctx.file.experiment(ctx.seed)?;
    if let Some(s) = args.strategy {
        exp.strategy = s;
    }
    if let Some(r) = args.resolution {
        exp.resolution = ResolutionChoice::Fixed(r);
    }
    if let Some(k) = args.k {
        exp.k = k;
    }
    if let Some(c) = &args.cost {
        exp.adjustment.assignment.cost = parse_cost(c)?;
    }
    let files: Vec<BinFiles> = match (&args.fit, &args.val) {
        (Some(fit), Some(val)) => vec![BinFiles {
            label: args.bin.clone(),
            fit: fit.clone(),
            val: val.clone(),
            speeds: args.speeds.clone(),
        }],
        _ => ctx.file.bins.clone(),
    };
    if files.is_empty() {
        bail!("no time bins: give --fit/--val or `bins` in the config");
    }
    let bins = files
        .iter()
        .map(|b| -> Result<BinData> {
            Ok(BinData {
                label: b.label.clone(),
                fitting: io::read_flows(&network, &b.fit)?,
                validation: io::read_flows(&network, &b.val)?,
                speeds: b.speeds.as_ref().map(|p| io::read_speeds(&network, p)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = run_experiment(&network, &bins, &exp)?;

    fs::write(ctx.out("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    report::write_summary_csv(&report, &ctx.out("summary.csv"))?;
    let degenerate = exp.strategy == Strategy::Degenerate;
    let edge_ids = |e: &odpart::experiment::SizeEntry, a: usize| {
        if degenerate {
            format!("c{}#{a}", e.community_count)
        } else {
            network.edges()[a].id.clone()
        }
    };
    report::write_rae_csv(&report, edge_ids, |e| e.flow_rae.as_ref(), &ctx.out("rae_flow.csv"))?;
    report::write_rae_csv(&report, edge_ids, |e| e.time_rae.as_ref(), &ctx.out("rae_time.csv"))?;
    let title = format!("{} strategy", exp.strategy);
    if let Some(svg) = report::line_chart(&report, &format!("{title}: flow RAE"), |e| e.flow_summary) {
        fs::write(ctx.out("flow_rae.svg"), svg)?;
    }
    if let Some(svg) = report::line_chart(&report, &format!("{title}: travel time RAE"), |e| e.time_summary) {
        fs::write(ctx.out("time_rae.svg"), svg)?;
    }
    let failed = report.entries.iter().filter(|e| !e.converged).count();
    if failed > 0 {
        warn!("{failed} of {} entries did not converge or failed", report.entries.len());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ctx = Ctx {
        seed: cli.seed,
        file,
        out: cli.out.clone(),
    };
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(&ctx, a),
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Partition(a) => cmd_partition(&ctx, a),
        Command::Estimate(a) => cmd_estimate(&ctx, a),
        Command::Adjust(a) => cmd_adjust(&ctx, a),
        Command::Assign(a) => cmd_assign(&ctx, a),
        Command::Validate(a) => cmd_validate(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
    }
}
