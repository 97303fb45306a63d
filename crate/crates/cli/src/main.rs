//! `ccsvc`: scenario runner and oracle checker for the concurrency-control
//! service.
//!
//! The same scenario runs either fully simulated in-process or distributed
//! across node processes over TCP, and the two produce byte-identical run
//! reports. `replay` exploits that to check reproducibility; `oracle`
//! audits a run against the snapshot-isolation checker and exits nonzero
//! on any violation.

mod shell;
mod tcp;
mod wire;

use anyhow::{bail, Context, Result};
use ccsvc_core::harness::{
    run_scenario, FaultEvent, ReshardPlan, RunReport, ScenarioConfig, WorkloadSpec,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "ccsvc", version, about = "Concurrency-control service scenario runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and print its report.
    Run(RunArgs),
    /// Run a scenario and report only the oracle verdict.
    Oracle(ScenarioArgs),
    /// Run a scenario twice and fail unless the reports are byte-identical.
    Replay(ReplayArgs),
    /// Print a scenario as JSON, for editing and reuse with --scenario.
    Scenario(ScenarioArgs),
    /// Internal: run one node inside an orchestrated cluster.
    #[command(hide = true)]
    Node(NodeArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Transport {
    /// Deterministic in-process simulation.
    Sim,
    /// Every CC and storage node in its own process, over loopback TCP.
    Tcp,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, value_enum, default_value_t = Transport::Sim)]
    transport: Transport,
    /// Write the full report as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the full report as JSON instead of a summary.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, value_enum, default_value_t = Transport::Sim)]
    transport: Transport,
    /// Compare against a previously saved report instead of a fresh first
    /// run.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

/// A scenario, either loaded whole from a JSON file or assembled from
/// flags. With --scenario, the flags are ignored.
#[derive(Args)]
struct ScenarioArgs {
    /// Scenario JSON file (as printed by `ccsvc scenario`).
    #[arg(long)]
    scenario: Option<PathBuf>,

    #[arg(long, default_value = "cli")]
    name: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Concurrency-control nodes.
    #[arg(long, default_value_t = 2)]
    cc: u32,
    /// Execution engines (key spaces).
    #[arg(long, default_value_t = 1)]
    engines: u16,
    /// Storage replicas per engine.
    #[arg(long, default_value_t = 1)]
    storage_per_engine: u32,
    #[arg(long, default_value_t = 2)]
    shards: u32,
    /// CC replicas per shard.
    #[arg(long, default_value_t = 1)]
    replication: u32,
    /// Ticks between epoch closes.
    #[arg(long, default_value_t = 5)]
    epoch_ticks: u32,
    /// Resolve single-node epochs locally before any exchange.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    local_first: bool,
    /// Hold decisions until storage acknowledges the epoch's log frames.
    #[arg(long)]
    sync_log: bool,
    /// Storage rows made visible per tick; 0 applies eagerly.
    #[arg(long, default_value_t = 0)]
    apply_rows_per_tick: u32,
    #[arg(long, default_value_t = 1)]
    in_flight: u32,
    /// Submission window in ticks.
    #[arg(long, default_value_t = 2000)]
    max_ticks: u64,
    #[arg(long, default_value_t = 1000)]
    drain_ticks: u64,

    /// Preloaded rows per engine.
    #[arg(long, default_value_t = 200)]
    rows: u64,
    #[arg(long, default_value_t = 4)]
    ops_per_txn: u32,
    #[arg(long, default_value_t = 0.5)]
    read_fraction: f64,
    /// Zipfian skew; omit for uniform access.
    #[arg(long)]
    zipf_theta: Option<f64>,
    #[arg(long, default_value_t = 50)]
    txns_per_client: u32,
    #[arg(long, default_value_t = 4)]
    clients: u32,
    /// Fraction of submissions that become cross-engine groups (needs two
    /// engines).
    #[arg(long, default_value_t = 0.0)]
    group_fraction: f64,

    /// JSON file with scripted faults: [{"tick":N,"action":{"CrashCc":2}}, ...]
    #[arg(long)]
    faults: Option<PathBuf>,
    /// Trigger a reshard at this tick.
    #[arg(long)]
    reshard_at: Option<u64>,
    /// New shard count for --reshard-at.
    #[arg(long, default_value_t = 3)]
    reshard_to: u32,
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<ScenarioConfig> {
        if let Some(path) = &self.scenario {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("read scenario {}", path.display()))?;
            return serde_json::from_str(&text).context("parse scenario JSON");
        }
        let faults: Vec<FaultEvent> = match &self.faults {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("read faults {}", path.display()))?;
                serde_json::from_str(&text).context("parse faults JSON")?
            }
            None => Vec::new(),
        };
        Ok(ScenarioConfig {
            name: self.name.clone(),
            seed: self.seed,
            cc_count: self.cc,
            engines: self.engines,
            storage_per_engine: self.storage_per_engine,
            shards: self.shards,
            replication: self.replication,
            epoch_ticks: self.epoch_ticks,
            local_first: self.local_first,
            sync_log_push: self.sync_log,
            apply_rows_per_tick: self.apply_rows_per_tick,
            in_flight_per_client: self.in_flight,
            max_ticks: self.max_ticks,
            drain_ticks: self.drain_ticks,
            workload: WorkloadSpec {
                rows: self.rows,
                ops_per_txn: self.ops_per_txn,
                read_fraction: self.read_fraction,
                zipf_theta: self.zipf_theta,
                txns_per_client: self.txns_per_client,
                clients: self.clients,
                group_fraction: self.group_fraction,
            },
            faults,
            reshard: self.reshard_at.map(|t| ReshardPlan {
                trigger_tick: t,
                new_shards: self.reshard_to,
            }),
        })
    }
}

#[derive(Args)]
struct NodeArgs {
    /// cc | storage
    #[arg(long)]
    role: String,
    #[arg(long)]
    node: u32,
    /// Orchestrator address to connect back to.
    #[arg(long)]
    connect: String,
    /// Scenario as inline JSON.
    #[arg(long)]
    scenario_json: String,
    /// Log directory (CC nodes only).
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Rebuild state from the log directory instead of starting fresh.
    #[arg(long)]
    recover: bool,
}

fn execute(cfg: &ScenarioConfig, transport: Transport) -> Result<RunReport> {
    match transport {
        Transport::Sim => Ok(run_scenario(cfg).report),
        Transport::Tcp => {
            let bin = std::env::current_exe().context("locate own binary")?;
            tcp::run_scenario_tcp(cfg, &bin)
        }
    }
}

fn print_summary(report: &RunReport) {
    println!("scenario      {}  (seed {})", report.name, report.seed);
    println!(
        "ticks         {}  quiesced: {}",
        report.ticks_run, report.quiesced
    );
    println!(
        "transactions  {} submitted, {} committed, {} aborted, {} rejected, {} dropped",
        report.submitted,
        report.committed,
        report.aborted.values().sum::<u64>(),
        report.rejected,
        report.dropped
    );
    for (reason, n) in &report.aborted {
        println!("  aborted/{reason}: {n}");
    }
    println!(
        "commit rtt    mean {:.2}, max {:.2}, amortized hops {:.2}",
        report.commit_rtt_mean, report.commit_rtt_max, report.amortized_commit_hops
    );
    if let Some(frac) = report.decision_before_apply {
        println!("async apply   {:.1}% of decisions preceded storage apply", frac * 100.0);
    }
    for (engine, host, digest) in &report.storage_digests {
        let watermark = report
            .watermarks
            .iter()
            .find(|(h, _)| h == host)
            .map(|(_, w)| *w)
            .unwrap_or(0);
        println!("storage e{engine}/h{host}  digest {digest:08x}  watermark {watermark}");
    }
    if report.oracle_violations.is_empty() {
        println!("oracle        clean");
    } else {
        println!("oracle        {} violation(s):", report.oracle_violations.len());
        for v in &report.oracle_violations {
            println!("  {v}");
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<i32> {
    let cfg = args.scenario.resolve()?;
    let report = execute(&cfg, args.transport)?;
    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&report)?;
        std::fs::write(path, json).with_context(|| format!("write {}", path.display()))?;
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print_summary(&report);
    }
    Ok(if report.oracle_violations.is_empty() { 0 } else { 1 })
}

fn cmd_oracle(args: ScenarioArgs) -> Result<i32> {
    let cfg = args.resolve()?;
    let report = execute(&cfg, Transport::Sim)?;
    if report.oracle_violations.is_empty() {
        println!(
            "oracle clean: {} committed / {} submitted",
            report.committed, report.submitted
        );
        Ok(0)
    } else {
        for v in &report.oracle_violations {
            println!("violation: {v}");
        }
        Ok(1)
    }
}

fn cmd_replay(args: ReplayArgs) -> Result<i32> {
    let cfg = args.scenario.resolve()?;
    let first = match &args.baseline {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("read baseline {}", path.display()))?;
            serde_json::from_str(&text).context("parse baseline report")?
        }
        None => execute(&cfg, args.transport)?,
    };
    let second = execute(&cfg, args.transport)?;
    let a = serde_json::to_string_pretty(&first)?;
    let b = serde_json::to_string_pretty(&second)?;
    if a == b {
        println!("replay identical: {} committed, seed {}", second.committed, cfg.seed);
        Ok(0)
    } else {
        for (la, lb) in a.lines().zip(b.lines()) {
            if la != lb {
                println!("- {la}");
                println!("+ {lb}");
            }
        }
        println!("replay diverged");
        Ok(1)
    }
}

fn cmd_node(args: NodeArgs) -> Result<i32> {
    let cfg: ScenarioConfig =
        serde_json::from_str(&args.scenario_json).context("parse scenario JSON")?;
    match args.role.as_str() {
        "cc" => {
            let dir = args.dir.context("--dir is required for cc nodes")?;
            shell::run_cc(args.node, &cfg, &dir, &args.connect, args.recover)?;
        }
        "storage" => shell::run_storage(args.node, &cfg, &args.connect, args.recover)?,
        other => bail!("unknown role {other:?}"),
    }
    Ok(0)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Run(args) => cmd_run(args)?,
        Cmd::Oracle(args) => cmd_oracle(args)?,
        Cmd::Replay(args) => cmd_replay(args)?,
        Cmd::Scenario(args) => {
            let cfg = args.resolve()?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            0
        }
        Cmd::Node(args) => cmd_node(args)?,
    };
    std::process::exit(code);
}
