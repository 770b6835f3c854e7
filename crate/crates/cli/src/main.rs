//! `dlsched`: batch front end for the cluster-scheduling simulator.

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dlsched_core::engine::{run, EngineError, MetricsReport};
use dlsched_core::lease::{bench, LeaseError};
use dlsched_core::synth::run_synthesized;
use thiserror::Error;

use config::{ConfigError, RawConfig, KEYS};
use report::{Manifest, SummaryRow, TOOL_VERSION};

#[derive(Debug, Parser)]
#[command(name = "dlsched", version, about = "Simulate preemptive GPU-cluster scheduling policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Config file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulation.
    Simulate(Common),
    /// Run one simulation per value of a numeric key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Key to vary; defaults to `sweep.param`.
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated values; defaults to `sweep.values`.
        #[arg(long)]
        values: Option<String>,
    },
    /// Run with periodic policy re-selection.
    Synth(Common),
    /// Compare lease renewal protocols on the simulated worker harness.
    LeaseBench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated worker counts; defaults to `lease.workers`.
        #[arg(long)]
        workers: Option<String>,
        #[arg(long)]
        rounds: Option<u64>,
        #[arg(long)]
        revocations: Option<u64>,
        /// Number of delay seeds per row.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// List every config key with its default.
    Keys,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("engine error: {0}")]
    Engine(#[from] EngineError),
    #[error("lease harness error: {0}")]
    Lease(#[from] LeaseError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn load(common: &Common) -> Result<RawConfig, ConfigError> {
    let mut raw = RawConfig::default();
    if let Some(p) = &common.config {
        raw.apply_file(p)?;
    }
    for s in &common.set {
        raw.apply(s)?;
    }
    if let Some(seed) = common.seed {
        raw.set("seed", &seed.to_string())?;
    }
    Ok(raw)
}

fn manifest<'a>(raw: &'a RawConfig, command: &'a str) -> Result<Manifest<'a>, ConfigError> {
    Ok(Manifest { tool_version: TOOL_VERSION, seed: raw.seed()?, command, config: raw.values() })
}

fn summary_line(r: &MetricsReport) -> String {
    format!("avg_jct={:.3} avg_responsiveness={:.3} jobs={}", r.avg_jct, r.avg_responsiveness, r.per_job.len())
}

fn simulate_into(raw: &RawConfig, out: &Path, command: &str) -> Result<MetricsReport, CliError> {
    let sim = raw.sim_config()?;
    let spec = raw.policy_spec()?;
    let jobs = raw.jobs()?;
    let m = manifest(raw, command)?;
    let r = run(sim, jobs, &spec)?;
    report::write_manifest(out, &raw.to_text())?;
    report::write_report(out, &r, &m)?;
    Ok(r)
}

fn cmd_simulate(common: &Common) -> Result<(), CliError> {
    let raw = load(common)?;
    let r = simulate_into(&raw, &common.out, "simulate")?;
    println!("{}", summary_line(&r));
    Ok(())
}

fn cmd_sweep(common: &Common, param: Option<&str>, values: Option<&str>) -> Result<(), CliError> {
    let mut raw = load(common)?;
    if let Some(p) = param {
        raw.set("sweep.param", p)?;
    }
    if let Some(v) = values {
        raw.set("sweep.values", v)?;
    }
    let param = raw.get("sweep.param").to_string();
    if !KEYS.iter().any(|(k, _, _)| *k == param) {
        return Err(ConfigError::key("sweep.param", format!("unknown key `{param}`")).into());
    }
    let values: Vec<String> =
        raw.get("sweep.values").split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
    if values.is_empty() {
        return Err(ConfigError::key("sweep.values", "no values to sweep").into());
    }
    if let Some(bad) = values.iter().find(|v| v.parse::<f64>().is_err()) {
        return Err(ConfigError::key("sweep.values", format!("`{bad}` is not numeric")).into());
    }
    // Validate every point before running any of them.
    for v in &values {
        let mut point = raw.clone();
        point.set(&param, v)?;
        point.sim_config()?;
        point.policy_spec()?;
    }
    let mut rows = Vec::new();
    for (i, v) in values.iter().enumerate() {
        let mut point = raw.clone();
        point.set(&param, v)?;
        let dir = common.out.join(format!("point_{i:02}_{param}={v}"));
        match simulate_into(&point, &dir, "sweep") {
            Ok(r) => {
                println!("{param}={v} {}", summary_line(&r));
                rows.push(SummaryRow {
                    param_value: v.clone(),
                    avg_jct: r.avg_jct,
                    avg_responsiveness: r.avg_responsiveness,
                });
            }
            Err(e) => {
                report::write_summary(&common.out, &rows)?;
                return Err(e);
            }
        }
    }
    report::write_manifest(&common.out, &raw.to_text())?;
    report::write_summary(&common.out, &rows)?;
    Ok(())
}

fn cmd_synth(common: &Common) -> Result<(), CliError> {
    let raw = load(common)?;
    let sim = raw.sim_config()?;
    let placement = raw.placement()?;
    let synth = raw.synth()?;
    let jobs = raw.jobs()?;
    let m = manifest(&raw, "synth")?;
    let out = run_synthesized(sim, jobs, placement, &synth)?;
    report::write_manifest(&common.out, &raw.to_text())?;
    report::write_report(&common.out, &out.report, &m)?;
    report::write_switch_log(&common.out, &out.switch_log)?;
    println!("{} switches={}", summary_line(&out.report), out.switch_log.len());
    Ok(())
}

fn cmd_lease_bench(
    common: &Common,
    workers: Option<&str>,
    rounds: Option<u64>,
    revocations: Option<u64>,
    seeds: Option<u64>,
) -> Result<(), CliError> {
    let mut raw = load(common)?;
    if let Some(w) = workers {
        raw.set("lease.workers", w)?;
    }
    for (key, v) in [("lease.rounds", rounds), ("lease.revocations", revocations), ("lease.seeds", seeds)] {
        if let Some(v) = v {
            raw.set(key, &v.to_string())?;
        }
    }
    let grid = raw.lease_grid()?;
    let mut rows = Vec::new();
    for &w in &grid.workers {
        for &mode in &grid.modes {
            rows.push(bench(mode, w, grid.rounds, grid.revocations, &grid.seeds)?);
        }
    }
    report::write_manifest(&common.out, &raw.to_text())?;
    report::write_lease(&common.out, &rows)?;
    for r in &rows {
        println!(
            "{} workers={} central_messages={} total_messages={} max_exit_skew={}",
            r.mode, r.workers, r.central_messages, r.total_messages, r.max_exit_skew_iterations
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => cmd_simulate(c),
        Command::Sweep { common, param, values } => cmd_sweep(common, param.as_deref(), values.as_deref()),
        Command::Synth(c) => cmd_synth(c),
        Command::LeaseBench { common, workers, rounds, revocations, seeds } => {
            cmd_lease_bench(common, workers.as_deref(), *rounds, *revocations, *seeds)
        }
        Command::Keys => {
            for (k, v, doc) in KEYS {
                println!("{k}={v}\t# {doc}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dlsched: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
