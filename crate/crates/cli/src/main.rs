#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use impact_core::attribution::DEFAULT_PUE;
use impact_core::carbon::geolocate::{HttpGeoProvider, OfflineProvider};
use impact_core::carbon::{
    compute_emissions, geolocate, region_override, GeoProvider, Location, RegionDb, SccTable,
};
use impact_core::estimation::{gpu_hours_estimate, pflops_estimate, tdp_estimate, GpuTable};
use impact_core::monitor::{MonitorConfig, SensorBackend};
use impact_core::realtime::DEFAULT_POLL_INTERVAL_S;
use impact_core::reporting::leaderboard::load_entries;
use impact_core::reporting::{
    format_statement, generate_appendix, generate_leaderboard, region_emissions_report,
    statement_totals, AppendixOptions, RunData,
};
use impact_core::sensors::ReplayTrace;
use impact_core::wrapper::{run_wrapped, LAUNCH_FAILURE_EXIT};

#[derive(Parser, Debug)]
#[command(
    name = "impact",
    version,
    about = "Track the energy use and carbon emissions of compute workloads"
)]
struct Cli {
    /// Disable every network call (geolocation, realtime intensity).
    #[arg(long, global = true)]
    offline: bool,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a command under the monitor and pass its exit code through.
    Run(RunArgs),
    /// Print a carbon impact statement for one or more runs.
    Statement(StatementArgs),
    /// Build a static HTML appendix from run logs.
    Appendix(AppendixArgs),
    /// Build an energy leaderboard from a JSON list of entries.
    Leaderboard(LeaderboardArgs),
    /// List grid and cloud regions by carbon intensity.
    Regions(RegionsArgs),
    /// Rough energy and emissions estimates from GPU specs.
    Estimate(EstimateArgs),
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Format {
    #[default]
    Text,
    Json,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Directory for the run log.
    #[arg(long, default_value = "impact_logs")]
    log_dir: PathBuf,
    /// Seconds between samples.
    #[arg(long, default_value_t = 1.0)]
    poll_interval: f64,
    /// Seconds between realtime intensity polls.
    #[arg(long, default_value_t = DEFAULT_POLL_INTERVAL_S)]
    realtime_poll_interval: f64,
    /// Power usage effectiveness of the data center.
    #[arg(long, default_value_t = DEFAULT_PUE)]
    pue: f64,
    /// Region, cloud region or generation method id; skips geolocation.
    #[arg(long)]
    region: Option<String>,
    /// Address to geolocate instead of this machine's public address.
    #[arg(long)]
    ip: Option<IpAddr>,
    /// Experiment name used to group runs in the appendix.
    #[arg(long)]
    experiment: Option<String>,
    /// `system`, or `replay:FILE` to replay a recorded trace.
    #[arg(long, default_value = "system")]
    sensor_backend: String,
    /// Workload command, after `--`.
    #[arg(required = true, last = true)]
    command: Vec<OsString>,
}

#[derive(Args, Debug)]
struct StatementArgs {
    /// Run log directories or log files.
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    /// ISO 3166 alpha-3 country code for the social cost of carbon.
    #[arg(long, default_value = "USA")]
    country: String,
    /// Social cost of carbon table (CSV) replacing the bundled one.
    #[arg(long)]
    scc_table: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args, Debug)]
struct AppendixArgs {
    /// Run log directories or log files.
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Leave the generation time out of the pages.
    #[arg(long)]
    suppress_timestamp: bool,
}

#[derive(Args, Debug)]
struct LeaderboardArgs {
    /// JSON array of leaderboard entries.
    #[arg(long)]
    entries: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RegionsArgs {
    /// Only cloud regions.
    #[arg(long)]
    cloud_only: bool,
    /// Show a single region, cloud region or generation method.
    #[arg(long)]
    id: Option<String>,
    /// Region database (JSON) replacing the bundled one.
    #[arg(long)]
    regions_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// GPU model, matched case-insensitively.
    #[arg(long)]
    gpu: String,
    /// Number of GPUs.
    #[arg(long, default_value_t = 1)]
    count: u32,
    /// Wall-clock hours of training.
    #[arg(long)]
    hours: f64,
    /// Assumed average utilization in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    util: f64,
    /// Total compute in petaflop/s-hours, for the throughput-based estimate.
    #[arg(long)]
    pflops_hr: Option<f64>,
    /// Region, cloud region or generation method id.
    #[arg(long, conflicts_with = "ip")]
    region: Option<String>,
    /// Geolocate this address (network call).
    #[arg(long)]
    ip: Option<IpAddr>,
    /// GPU spec table (CSV) replacing the bundled one.
    #[arg(long)]
    gpu_table: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

fn load_summaries(logs: &[PathBuf]) -> Result<Vec<impact_core::reporting::ImpactSummary>> {
    logs.iter()
        .map(|p| {
            let run = RunData::load(p).with_context(|| format!("reading {}", p.display()))?;
            if run.warnings > 0 {
                log::warn!(
                    "{}: skipped {} truncated line(s)",
                    p.display(),
                    run.warnings
                );
            }
            Ok(run.summary())
        })
        .collect()
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_run(args: RunArgs, offline: bool) -> Result<ExitCode> {
    let backend = match args.sensor_backend.as_str() {
        "system" => SensorBackend::System,
        other => match other.strip_prefix("replay:") {
            Some(file) => SensorBackend::Replay(
                ReplayTrace::from_file(Path::new(file)).context("loading replay trace")?,
            ),
            None => bail!("unknown sensor backend {other:?}; expected system or replay:FILE"),
        },
    };
    let config = MonitorConfig {
        poll_interval_s: args.poll_interval,
        pue: args.pue,
        region_override: region_override(args.region.as_deref()),
        realtime_poll_interval_s: args.realtime_poll_interval,
        sensor_backend: backend,
        experiment: args.experiment,
        offline,
        ip: args.ip,
        ..MonitorConfig::new(&args.log_dir)
    };
    let outcome = run_wrapped(&args.command, config)?;
    let s = &outcome.summary;
    eprintln!(
        "impact: {:.3} kWh, {} kg CO2eq, region {}, log {}",
        s.kwh,
        s.kg_co2eq.map_or("n/a".into(), |k| format!("{k:.3}")),
        s.region_id.as_deref().unwrap_or("unknown"),
        outcome.log_path.display()
    );
    if !outcome.exceptions.is_empty() {
        eprintln!(
            "impact: {} sensor exception(s) logged",
            outcome.exceptions.len()
        );
    }
    Ok(ExitCode::from(outcome.exit_code.clamp(0, 255) as u8))
}

fn cmd_statement(args: StatementArgs) -> Result<()> {
    let scc = match &args.scc_table {
        Some(p) => SccTable::from_file(p)?,
        None => SccTable::bundled(),
    };
    let summaries = load_summaries(&args.logs)?;
    let totals = statement_totals(&summaries, &args.country, &scc)?;
    match args.format {
        Format::Text => println!("{}", format_statement(&totals)),
        Format::Json => print_json(&serde_json::json!({
            "statement": format_statement(&totals),
            "totals": totals,
        }))?,
    }
    Ok(())
}

fn cmd_appendix(args: AppendixArgs) -> Result<()> {
    let opts = AppendixOptions {
        generated_at: (!args.suppress_timestamp)
            .then(|| humantime::format_rfc3339_seconds(std::time::SystemTime::now()).to_string()),
    };
    let out = generate_appendix(&args.logs, &args.out, &opts)?;
    println!(
        "wrote {} run(s) to {}",
        out.run_ids.len(),
        args.out.join("index.html").display()
    );
    Ok(())
}

fn cmd_leaderboard(args: LeaderboardArgs) -> Result<()> {
    let entries = load_entries(&args.entries)?;
    generate_leaderboard(&entries, &args.out)?;
    println!("wrote {}", args.out.join("index.html").display());
    Ok(())
}

fn load_regions(path: Option<&Path>) -> Result<RegionDb> {
    Ok(match path {
        Some(p) => RegionDb::from_file(p)?,
        None => RegionDb::bundled(),
    })
}

fn cmd_regions(args: RegionsArgs) -> Result<()> {
    let db = load_regions(args.regions_file.as_deref())?;
    if let Some(id) = &args.id {
        let source = db.lookup(id)?;
        return match args.format {
            Format::Json => print_json(&source),
            Format::Text => {
                println!("{} ({})", source.id, source.display_name);
                println!("  intensity: {} gCO2eq/kWh", source.g_per_kwh);
                if let Some(g) = &source.grid_region {
                    println!("  grid region: {g}");
                }
                if let Some(c) = &source.country {
                    println!("  country: {c}");
                }
                println!("  source: {} ({})", source.source, source.year);
                Ok(())
            }
        };
    }
    let rows = region_emissions_report(&db, args.cloud_only);
    match args.format {
        Format::Json => print_json(&rows)?,
        Format::Text => {
            let width = rows.iter().map(|r| r.id.len()).max().unwrap_or(2).max(2);
            println!("{:<width$}  {:>8}  {:<5}  name", "id", "g/kWh", "year");
            for r in &rows {
                println!(
                    "{:<width$}  {:>8.1}  {:<5}  {}",
                    r.id, r.g_per_kwh, r.year, r.display_name
                );
            }
        }
    }
    Ok(())
}

fn cmd_estimate(args: EstimateArgs, offline: bool) -> Result<()> {
    if !(args.hours >= 0.0) {
        bail!("--hours must be non-negative");
    }
    if !(0.0..=1.0).contains(&args.util) {
        bail!("--util must be within [0, 1]");
    }
    let table = match &args.gpu_table {
        Some(p) => GpuTable::from_file(p)?,
        None => GpuTable::bundled(),
    };
    let spec = table.get(&args.gpu)?;
    let db = RegionDb::bundled();

    let region_id = match (region_override(args.region.as_deref()), args.ip) {
        (Some(id), _) => Some(id),
        (None, Some(ip)) => {
            let provider: Box<dyn GeoProvider> = if offline {
                Box::new(OfflineProvider)
            } else {
                Box::new(HttpGeoProvider::default())
            };
            match geolocate(Some(ip), provider.as_ref(), None)? {
                Location::Region(id) => Some(id),
                Location::Point(p) => Some(db.resolve(p)?.id.clone()),
            }
        }
        (None, None) => None,
    };
    let intensity = region_id.map(|id| db.lookup(&id)).transpose()?;

    let mut results = vec![
        tdp_estimate(args.count, spec, args.hours, args.util),
        gpu_hours_estimate(f64::from(args.count) * args.hours, spec),
    ];
    if let Some(p) = args.pflops_hr {
        results.push(pflops_estimate(p, spec));
    }
    let kg = |kwh: f64| {
        intensity
            .as_ref()
            .map(|s| compute_emissions(kwh, s.g_per_kwh))
    };

    match args.format {
        Format::Json => {
            let rows: Vec<_> = results
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "method": r.method,
                        "kwh": r.kwh,
                        "kg_co2eq": kg(r.kwh),
                        "assumptions": r.assumptions,
                    })
                })
                .collect();
            print_json(&serde_json::json!({
                "gpu": spec,
                "region": intensity,
                "estimates": rows,
            }))?;
        }
        Format::Text => {
            println!("{} ({} W TDP)", spec.model, spec.tdp_w);
            if let Some(s) = &intensity {
                println!("region {}: {} gCO2eq/kWh", s.id, s.g_per_kwh);
            }
            for r in &results {
                let method = serde_json::to_value(r.method)?;
                println!(
                    "{:<14} {:>10.3} kWh  {:>10} kg CO2eq",
                    method.as_str().unwrap_or_default(),
                    r.kwh,
                    kg(r.kwh).map_or("n/a".into(), |k| format!("{k:.3}"))
                );
                for a in &r.assumptions {
                    println!("    {a}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Run(args) => match cmd_run(args, cli.offline) {
            Ok(code) => return code,
            Err(e) => {
                eprintln!("impact: {e:#}");
                return ExitCode::from(LAUNCH_FAILURE_EXIT as u8);
            }
        },
        Command::Statement(args) => cmd_statement(args),
        Command::Appendix(args) => cmd_appendix(args),
        Command::Leaderboard(args) => cmd_leaderboard(args),
        Command::Regions(args) => cmd_regions(args),
        Command::Estimate(args) => cmd_estimate(args, cli.offline),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("impact: {e:#}");
            ExitCode::FAILURE
        }
    }
}
