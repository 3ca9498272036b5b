//! Command-line harness: validate scenario configs, plan deployments, run
//! simulations, and replay transmission logs against their reports.
//!
//! Exit codes are a stable contract:
//!   0 — success
//!   1 — domain-invalid result (bad coverage, failed validation, replay
//!       mismatch)
//!   2 — input error (unreadable or malformed file, bad arguments)
//!   3 — internal invariant breach (a bug, never expected)

use clap::{Parser, Subcommand, ValueEnum};
use rsmu_sim::deployment::plan_deployment;
use rsmu_sim::sim::config::ScenarioConfig;
use rsmu_sim::sim::log::parse_log_file;
use rsmu_sim::sim::metrics::{collect_metrics, report_to_csv, value_to_csv, MetricsReport};
use rsmu_sim::sim::replay;
use rsmu_sim::sim::{run, RunOptions, SimError};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_OK: u8 = 0;
const EXIT_DOMAIN: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(
    name = "rsmu-sim",
    about = "Deterministic highway information-sharing simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct CommonArgs {
    /// Input file: a scenario config, or for `replay` a transmission log.
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (reports default to a sibling of the input).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report serialization.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Also stream per-tick fleet state to this file (default: derived
    /// from the report path).
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    tick_trace: Option<PathBuf>,
    /// Override the scenario's channel profile.
    #[arg(long)]
    profile: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Plan the node deployment for a scenario and check coverage.
    Plan(CommonArgs),
    /// Validate a scenario config without running it.
    Validate(CommonArgs),
    /// Run a scenario: writes a metrics report and a transmission log.
    Run(CommonArgs),
    /// Recompute a report from a transmission log and compare it to the
    /// original report next to the log, if present.
    Replay(CommonArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("RSMU_SIM_LOG_LEVEL")).init();
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Plan(args) => cmd_plan(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Run(args) => cmd_run(args),
        Command::Replay(args) => cmd_replay(args),
    };
    ExitCode::from(code)
}

fn load_scenario(args: &CommonArgs) -> Result<ScenarioConfig, u8> {
    let text = std::fs::read_to_string(&args.scenario).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", args.scenario.display());
        EXIT_INPUT
    })?;
    let mut cfg: ScenarioConfig = serde_json::from_str(&text).map_err(|e| {
        eprintln!("error: {} is not a valid scenario: {e}", args.scenario.display());
        EXIT_INPUT
    })?;
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    if let Some(profile) = &args.profile {
        cfg.channel.profile = profile.clone();
    }
    Ok(cfg)
}

/// Default report path: the scenario file with its extension replaced by
/// `.report.json` (or `.report.csv`).
fn default_out(scenario: &Path, format: Format) -> PathBuf {
    let ext = match format {
        Format::Json => "report.json",
        Format::Csv => "report.csv",
    };
    scenario.with_extension(ext)
}

/// The transmission log lives next to the report: `X.json` -> `X.log.jsonl`.
fn log_path_for(out: &Path) -> PathBuf {
    out.with_extension("log.jsonl")
}

/// Inverse of `log_path_for`, trying both report formats.
fn report_paths_for(log: &Path) -> Vec<PathBuf> {
    let name = log.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let mut candidates = Vec::new();
    if let Some(stem) = name.strip_suffix(".log.jsonl") {
        candidates.push(log.with_file_name(format!("{stem}.json")));
        candidates.push(log.with_file_name(format!("{stem}.csv")));
    }
    candidates
}

fn render_report(report: &MetricsReport, format: Format) -> String {
    match format {
        Format::Json => {
            let mut text = serde_json::to_string_pretty(report).expect("report serializes");
            text.push('\n');
            text
        }
        Format::Csv => report_to_csv(report),
    }
}

fn write_out(path: &Path, contents: &str) -> Result<(), u8> {
    std::fs::write(path, contents).map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        EXIT_INPUT
    })
}

fn cmd_plan(args: &CommonArgs) -> u8 {
    let cfg = match load_scenario(args) {
        Ok(cfg) => cfg,
        Err(code) => return code,
    };
    let network = match cfg.network() {
        Ok(network) => network,
        Err(e) => {
            eprintln!("error: geometry: {e}");
            return EXIT_INPUT;
        }
    };
    let plan = match plan_deployment(&network, &cfg.deployment) {
        Ok(plan) => plan,
        Err(e) => {
            eprintln!("error: deployment: {e}");
            return EXIT_INPUT;
        }
    };
    let value = serde_json::to_value(&plan).expect("plan serializes");
    let rendered = match args.format {
        Format::Json => {
            let mut text = serde_json::to_string_pretty(&value).expect("plan serializes");
            text.push('\n');
            text
        }
        Format::Csv => value_to_csv(&value),
    };
    match &args.out {
        Some(path) => {
            if let Err(code) = write_out(path, &rendered) {
                return code;
            }
        }
        None => print!("{rendered}"),
    }
    let coverage = plan.coverage.as_ref().expect("planner always validates coverage");
    println!(
        "plan: {} nodes, max owner distance {:.1} m, max spacing {:.1} m, coverage {}",
        plan.nodes.len(),
        coverage.max_owner_distance_m,
        coverage.max_adjacent_spacing_m,
        if coverage.valid { "valid" } else { "INVALID" }
    );
    if !coverage.valid {
        for band in &coverage.uncovered {
            println!(
                "uncovered: carriageway {:?} station {:.0} m is {:.1} m from node {}",
                band.carriageway, band.station_m, band.distance_m, band.owner
            );
        }
        return EXIT_DOMAIN;
    }
    EXIT_OK
}

fn cmd_validate(args: &CommonArgs) -> u8 {
    let cfg = match load_scenario(args) {
        Ok(cfg) => cfg,
        Err(code) => return code,
    };
    match cfg.validate() {
        Ok(()) => {
            println!("valid: scenario '{}'", cfg.name);
            EXIT_OK
        }
        Err(e) => {
            println!("invalid: {e}");
            EXIT_DOMAIN
        }
    }
}

fn cmd_run(args: &CommonArgs) -> u8 {
    let cfg = match load_scenario(args) {
        Ok(cfg) => cfg,
        Err(code) => return code,
    };
    if let Err(e) = cfg.validate() {
        eprintln!("error: invalid scenario: {e}");
        return EXIT_INPUT;
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| default_out(&args.scenario, args.format));
    let log_path = log_path_for(&out);
    let trace_path = args.tick_trace.as_ref().map(|p| {
        if p.as_os_str().is_empty() {
            out.with_extension("trace.jsonl")
        } else {
            p.clone()
        }
    });
    let options = RunOptions {
        log_path: Some(log_path.clone()),
        trace_path,
        collect_metrics: true,
        ..RunOptions::default()
    };
    let output = match run(&cfg, &options) {
        Ok(output) => output,
        Err(SimError::Invariant { t_us, what }) => {
            eprintln!("internal error: invariant breach at t={t_us} us: {what}");
            return EXIT_INTERNAL;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INPUT;
        }
    };
    let report = output.report.expect("metrics requested");
    if let Err(code) = write_out(&out, &render_report(&report, args.format)) {
        return code;
    }
    let v2i_ratio = report
        .channels
        .get("v2i")
        .map(|c| c.delivery_ratio())
        .unwrap_or(0.0);
    let max_gap_ms = report
        .handovers
        .transfers
        .iter()
        .filter_map(|t| t.gap_ms)
        .fold(0.0_f64, f64::max);
    println!(
        "run '{}' seed {}: {} handovers (max gap {:.1} ms), v2i delivery {:.4}, max staleness {:.1} ms, report {}, log {}",
        report.scenario,
        report.seed,
        report.handovers.total,
        max_gap_ms,
        v2i_ratio,
        report.staleness_ms.max_ms,
        out.display(),
        log_path.display(),
    );
    EXIT_OK
}

fn cmd_replay(args: &CommonArgs) -> u8 {
    let records = match parse_log_file(&args.scenario) {
        Ok(records) => records,
        Err(e) => {
            eprintln!("error: malformed log: {e}");
            return EXIT_INPUT;
        }
    };
    let bytes = std::fs::read(&args.scenario).expect("log was just readable");
    let digest = hex::encode(Sha256::digest(&bytes));

    let report = match collect_metrics(&records, &digest) {
        Ok(report) => report,
        Err(e) => {
            eprintln!("error: log fails consistency checks: {e}");
            return EXIT_DOMAIN;
        }
    };
    let outcome = match replay::reconstruct(&records) {
        Ok(outcome) => outcome,
        Err(e) => {
            eprintln!("error: malformed log: {e}");
            return EXIT_INPUT;
        }
    };
    let mut mismatches = Vec::new();
    for violation in &outcome.uniqueness_violations {
        mismatches.push(format!("ownership uniqueness: {violation}"));
    }
    for violation in &outcome.monotonicity_violations {
        mismatches.push(format!("stamp monotonicity: {violation}"));
    }

    // Compare against the original report sitting next to the log, byte
    // for byte in whichever format it was written.
    let mut compared = false;
    for candidate in report_paths_for(&args.scenario) {
        let Ok(original) = std::fs::read(&candidate) else {
            continue;
        };
        compared = true;
        let format = if candidate.extension().is_some_and(|e| e == "csv") {
            Format::Csv
        } else {
            Format::Json
        };
        let recomputed = render_report(&report, format);
        if original == recomputed.into_bytes() {
            println!("match: {}", candidate.display());
        } else {
            mismatches.push(format!(
                "report {} differs from the log's recomputation",
                candidate.display()
            ));
        }
        break;
    }
    if !compared {
        println!("no original report found next to the log; recomputed only");
    }

    if let Some(out) = &args.out {
        if let Err(code) = write_out(out, &render_report(&report, args.format)) {
            return code;
        }
    }
    println!(
        "replay: {} records, {} nodes reconstructed, {} handovers, digest {}",
        records.len(),
        outcome.views.len(),
        report.handovers.total,
        &digest[..12.min(digest.len())],
    );
    if mismatches.is_empty() {
        EXIT_OK
    } else {
        for m in &mismatches {
            println!("mismatch: {m}");
        }
        EXIT_DOMAIN
    }
}
