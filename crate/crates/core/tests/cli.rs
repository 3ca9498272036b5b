//! The command-line contract: exit codes, file outputs, byte-stable
//! determinism, format equality, and replay verification.

// Scenario setup reads best as a default followed by field mutations.
#![allow(clippy::field_reassign_with_default)]

use rsmu_sim::sim::config::{EventConfig, FlowConfig, ScenarioConfig};
use rsmu_sim::sim::metrics::{report_to_csv, MetricsReport};
use rsmu_sim::types::Direction;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rsmu-sim"))
}

fn run_cli(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary launches")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn demo_config(seed: u64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.name = "cli-demo".to_string();
    cfg.seed = Some(seed);
    cfg.duration_s = 30.0;
    cfg.geometry.mainline_length_m = 2_400.0;
    cfg.flows.push(FlowConfig {
        carriageway: Direction::Forward,
        count: 4,
        headway_s: 2.0,
        ..FlowConfig::default()
    });
    cfg.events.push(EventConfig {
        id: 1,
        kind: rsmu_sim::globalview::EventKind::Obstacle,
        carriageway: Direction::Forward,
        station_m: 1_000.0,
        onset_s: 8.0,
        clear_s: Some(20.0),
    });
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &ScenarioConfig) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

#[test]
fn plan_reports_coverage_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_config(dir.path(), "demo.json", &demo_config(1));

    let ok = run_cli(&["plan", "--scenario", scenario.to_str().unwrap()]);
    assert_eq!(code(&ok), 0, "stderr: {}", String::from_utf8_lossy(&ok.stderr));
    assert!(stdout(&ok).contains("coverage valid"));

    // Nodes forced far apart leave stations more than an effective range
    // from their owner: domain-invalid, every gap listed.
    let mut sparse = demo_config(1);
    sparse.deployment.spacing_m = 2_000.0;
    let sparse_path = write_config(dir.path(), "sparse.json", &sparse);
    let bad = run_cli(&["plan", "--scenario", sparse_path.to_str().unwrap()]);
    assert_eq!(code(&bad), 1);
    assert!(stdout(&bad).contains("uncovered"));

    let missing = run_cli(&["plan", "--scenario", "/nonexistent/x.json"]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn validate_distinguishes_domain_errors_from_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_config(dir.path(), "demo.json", &demo_config(1));
    assert_eq!(code(&run_cli(&["validate", "--scenario", scenario.to_str().unwrap()])), 0);

    // Well-formed file, bad content (no seed anywhere): domain-invalid.
    let mut unseeded = demo_config(1);
    unseeded.seed = None;
    let unseeded_path = write_config(dir.path(), "unseeded.json", &unseeded);
    let invalid = run_cli(&["validate", "--scenario", unseeded_path.to_str().unwrap()]);
    assert_eq!(code(&invalid), 1);
    assert!(stdout(&invalid).contains("seed"));

    // A seed on the command line repairs it: the override wins.
    let seeded = run_cli(&[
        "validate",
        "--scenario",
        unseeded_path.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert_eq!(code(&seeded), 0);

    // Not a scenario at all: input error.
    let garbage = dir.path().join("garbage.json");
    std::fs::write(&garbage, "{\"schema_version\": \"nope\"").unwrap();
    assert_eq!(code(&run_cli(&["validate", "--scenario", garbage.to_str().unwrap()])), 2);
}

#[test]
fn run_emits_report_log_and_summary_and_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_config(dir.path(), "demo.json", &demo_config(42));
    let out_a = dir.path().join("a.json");
    let out_b = dir.path().join("b.json");

    let first = run_cli(&[
        "run",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out_a.to_str().unwrap(),
    ]);
    assert_eq!(code(&first), 0, "stderr: {}", String::from_utf8_lossy(&first.stderr));
    let summary = stdout(&first);
    assert!(summary.contains("handovers"), "summary line: {summary}");
    assert!(summary.contains("delivery"));
    assert!(summary.contains("staleness"));

    let second = run_cli(&[
        "run",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert_eq!(code(&second), 0);

    let report_a = std::fs::read(&out_a).unwrap();
    let report_b = std::fs::read(&out_b).unwrap();
    assert!(!report_a.is_empty());
    assert_eq!(report_a, report_b, "reports must be byte-identical");

    let log_a = std::fs::read(dir.path().join("a.log.jsonl")).unwrap();
    let log_b = std::fs::read(dir.path().join("b.log.jsonl")).unwrap();
    assert_eq!(log_a, log_b, "logs must be byte-identical");

    // A different seed produces a different log digest.
    let other = write_config(dir.path(), "other.json", &demo_config(43));
    let out_c = dir.path().join("c.json");
    let third = run_cli(&[
        "run",
        "--scenario",
        other.to_str().unwrap(),
        "--out",
        out_c.to_str().unwrap(),
    ]);
    assert_eq!(code(&third), 0);
    let a: MetricsReport = serde_json::from_slice(&report_a).unwrap();
    let c: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&out_c).unwrap()).unwrap();
    assert_ne!(a.digest_sha256, c.digest_sha256);
}

#[test]
fn csv_report_carries_exactly_the_json_values() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_config(dir.path(), "demo.json", &demo_config(7));
    let json_out = dir.path().join("r.json");
    let csv_out = dir.path().join("r.csv");

    assert_eq!(
        code(&run_cli(&[
            "run",
            "--scenario",
            scenario.to_str().unwrap(),
            "--out",
            json_out.to_str().unwrap(),
            "--format",
            "json",
        ])),
        0
    );
    // Same scenario and seed: the CSV run sees identical traffic.
    assert_eq!(
        code(&run_cli(&[
            "run",
            "--scenario",
            scenario.to_str().unwrap(),
            "--out",
            csv_out.to_str().unwrap(),
            "--format",
            "csv",
        ])),
        0
    );

    let report: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(&json_out).unwrap()).unwrap();
    let csv = std::fs::read_to_string(&csv_out).unwrap();
    assert_eq!(
        csv,
        report_to_csv(&report),
        "CSV must flatten the very same values the JSON carries"
    );
    assert!(csv.starts_with("key,value\n"));
}

#[test]
fn replay_matches_fresh_runs_and_flags_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_config(dir.path(), "demo.json", &demo_config(11));
    let out = dir.path().join("r.json");
    assert_eq!(
        code(&run_cli(&[
            "run",
            "--scenario",
            scenario.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])),
        0
    );
    let log = dir.path().join("r.log.jsonl");

    // Untouched log: metrics recompute to the identical report.
    let good = run_cli(&["replay", "--scenario", log.to_str().unwrap()]);
    assert_eq!(code(&good), 0, "stderr: {}", String::from_utf8_lossy(&good.stderr));
    assert!(stdout(&good).contains("match"));

    // Delete one interior line: the dense sequence breaks and the replay
    // refuses the log.
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let dropped: Vec<&str> = lines
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != lines.len() / 2)
        .map(|(_, l)| *l)
        .collect();
    let cut_log = dir.path().join("cut.log.jsonl");
    std::fs::write(&cut_log, dropped.join("\n") + "\n").unwrap();
    let cut = run_cli(&["replay", "--scenario", cut_log.to_str().unwrap()]);
    assert_eq!(code(&cut), 1, "a gap in the record stream is domain-invalid");

    // Corrupt one line outright: malformed input.
    let mut mangled: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
    let mid = mangled.len() / 2;
    mangled[mid] = "{not json".to_string();
    let bad_log = dir.path().join("bad.log.jsonl");
    std::fs::write(&bad_log, mangled.join("\n") + "\n").unwrap();
    assert_eq!(code(&run_cli(&["replay", "--scenario", bad_log.to_str().unwrap()])), 2);

    // A log with no sibling report still replays.
    let orphan = dir.path().join("orphan.log.jsonl");
    std::fs::copy(&log, &orphan).unwrap();
    let alone = run_cli(&["replay", "--scenario", orphan.to_str().unwrap()]);
    assert_eq!(code(&alone), 0);
    assert!(stdout(&alone).contains("recomputed only"));

    // An empty log is a valid, empty replay.
    let empty = dir.path().join("empty.log.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(code(&run_cli(&["replay", "--scenario", empty.to_str().unwrap()])), 0);
}

#[test]
fn replay_detects_an_edited_report() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_config(dir.path(), "demo.json", &demo_config(19));
    let out = dir.path().join("r.json");
    assert_eq!(
        code(&run_cli(&[
            "run",
            "--scenario",
            scenario.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])),
        0
    );

    // Nudge one value in the stored report; the recomputation no longer
    // agrees byte for byte.
    let text = std::fs::read_to_string(&out).unwrap();
    let edited = text.replacen("\"schema_version\": 1", "\"schema_version\": 1 ", 1);
    assert_ne!(text, edited, "the edit must change the bytes");
    std::fs::write(&out, edited).unwrap();

    let log = dir.path().join("r.log.jsonl");
    let replay = run_cli(&["replay", "--scenario", log.to_str().unwrap()]);
    assert_eq!(code(&replay), 1);
    assert!(stdout(&replay).contains("mismatch"));
}

#[test]
fn tick_trace_flag_writes_fleet_rows() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_config(dir.path(), "demo.json", &demo_config(3));
    let out = dir.path().join("r.json");
    let trace = dir.path().join("fleet.jsonl");
    let output = bin()
        .args([
            "run",
            "--scenario",
            scenario.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--tick-trace",
            trace.to_str().unwrap(),
        ])
        .env("RSMU_SIM_LOG_LEVEL", "warn")
        .output()
        .expect("binary launches");
    assert_eq!(code(&output), 0, "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let text = std::fs::read_to_string(&trace).unwrap();
    assert!(!text.is_empty());
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(first.get("t_us").is_some());
    assert!(first.get("vehicles").is_some());
}

#[test]
fn profile_override_switches_channel_presets() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_config(dir.path(), "demo.json", &demo_config(5));
    let out_dsrc = dir.path().join("dsrc.json");
    let out_cv2x = dir.path().join("cv2x.json");

    for (out, profile) in [(&out_dsrc, "dsrc"), (&out_cv2x, "cv2x")] {
        assert_eq!(
            code(&run_cli(&[
                "run",
                "--scenario",
                scenario.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--profile",
                profile,
            ])),
            0
        );
    }
    let dsrc: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(&out_dsrc).unwrap()).unwrap();
    let cv2x: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(&out_cv2x).unwrap()).unwrap();
    assert_eq!(dsrc.profile, "dsrc");
    assert_eq!(cv2x.profile, "cv2x");
    assert!(
        cv2x.delivery_ratio_v2i > dsrc.delivery_ratio_v2i,
        "the low-loss preset should deliver more: {} vs {}",
        cv2x.delivery_ratio_v2i,
        dsrc.delivery_ratio_v2i
    );
}
