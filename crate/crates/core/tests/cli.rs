use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use isolexec::bench::report::{PLOT_FILES, SUMMARY_FILE};
use isolexec::bench::{ExperimentResult, SWEEP_CSV_HEADER};
use serde_json::Value;

fn isolexec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isolexec"))
        .args(args)
        .output()
        .expect("binary starts")
}

fn description(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("descriptions")
        .join(name)
        .display()
        .to_string()
}

#[test]
fn validate_exit_codes() {
    assert_eq!(
        isolexec(&["validate", &description("benchmark_pair_n4.json")])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        isolexec(&["validate", &description("shared_group.json")])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        isolexec(&["validate", &description("cyclic.json")])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        isolexec(&["validate", "/nonexistent/system.json"])
            .status
            .code(),
        Some(2)
    );

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(
        isolexec(&["validate", bad.to_str().unwrap()]).status.code(),
        Some(2)
    );
}

#[test]
fn validate_json_lists_order_and_violations() {
    let out = isolexec(&["validate", "--json", &description("benchmark_pair_n4.json")]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["ok"], true);
    assert_eq!(v["topo_order"].as_array().unwrap().len(), 8);

    let out = isolexec(&["validate", "--json", &description("shared_group.json")]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["ok"], false);
    assert!(!v["errors"].as_array().unwrap().is_empty());
}

#[test]
fn probe_prints_capabilities() {
    let out = isolexec(&["probe"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["core_count"].as_u64().unwrap() >= 1);
    for key in ["deadline", "fifo_rt", "fair"] {
        assert!(v[key].is_string(), "{key} missing");
    }
}

#[test]
fn run_emits_result_json() {
    let out = isolexec(&[
        "run",
        "--executor",
        "ste",
        "--n",
        "2",
        "--duration",
        "5",
        "--warmup",
        "0",
        "--json",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r: ExperimentResult = serde_json::from_slice(&out.stdout).unwrap();
    assert!(r.valid, "{:?}", r.problems);
    assert_eq!(r.threads, 1);
    assert_eq!(r.callbacks.len(), 4);
    assert!(r.report.user_kernel_switches_per_s > 0.0);
    assert_eq!(r.report.counters.delivery_crossings(), 0);
}

#[test]
fn run_rejects_bad_input() {
    assert_eq!(isolexec(&["run", "--duration", "1"]).status.code(), Some(2));
    assert_eq!(isolexec(&["run", "--n", "0"]).status.code(), Some(2));
    assert_eq!(
        isolexec(&["run", "--mode", "remote"]).status.code(),
        Some(2)
    );

    let dir = tempfile::tempdir().unwrap();
    let taken = dir.path().join("result.json");
    fs::write(&taken, "{}").unwrap();
    let out = isolexec(&["run", "--out", taken.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(fs::read_to_string(&taken).unwrap(), "{}");
}

#[test]
fn config_file_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.toml");
    fs::write(&cfg, "[experiment]\nn_callbacks = 3\nwobble = true\n").unwrap();
    let out = isolexec(&["--config", cfg.to_str().unwrap(), "run"]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(&cfg, "[experiment]\nduration_s = 0.5\n").unwrap();
    let out = isolexec(&[
        "--config",
        cfg.to_str().unwrap(),
        "sweep",
        "--out",
        dir.path().join("s.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_writes_plots_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let mut body = format!("{SWEEP_CSV_HEADER}\n");
    for (executor, cs) in [("ste", 1000.0), ("cie", 2500.0)] {
        for mode in ["intra", "inter"] {
            for n in [4, 24] {
                let threads = if executor == "ste" { 1 } else { 2 * n };
                body += &format!(
                    "{executor},{threads},{mode},{n},{},{},{},0,true\n",
                    cs * 0.9,
                    cs * n as f64,
                    8 << 20
                );
            }
        }
    }
    fs::write(&csv, body).unwrap();
    let out_dir = dir.path().join("plots");
    let out = isolexec(&[
        "report",
        csv.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in PLOT_FILES {
        let svg = fs::read_to_string(out_dir.join(f)).unwrap();
        assert!(svg.contains("<polyline"));
    }
    let summary = fs::read_to_string(out_dir.join(SUMMARY_FILE)).unwrap();
    assert!(
        summary.contains("max cie/ste ratio, intra, context switches/s: 2.500"),
        "{summary}"
    );
    assert!(
        summary.contains("flatness, inter, context switches/s: ratio(n=24) / ratio(n=4) = 1.000"),
        "{summary}"
    );
}

#[test]
fn report_rejects_foreign_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("other.csv");
    fs::write(&csv, "a,b,c\n1,2,3\n").unwrap();
    assert_eq!(
        isolexec(&["report", csv.to_str().unwrap()]).status.code(),
        Some(2)
    );
    fs::write(&csv, format!("{SWEEP_CSV_HEADER}\n")).unwrap();
    assert_eq!(
        isolexec(&["report", csv.to_str().unwrap()]).status.code(),
        Some(2)
    );
}
