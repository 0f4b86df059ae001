use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sagnac(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sagnac"))
        .args(args)
        .current_dir(dir)
        .env_remove("SLIS_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr_records(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .filter(|l| l.starts_with('{'))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn csv_column(path: &Path, name: &str) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == name).unwrap();
    lines
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect()
}

const FAST: &str =
    "duration_s = 3.0\n[calibration]\nenabled = false\n[session]\npulses_per_window = 100000\n";

#[test]
fn wm_staircase_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = sagnac(
        &["wm", "--masses", "0.1,0.2,0.3", "--out-dir", "o", "--quiet"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out.stderr.is_empty());
    let dtau = csv_column(
        &dir.path().join("o/icr_vs_mass.csv"),
        "inferred_delta_tau_s",
    );
    assert_eq!(dtau.len(), 3);
    for (k, d) in dtau.iter().enumerate() {
        let expected = 9.81e-18 * (k + 1) as f64;
        assert!(
            (d - expected).abs() < 1e-20 * (k + 1) as f64,
            "step {k}: {d:e}"
        );
    }
}

#[test]
fn perceive_then_localize_the_written_trace() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("impact.toml"),
        "[[disturbance]]\nkind = \"transient_impact\"\nposition_m = 5000.0\nstart_time_s = 0.025\n",
    )
    .unwrap();
    let out = sagnac(
        &[
            "perceive",
            "--config",
            "impact.toml",
            "--out-dir",
            "p",
            "--seed",
            "5",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("p/trace.csv").exists());
    let out = sagnac(
        &[
            "localize",
            "--trace",
            "p/trace.csv",
            "--out-dir",
            "l",
            "--quiet",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("l/report.json")).unwrap())
            .unwrap();
    let x = report["localization_reports"][0]["position_x_m"]
        .as_f64()
        .unwrap();
    assert!((x - 5_000.0).abs() < 50.0, "x = {x}");
    assert_eq!(report["method"], "broadband");
}

#[test]
fn localize_reads_a_sweep_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("pzt.toml"),
        "[perception.sweep]\nstop_hz = 25000.0\n[[disturbance]]\nkind = \"pzt_sinusoid\"\nposition_m = 5000.0\n",
    )
    .unwrap();
    let out = sagnac(
        &[
            "perceive",
            "--config",
            "pzt.toml",
            "--out-dir",
            "p",
            "--quiet",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = sagnac(
        &[
            "localize",
            "--sweep",
            "p/amplitude_vs_frequency.csv",
            "--out-dir",
            "l",
            "--quiet",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let a = fs::read_to_string(dir.path().join("p/report.json")).unwrap();
    let b = fs::read_to_string(dir.path().join("l/report.json")).unwrap();
    let pos = |s: &str| {
        let v: serde_json::Value = serde_json::from_str(s).unwrap();
        v["localization_reports"][0]["position_x_m"]
            .as_f64()
            .unwrap()
    };
    assert_eq!(pos(&a), pos(&b));
    assert!((pos(&a) - 5_000.0).abs() < 50.0);
}

#[test]
fn integrated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("scenario.toml"),
        "seed = 3\nduration_s = 16.0\nauto_reset = false\n[[disturbance]]\nkind = \"pzt_sinusoid\"\n\
         position_m = 5000.0\nstart_time_s = 2.0\n[perception.sweep]\nstop_hz = 25000.0\n",
    )
    .unwrap();
    let args = |o: &'static str| {
        [
            "integrated",
            "--config",
            "scenario.toml",
            "--seed",
            "7",
            "--out-dir",
            o,
            "--quiet",
        ]
    };
    let first = sagnac(&args("a"), dir.path());
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let second = sagnac(&args("b"), dir.path());
    assert_eq!(first.stdout, second.stdout);
    for name in [
        "report.json",
        "events.jsonl",
        "qber_vs_time.csv",
        "config_echo.toml",
    ] {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
    let log = fs::read_to_string(dir.path().join("a/events.jsonl")).unwrap();
    let kinds: Vec<String> = log
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["event"]["kind"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .filter(|k| k != "qber_window")
        .collect();
    assert_eq!(
        kinds,
        [
            "breach_detected",
            "disturbance_significant",
            "localization_done",
            "report_delivered"
        ]
    );
    // The echo has the seed override and reproduces the run.
    let echo = fs::read_to_string(dir.path().join("a/config_echo.toml")).unwrap();
    assert!(echo.starts_with("seed = 7\n"));
    let third = sagnac(
        &[
            "integrated",
            "--config",
            "a/config_echo.toml",
            "--out-dir",
            "c",
            "--quiet",
        ],
        dir.path(),
    );
    assert!(third.status.success());
    assert_eq!(
        fs::read(dir.path().join("a/report.json")).unwrap(),
        fs::read(dir.path().join("c/report.json")).unwrap()
    );
}

#[test]
fn validation_errors_exit_2_with_records() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.toml"),
        "[channel]\nlength_m = -1.0\ncolour = 3\n",
    )
    .unwrap();
    let out = sagnac(&["qkd", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let recs = stderr_records(&out);
    assert_eq!(recs.len(), 2);
    assert!(recs
        .iter()
        .any(|r| r["key"] == "channel.length_m" && r["kind"] == "unit_violation"));
    assert!(recs
        .iter()
        .any(|r| r["key"] == "channel.colour" && r["kind"] == "unknown_key"));

    let out = sagnac(&["qkd", "--config", "missing.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_records(&out)[0]["kind"], "missing_file");

    let out = sagnac(&["localize", "--trace", "missing.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn blind_spot_is_an_analysis_failure() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("mid.toml"),
        "[[disturbance]]\nkind = \"transient_impact\"\nposition_m = 15000.0\nstart_time_s = 0.025\n",
    )
    .unwrap();
    let out = sagnac(
        &[
            "perceive",
            "--config",
            "mid.toml",
            "--out-dir",
            "o",
            "--quiet",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_records(&out)[0]["error"], "analysis");
    // The report is still written, with the diagnostic.
    let report = fs::read_to_string(dir.path().join("o/report.json")).unwrap();
    assert!(report.contains("found no nulls"));
}

#[test]
fn env_var_sets_the_default_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sagnac"))
        .args(["wm", "--masses", "0.1", "--quiet"])
        .current_dir(dir.path())
        .env("SLIS_OUT_DIR", "from-env")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from-env/icr_vs_mass.csv").exists());
}

#[test]
fn qkd_emits_one_row_per_window() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("fast.toml"), FAST).unwrap();
    let out = sagnac(
        &["qkd", "--config", "fast.toml", "--out-dir", "o", "--quiet"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let t = csv_column(&dir.path().join("o/qber_vs_time.csv"), "window_start_s");
    assert_eq!(t, vec![0.0, 1.0, 2.0]);
}

#[test]
fn sweep_keeps_parameter_order() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("fast.toml"), FAST).unwrap();
    let out = sagnac(
        &[
            "sweep",
            "--config",
            "fast.toml",
            "--key",
            "duration_s",
            "--values",
            "3.0,1.0,2.0",
            "--out-dir",
            "o",
            "--quiet",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = fs::read_to_string(dir.path().join("o/sweep_summary.csv")).unwrap();
    let values: Vec<&str> = summary
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(values, ["\"3.0\"", "\"1.0\"", "\"2.0\""]);
    for (i, windows) in [3, 1, 2].iter().enumerate() {
        let report =
            fs::read_to_string(dir.path().join(format!("o/run_{i:03}/report.json"))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&report).unwrap();
        assert_eq!(v["key_records"].as_array().unwrap().len(), *windows);
    }
    let bad = sagnac(
        &[
            "sweep",
            "--config",
            "fast.toml",
            "--key",
            "duration_s",
            "--values",
            "-1",
        ],
        dir.path(),
    );
    assert_eq!(bad.status.code(), Some(2));
}
