//! End-to-end checks of the command-line interface.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_photoion"))
}

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("photoion_cli_{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn preset_prints_parseable_toml() {
    let out = bin().args(["preset", "er2"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("mode = \"pulsed\""));
    assert!(text.contains("[schedule]"));
    // the printed preset is itself a valid config
    let dir = temp_dir("preset");
    let path = dir.join("er2.toml");
    std::fs::write(&path, &text).unwrap();
    let out = bin()
        .args([
            "simulate",
            path.to_str().unwrap(),
            "--cycles",
            "5000",
            "--seed",
            "3",
            "--out",
            dir.join("run").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_writes_expected_artifacts() {
    let dir = temp_dir("simulate");
    let out = bin()
        .args([
            "simulate",
            "preset:control",
            "--cycles",
            "150000",
            "--seed",
            "11",
            "--out",
            dir.to_str().unwrap(),
            "--threads",
            "2",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["events.csv", "timelines.csv", "analysis.json", "manifest.json", "config.toml"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let analysis: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("analysis.json")).unwrap())
            .unwrap();
    assert_eq!(analysis["mode"], "control");
    // control runs derive a finite background threshold
    assert!(analysis["derived_t_min"].as_f64().unwrap() > 0.0);

    // stored traces convert back to CSV
    let traces: Vec<_> = std::fs::read_dir(dir.join("traces")).unwrap().collect();
    assert!(!traces.is_empty());
    let first = traces[0].as_ref().unwrap().path();
    let csv = dir.join("trace.csv");
    let out = bin()
        .args(["export-trace", first.to_str().unwrap(), csv.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("time_s,I_V,Q_V"));
}

#[test]
fn analyze_fits_lifetimes_from_csv() {
    let dir = temp_dir("analyze");
    // synthesize a plausible events file
    let mut rows = String::from("cycle_id,detected,t_ion_s,sigma_t_s,duration_s,amplitude_V,residual\n");
    for i in 0..400 {
        let u = (i as f64 + 0.5) / 400.0;
        let t = 343e-9 - 492e-9 * (1.0 - u).ln();
        rows.push_str(&format!("{i},true,{t},5.6e-8,,0.0119,0.0014\n"));
    }
    let events = dir.join("events.csv");
    std::fs::write(&events, rows).unwrap();
    let out = bin()
        .args([
            "analyze",
            events.to_str().unwrap(),
            "--t-min",
            "3.43e-7",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_slice(&out.stdout).unwrap();
    let tau = summary["lifetime_mle"]["tau_ex"].as_f64().unwrap();
    assert!((tau - 492e-9).abs() < 30e-9, "tau = {tau}");
}

#[test]
fn reproduce_fig1b_and_unknown_tag() {
    let dir = temp_dir("figures");
    let out = bin()
        .args(["reproduce", "fig1b", "--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.join("fig1b_reflection.csv")).unwrap();
    assert!(csv.starts_with("frequency_hz,gamma_magnitude"));
    // the dip reaches below 0.05 near the configured resonance
    let min = csv
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(1)?.parse::<f64>().ok())
        .fold(f64::INFINITY, f64::min);
    assert!(min < 0.05, "dip floor {min}");

    let out = bin()
        .args(["reproduce", "nope", "--out", dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("fig1b") && err.contains("fig4c"), "usage must list tags: {err}");
}

#[test]
fn calibrate_noise_reports_sigma() {
    let out = bin()
        .args(["calibrate-noise", "preset:er2", "--target-snr", "9.6"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let sigma = v["noise_sigma_per_sample_V"].as_f64().unwrap();
    assert!(sigma > 0.0 && sigma < 0.1);
}

#[test]
fn missing_config_fails_with_nonzero_exit() {
    let out = bin().args(["simulate", "/none/such.toml"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
