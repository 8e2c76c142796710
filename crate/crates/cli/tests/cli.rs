use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn ttvprune(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttvprune"))
        .env_remove("TTVPRUNE_OUT_DIR")
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read(dir: &TempDir, name: &str) -> String {
    std::fs::read_to_string(dir.path().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn simulate_default_schedule_writes_stage_counts() {
    let dir = TempDir::new().unwrap();
    let o = ttvprune(dir.path(), &["simulate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stages = read(&dir, "stages.csv");
    let counts: Vec<&str> = stages.lines().skip(1).map(|l| l.split(',').nth(6).unwrap()).collect();
    assert_eq!(counts, ["56", "40", "8"]);
    for f in ["scores.csv", "transitions.csv", "layer_summary.csv", "report.md"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn unit_ratios_report_bit_identity() {
    let dir = TempDir::new().unwrap();
    let o = ttvprune(dir.path(), &["simulate", "--ratios", "1.0"]);
    assert!(o.status.success());
    assert!(read(&dir, "report.md").contains("bit-identical"));
}

#[test]
fn ttv_only_scores_have_no_iga_column() {
    let dir = TempDir::new().unwrap();
    let o = ttvprune(dir.path(), &["simulate", "--mode", "ttv_only"]);
    assert!(o.status.success());
    let scores = read(&dir, "scores.csv");
    let header = scores.lines().next().unwrap();
    assert!(header.contains("accumulated_ttv"));
    assert!(!header.split(',').any(|c| c == "iga"), "{header}");
}

#[test]
fn flops_percentages() {
    let dir = TempDir::new().unwrap();
    for (args, pct) in [
        (vec!["flops"], "= 40.8%"),
        (vec!["flops", "--preset", "llava-next-7b"], "= 40.0%"),
        (vec!["flops", "--schedule", "none"], "= 100.0%"),
    ] {
        let o = ttvprune(dir.path(), &args);
        assert!(o.status.success());
        assert!(stdout(&o).contains(pct), "{args:?}: {}", stdout(&o));
    }
    assert!(dir.path().join("flops.csv").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    for args in [
        vec!["flops", "--preset", "bogus"],
        vec!["ablate", "--suite", "nope"],
        vec!["bias-stats", "--samples", "0"],
    ] {
        let o = ttvprune(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn exported_trace_inspects_and_scores() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("toy.ttvt");
    let t = trace.to_str().unwrap();
    let o = ttvprune(dir.path(), &["export-toy", "--output", t]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = ttvprune(dir.path(), &["inspect", t, "--json"]);
    assert!(o.status.success());
    let manifest: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(manifest["n_layers"], 14);

    let o = ttvprune(dir.path(), &["score", "--trace", t]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("56/40/8"));
    let streamed = read(&dir, "scores.csv");
    let o = ttvprune(dir.path(), &["score", "--trace", t, "--whole-file"]);
    assert!(o.status.success());
    assert_eq!(streamed, read(&dir, "scores.csv"));
}

#[test]
fn minimal_trace_rejects_wider_window() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("min.ttvt");
    let t = trace.to_str().unwrap();
    assert!(ttvprune(dir.path(), &["export-toy", "--capture", "minimal", "--output", t]).status.success());
    let o = ttvprune(dir.path(), &["score", "--trace", t, "--accumulation-shift", "3"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&o.stderr).contains("incomplete trace"));
}

#[test]
fn corrupt_trace_exits_with_four() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("c.ttvt");
    let t = trace.to_str().unwrap();
    assert!(ttvprune(dir.path(), &["export-toy", "--output", t]).status.success());
    let mut bytes = std::fs::read(&trace).unwrap();
    let n = bytes.len();
    bytes[n - 5] ^= 0xff;
    std::fs::write(&trace, bytes).unwrap();
    assert_eq!(ttvprune(dir.path(), &["score", "--trace", t, "--whole-file"]).status.code(), Some(4));
}

#[test]
fn out_dir_from_environment() {
    let dir = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ttvprune"))
        .env("TTVPRUNE_OUT_DIR", dir.path())
        .args(["flops"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("flops.csv").exists());
}
