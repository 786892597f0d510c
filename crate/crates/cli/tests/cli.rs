use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn tilt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tilt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "synth", "--classes", "10", "--dim", "16", "--per-class", "30", "--seed", "3", "--out", "s.tlt",
    ];
    args.extend_from_slice(extra);
    let out = tilt(dir, &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn body(csv: &str, mask_seconds: bool) -> Vec<String> {
    csv.lines()
        .skip(1)
        .map(|l| {
            if mask_seconds {
                let mut cells: Vec<&str> = l.split(',').collect();
                let last = cells.len() - 1;
                cells[last] = "-";
                cells.join(",")
            } else {
                l.to_string()
            }
        })
        .collect()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

const EPISODE_FLAGS: [&str; 10] = ["--ways", "5", "--shots", "5", "--queries", "15", "--episodes", "100", "--seed", "42"];

#[test]
fn synth_round_trip_and_determinism() {
    let dir = TempDir::new().unwrap();
    let out = tilt(dir.path(), &["synth", "--classes", "5", "--dim", "16", "--per-class", "50", "--seed", "7", "--out", "s.tlt"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("n=250 d=16 C=5"));
    let first = std::fs::read(dir.path().join("s.tlt")).unwrap();
    let set = tilt_core::latent_store::load_dataset(dir.path().join("s.tlt"), tilt_core::Format::Binary).unwrap();
    assert_eq!(set.len(), 250);
    tilt(dir.path(), &["synth", "--classes", "5", "--dim", "16", "--per-class", "50", "--seed", "7", "--out", "s.tlt"]);
    assert_eq!(first, std::fs::read(dir.path().join("s.tlt")).unwrap());
}

#[test]
fn synth_jsonl_by_extension() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&tilt(dir.path(), &["synth", "--classes", "3", "--per-class", "4", "--out", "s.jsonl"])), 0);
    let set = tilt_core::latent_store::load_dataset(dir.path().join("s.jsonl"), tilt_core::Format::Jsonl).unwrap();
    assert_eq!(set.len(), 12);
}

#[test]
fn usage_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let out = tilt(dir.path(), &["synth", "--classes", "1", "--out", "x.tlt"]);
    assert_eq!(code(&out), 2);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert_eq!(code(&tilt(dir.path(), &["bench", "--data", "s.tlt", "--unknown"])), 2);
    assert_eq!(code(&tilt(dir.path(), &["bench"])), 2);
    assert_eq!(code(&tilt(dir.path(), &["bench", "--data", "s.tlt", "--mode", "warp"])), 2);

    synth(dir.path(), &[]);
    assert_eq!(code(&tilt(dir.path(), &["bench", "--data", "s.tlt", "--ways", "11"])), 2);
    assert_eq!(code(&tilt(dir.path(), &["bench", "--data", "s.tlt", "--shots", "25", "--queries", "10"])), 2);
    assert_eq!(code(&tilt(dir.path(), &["bench", "--data", "s.tlt", "--tau", "0"])), 2);
    assert_eq!(code(&tilt(dir.path(), &["bench", "--data", "s.tlt", "--lambda", "1", "--c", "0.5"])), 2);
    for grid in ["1:2", "0:1:0", "x:1:1", "2:1:1"] {
        let out = tilt(dir.path(), &["ablate", "--data", "s.tlt", "--lambda-grid", grid]);
        assert_eq!(code(&out), 2, "grid {grid}");
    }
}

#[test]
fn runtime_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&tilt(dir.path(), &["bench", "--data", "missing.tlt"])), 1);
    std::fs::write(dir.path().join("bad.tlt"), b"TLT").unwrap();
    assert_eq!(code(&tilt(dir.path(), &["bench", "--data", "bad.tlt"])), 1);
}

#[test]
fn bench_writes_csv_and_json() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &[]);
    let mut args = vec!["bench", "--data", "s.tlt", "--mode", "frozen", "--out", "f.csv", "--json-out", "f.json"];
    args.extend_from_slice(&EPISODE_FLAGS);
    let out = tilt(dir.path(), &args);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains(" ± "));
    let csv = read(dir.path(), "f.csv");
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# config: {"));
    assert!(lines[0].contains("\"seed\":42"));
    assert_eq!(lines[1], tilt_core::report::CSV_HEADER);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2].split(',').nth(1), Some("frozen"));
    let json: serde_json::Value = serde_json::from_str(&read(dir.path(), "f.json")).unwrap();
    assert_eq!(json["runs"][0]["accuracies"].as_array().unwrap().len(), 100);
}

fn mean_of(dir: &Path, csv: &str) -> String {
    read(dir, csv).lines().nth(2).unwrap().split(',').nth(9).unwrap().to_string()
}

#[test]
fn zero_lambda_reproduces_frozen_mean() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &["--corrupt-fraction", "0.2"]);
    let mut frozen = vec!["bench", "--data", "s.tlt", "--mode", "frozen", "--out", "f.csv"];
    frozen.extend_from_slice(&EPISODE_FLAGS);
    assert_eq!(code(&tilt(dir.path(), &frozen)), 0);
    for score in ["label", "geom", "conf", "label+geom", "conf+geom"] {
        let mut tilted = vec![
            "bench", "--data", "s.tlt", "--mode", "tilted-inductive", "--lambda", "0", "--score", score, "--out", "t.csv",
        ];
        tilted.extend_from_slice(&EPISODE_FLAGS);
        assert_eq!(code(&tilt(dir.path(), &tilted)), 0);
        assert_eq!(mean_of(dir.path(), "f.csv"), mean_of(dir.path(), "t.csv"), "score {score}");
    }
}

#[test]
fn moment_target_mode_runs() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &[]);
    let mut args = vec!["bench", "--data", "s.tlt", "--mode", "tilted-inductive", "--c", "0.99", "--out", "c.csv"];
    args.extend_from_slice(&EPISODE_FLAGS);
    assert_eq!(code(&tilt(dir.path(), &args)), 0);
    assert_eq!(read(dir.path(), "c.csv").lines().nth(2).unwrap().split(',').nth(3), Some("c=0.99"));
    let mut args = vec!["bench", "--data", "s.tlt", "--mode", "tilted-inductive", "--c", "2.0"];
    args.extend_from_slice(&EPISODE_FLAGS);
    let out = tilt(dir.path(), &args);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("episode 0"));
}

#[test]
fn ablate_row_counts() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &[]);
    let cases = [("0:0:1", 1usize), ("0.25:2.0:0.25", 8), ("0:1:0.3", 4)];
    for (grid, rows) in cases {
        let out = tilt(
            dir.path(),
            &["ablate", "--data", "s.tlt", "--mode", "tilted-inductive", "--lambda-grid", grid, "--episodes", "5", "--out", "a.csv"],
        );
        assert_eq!(code(&out), 0);
        assert_eq!(body(&read(dir.path(), "a.csv"), false).len(), rows + 1, "grid {grid}");
    }
    let csv = read(dir.path(), "a.csv");
    let lambdas: Vec<&str> = csv.lines().skip(2).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(lambdas, ["0", "0.3", "0.6", "0.8999999999999999"]);
}

#[test]
fn worker_count_does_not_change_csv_body() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &["--corrupt-fraction", "0.3"]);
    for (workers, name) in [("1", "w1.csv"), ("8", "w8.csv")] {
        let mut args = vec![
            "bench", "--data", "s.tlt", "--mode", "tilted-transductive", "--workers", workers, "--out", name,
        ];
        args.extend_from_slice(&EPISODE_FLAGS);
        assert_eq!(code(&tilt(dir.path(), &args)), 0);
    }
    let (a, b) = (read(dir.path(), "w1.csv"), read(dir.path(), "w8.csv"));
    assert_eq!(a.lines().next(), b.lines().next());
    assert_eq!(body(&a, true), body(&b, true));
}

#[test]
fn validate_quick_passes_for_two_seeds() {
    let dir = TempDir::new().unwrap();
    for seed in ["9", "10"] {
        let out = tilt(dir.path(), &["validate", "--quick", "--seed", seed]);
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert_eq!(code(&out), 0, "{stdout}");
        assert_eq!(stdout.matches("PASS").count(), 9);
    }
}
