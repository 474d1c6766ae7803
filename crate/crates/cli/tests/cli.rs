use std::path::Path;
use std::process::{Command, Output};

fn slq(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slq")).args(args).current_dir(cwd).output().unwrap()
}

fn emit(dir: &Path, name: &str) -> String {
    let file = dir.join(format!("{name}.json"));
    let o = slq(&["scenario", "--emit", name, "--file", file.to_str().unwrap()], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    file.to_str().unwrap().to_string()
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn scenario_listing_names_every_preset() {
    let dir = tempfile::tempdir().unwrap();
    let o = slq(&["scenario"], dir.path());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(o.status.success());
    for name in ["scalar-smoke", "newsvendor-lq", "advertising-lq", "complete-info"] {
        assert!(text.contains(name), "{text}");
    }
}

#[test]
fn pipeline_succeeds_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let file = emit(dir.path(), "scalar-smoke");
    let o = slq(&["pipeline", "--scenario", &file, "--paths", "200", "--dt", "0.01", "--out", "run"], dir.path());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout.contains("overall PASS"));
    let run = dir.path().join("run");
    for f in ["costs.csv", "stationarity.csv", "refinement.csv", "faults.csv", "summary.txt", "assumptions.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let manifest = std::fs::read_dir(&run).unwrap().filter_map(|e| e.ok()).any(|e| e.file_name().to_string_lossy().contains("manifest"));
    assert!(manifest);
}

#[test]
fn repeated_runs_are_bit_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let file = emit(dir.path(), "newsvendor-lq");
    let run = |out: &str, threads: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_slq"))
            .args(["pipeline", "--scenario", &file, "--paths", "150", "--dt", "0.01", "--seed", "9", "--out", out])
            .current_dir(dir.path())
            .env("SLQ_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0));
        csv_bytes(&dir.path().join(out))
    };
    let a = run("a", "1");
    assert!(!a.is_empty());
    assert_eq!(a, run("b", "1"));
    assert_eq!(a, run("c", "4"));
}

#[test]
fn singular_leader_weight_is_an_assumption_failure() {
    let dir = tempfile::tempdir().unwrap();
    let file = emit(dir.path(), "scalar-smoke");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&file).unwrap()).unwrap();
    v["costs"]["N2"] = serde_json::json!([[0.0]]);
    std::fs::write(&file, v.to_string()).unwrap();
    let o = slq(&["validate", "--scenario", &file], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let all = format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    assert!(all.contains("A3.4"), "{all}");
    let o = slq(&["pipeline", "--scenario", &file, "--paths", "10", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_arguments_are_configuration_errors() {
    let dir = tempfile::tempdir().unwrap();
    let file = emit(dir.path(), "scalar-smoke");
    assert_eq!(slq(&["pipeline", "--scenario", &file, "--paths", "0"], dir.path()).status.code(), Some(1));
    assert_eq!(slq(&["pipeline", "--scenario", "missing.json"], dir.path()).status.code(), Some(1));
    assert_eq!(slq(&["pipeline", "--scenario", &file, "--dt", "0.3"], dir.path()).status.code(), Some(1));
    assert_eq!(slq(&["scenario", "--emit", "no-such-preset"], dir.path()).status.code(), Some(1));
    assert_eq!(slq(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn solve_riccati_and_simulate_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let file = emit(dir.path(), "scalar-smoke");
    let o = slq(&["solve-riccati", "--scenario", &file, "--dt", "0.01", "--out", "r", "--dump-coefficients", "coef"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_dir(dir.path().join("coef")).unwrap().count() > 0);
    let o = slq(&["simulate", "--scenario", &file, "--dt", "0.01", "--paths", "30", "--out", "s"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("s/trajectories.csv").exists());
    let o = slq(&["equilibrium", "--scenario", &file, "--dt", "0.01", "--paths", "30", "--out", "e"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("e/costs.csv").exists());
}

#[test]
fn verify_writes_the_gain_mode_report() {
    let dir = tempfile::tempdir().unwrap();
    let file = emit(dir.path(), "scalar-smoke");
    let o = slq(&["verify", "--suite", "gain-modes", "--scenario", &file, "--dt", "0.01", "--paths", "50", "--out", "v"], dir.path());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("PASS rederived leader residual"));
    let report = std::fs::read_to_string(dir.path().join("v/gain_modes.csv")).unwrap();
    assert_eq!(report.lines().count(), 2);
}
