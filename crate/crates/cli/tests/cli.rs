use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cumppi"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

/// Fast settings for the empty world.
fn small_run(out: &Path, extra: &[&str]) -> Output {
    let mut cmd = bin();
    cmd.args(["run", "--scenario"])
        .arg(scenario("empty_10m.json"))
        .args(["--controller", "mppi", "--seed", "5", "--horizon-steps", "20", "--samples", "48"])
        .args(["--workers", "1", "--out"])
        .arg(out)
        .args(extra);
    cmd.output().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn smoke_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = small_run(&out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("trajectory_000.csv")).unwrap();
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics_000.json")).unwrap()).unwrap();
    assert!(out.join("aggregate.json").is_file());
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t_s,x_m,y_m,theta_rad,v_mps,omega_radps,cmd_v_mps,cmd_omega_radps,min_ped_dist_m,collision_open_flag,t_exec_us"
    );
    assert_eq!(lines.count() as u64, metrics["steps"].as_u64().unwrap());
    assert_eq!(metrics["seed"], 5);
    assert_eq!(metrics["controller"], "mppi");
    assert_eq!(metrics["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = small_run(out, &["--trials", "2", "--no-timing"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 5);
    assert_eq!(fa, fb);
}

#[test]
fn unknown_controller_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let mut cmd = bin();
    let o = cmd
        .args(["run", "--scenario"])
        .arg(scenario("empty_10m.json"))
        .args(["--controller", "dwa", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("controller"));
    assert!(!out.exists());
}

#[test]
fn invalid_override_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = small_run(&out, &["--lambda", "-1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("controller.lambda"));
    assert!(!out.exists());
}

#[test]
fn validate_reports() {
    for name in ["empty_10m.json", "desk_corridor.json"] {
        let o = bin().args(["validate", "--scenario"]).arg(scenario(name)).output().unwrap();
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stdout));
    }

    let dir = tempfile::tempdir().unwrap();
    let mut s: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(scenario("desk_corridor.json")).unwrap()).unwrap();
    s["goals"][0]["x_m"] = serde_json::json!(35.0);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, s.to_string()).unwrap();
    let o = bin().args(["validate", "--scenario"]).arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("goals[0]"));

    let o = bin().args(["validate", "--scenario"]).arg(dir.path().join("missing.json")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bundled_files_match_the_library() {
    for (which, name) in [("empty", "empty_10m.json"), ("corridor", "desk_corridor.json")] {
        let o = bin().args(["example", which]).output().unwrap();
        assert!(o.status.success());
        let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        let file: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(scenario(name)).unwrap()).unwrap();
        assert_eq!(printed, file, "{name} is out of date; regenerate it with `cumppi example {which}`");
    }
}
