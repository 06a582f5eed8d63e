use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_transfer-itr"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn simulate(dir: &Path, seed: &str) {
    let out = run(&[
        "simulate",
        "--setting",
        "III",
        "--population-size",
        "20000",
        "--rwd-size",
        "300",
        "--alpha0",
        "-4",
        "--seed",
        seed,
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    simulate(&a, "5");
    simulate(&b, "5");
    simulate(&c, "6");
    let (fa, fb) = (read_dir_bytes(&a), read_dir_bytes(&b));
    assert_eq!(fa.len(), 4);
    assert_eq!(fa, fb);
    assert_ne!(
        fs::read(a.join("experimental.csv")).unwrap(),
        fs::read(c.join("experimental.csv")).unwrap()
    );
}

#[test]
fn fit_then_evaluate_reproduces_value() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, "2");
    let exp = data.join("experimental.csv");
    let target = data.join("target.csv");
    let rule = tmp.path().join("rule.json");
    let trace = tmp.path().join("trace.csv");
    let out = run(&[
        "fit",
        "--experimental",
        exp.to_str().unwrap(),
        "--target",
        target.to_str().unwrap(),
        "--seed",
        "4",
        "--out",
        rule.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let fitted: Value = serde_json::from_slice(&fs::read(&rule).unwrap()).unwrap();
    assert_eq!(fitted["eta"].as_array().unwrap().len(), 3);
    assert!(fs::read_to_string(&trace)
        .unwrap()
        .starts_with("iteration,objective\n"));

    let out = run(&[
        "evaluate",
        "--rule",
        rule.to_str().unwrap(),
        "--experimental",
        exp.to_str().unwrap(),
        "--target",
        target.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let evaluated: Value = serde_json::from_slice(&out.stdout).unwrap();
    let a = fitted["metadata"]["value"].as_f64().unwrap();
    let b = evaluated["value"].as_f64().unwrap();
    assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
}

#[test]
fn config_file_supplies_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sim.conf");
    fs::write(
        &cfg,
        "# simulation defaults\nsetting = III\npopulation-size = 20000\nrwd-size = 300\nalpha0 = -4\nseed = 5\n",
    )
    .unwrap();
    let via_config = tmp.path().join("cfg");
    let out = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        via_config.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let via_flags = tmp.path().join("flags");
    simulate(&via_flags, "5");
    assert_eq!(read_dir_bytes(&via_config), read_dir_bytes(&via_flags));
}

fn write_csv(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn parametric_weights_without_population_size_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = write_csv(tmp.path(), "e.csv", "x1,A,Y\n0.1,0,1\n0.5,1,2\n0.9,0,1\n");
    let rwd = write_csv(tmp.path(), "t.csv", "x1\n0.3\n0.6\n");
    let out = run(&[
        "weights",
        "--experimental",
        &exp,
        "--target",
        &rwd,
        "--method",
        "mle",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--N"));
}

#[test]
fn input_errors_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let rwd = write_csv(tmp.path(), "t.csv", "x1\n0.3\n0.6\n");
    let bad_a = write_csv(tmp.path(), "a.csv", "x1,A,Y\n0.1,0,1\n0.5,2,2\n");
    let out = run(&["weights", "--experimental", &bad_a, "--target", &rwd]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[input]:"), "{err}");
    assert!(err.contains("row 2"), "{err}");

    let no_y = write_csv(tmp.path(), "b.csv", "x1,A\n0.1,0\n0.5,1\n");
    let out = run(&["weights", "--experimental", &no_y, "--target", &rwd]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`Y`"));
}

#[test]
fn missing_file_exits_six() {
    let tmp = tempfile::tempdir().unwrap();
    let rwd = write_csv(tmp.path(), "t.csv", "x1\n0.3\n");
    let missing = tmp.path().join("nope.csv");
    let out = run(&[
        "weights",
        "--experimental",
        missing.to_str().unwrap(),
        "--target",
        &rwd,
    ]);
    assert_eq!(out.status.code(), Some(6));
}

#[test]
fn estimating_equations_without_root_exit_four() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = write_csv(
        tmp.path(),
        "e.csv",
        "x1,A,Y\n0.0,0,1\n1.0,1,2\n0.5,0,1\n0.2,1,3\n",
    );
    let rwd = write_csv(tmp.path(), "t.csv", "x1\n5\n6\n");
    let out = run(&[
        "weights",
        "--experimental",
        &exp,
        "--target",
        &rwd,
        "--method",
        "ee",
        "--N",
        "100",
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[infeasible]:"));
}
