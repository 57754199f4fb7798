use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(cfg: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convex-nmpc"))
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} ")))
        .unwrap_or_else(|| panic!("no `{key}` in output:\n{text}"))
        .to_string()
}

fn toy_json() -> Value {
    serde_json::from_str(&std::fs::read_to_string(config("toy.json")).unwrap()).unwrap()
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

#[test]
fn validate_example1_passes() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&config("example1.json"), out.path(), &["validate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l == "PASS"));
    assert!(text.contains("(sign-only)"));
    let record: Value = serde_json::from_str(&std::fs::read_to_string(out.path().join("validate.json")).unwrap()).unwrap();
    assert_eq!(record["report"]["passed"], Value::Bool(true));
    assert_eq!(record["report"]["s"], 3);
}

#[test]
fn broken_input_box_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = toy_json();
    v["system"]["input_box"]["lower"] = serde_json::json!([0.1]);
    let cfg = write_config(dir.path(), &v);
    let o = run(&cfg, dir.path(), &["validate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!stdout(&o).lines().any(|l| l == "PASS"));
}

#[test]
fn wrong_sign_case_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = toy_json();
    v["system"]["partitions"][0]["sign_cases"] = serde_json::json!(["nonpos_convex"]);
    let cfg = write_config(dir.path(), &v);
    assert_eq!(run(&cfg, dir.path(), &["validate"]).status.code(), Some(1));
}

#[test]
fn toy_prune_counts() {
    let out = tempfile::tempdir().unwrap();
    let o = run(&config("toy.json"), out.path(), &["prune"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(field(&text, "scenarios"), "4");
    assert_eq!(field(&text, "feasible"), "1");
    assert_eq!(field(&text, "feasible_without_terminal"), "4");
    let tree: Value = serde_json::from_str(&std::fs::read_to_string(out.path().join("pruned.json")).unwrap()).unwrap();
    assert_eq!(tree["feasible"], serde_json::json!([1]));
    assert_eq!(tree["config_hash"].as_str().unwrap(), field(&text, "config_hash"));
}

#[test]
fn single_partition_has_one_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = toy_json();
    v["system"]["atoms"][0]["d"] = serde_json::json!(2.0);
    v["system"]["partitions"] = serde_json::json!([
        {"region": {"lower": [-1.0], "upper": [1.0]}, "sign_cases": ["nonneg_concave"]}
    ]);
    v["horizon"] = serde_json::json!(4);
    let cfg = write_config(dir.path(), &v);
    let o = run(&cfg, dir.path(), &["prune"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&stdout(&o), "scenarios"), "1");
    assert_eq!(field(&stdout(&o), "feasible"), "1");
    let o = run(&cfg, dir.path(), &["solve", "--state", "0.5"]);
    assert!(o.status.success());
    assert_eq!(field(&stdout(&o), "mu_star"), "1");
}

#[test]
fn exit_codes() {
    let out = tempfile::tempdir().unwrap();
    let toy = config("toy.json");
    // Outside X.
    assert_eq!(run(&toy, out.path(), &["solve", "--state", "3"]).status.code(), Some(2));
    // Inside X but no scenario reaches the terminal set.
    assert_eq!(run(&toy, out.path(), &["solve", "--state", "-1"]).status.code(), Some(2));
    assert_eq!(run(&toy, out.path(), &["simulate", "--x0", "-1", "--steps", "3"]).status.code(), Some(2));
    // Wrong dimension and malformed vectors.
    assert_eq!(run(&toy, out.path(), &["solve", "--state", "0.1,0.2"]).status.code(), Some(1));
    assert_ne!(run(&toy, out.path(), &["solve", "--state", "abc"]).status.code(), Some(0));
    // Unreadable and invalid configurations.
    assert_eq!(run(&out.path().join("missing.json"), out.path(), &["validate"]).status.code(), Some(1));
    let bad = out.path().join("bad.json");
    std::fs::write(&bad, "{\"name\": 1}").unwrap();
    assert_eq!(run(&bad, out.path(), &["validate"]).status.code(), Some(1));
    assert!(run(&toy, out.path(), &["solve", "--state", "0.2"]).status.success());
}

#[test]
fn stale_pruned_tree_is_ignored() {
    let out = tempfile::tempdir().unwrap();
    let toy = config("toy.json");
    assert!(run(&toy, out.path(), &["prune"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let mut v = toy_json();
    v["horizon"] = serde_json::json!(3);
    let cfg = write_config(dir.path(), &v);
    let o = run(&cfg, out.path(), &["solve", "--state", "0.2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("another configuration"));
}

#[test]
fn toy_outputs_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let toy = config("toy.json");
    for out in [a.path(), b.path()] {
        assert!(run(&toy, out, &["prune"]).status.success());
        assert!(run(&toy, out, &["solve", "--state", "0.3"]).status.success());
        assert!(run(&toy, out, &["simulate", "--x0", "0.3", "--steps", "20"]).status.success());
        assert!(run(&toy, out, &["sample", "--grid", "11"]).status.success());
    }
    for name in ["pruned.json", "solve.json", "trajectory.csv", "samples.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
    let csv = std::fs::read_to_string(a.path().join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("# config_hash="));
    assert_eq!(csv.lines().nth(1).unwrap(), "k,x_1,u_1,v_1,V,mu_star,min_slack");
}

#[test]
fn example1_samples_are_symmetric() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config("example1.json");
    assert!(run(&cfg, out.path(), &["prune"]).status.success());
    let o = run(&cfg, out.path(), &["sample", "--grid", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.path().join("samples.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(lines.next().unwrap(), "x_1,x_2,V,u_1,u_2,mu_star,feasible");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 25);
    let value = |r: &Vec<&str>| r[2].parse::<f64>().ok();
    for i in 0..rows.len() {
        let j = rows.len() - 1 - i;
        let (xi, xj): (f64, f64) = (rows[i][0].parse().unwrap(), rows[j][0].parse().unwrap());
        assert_eq!(xi, -xj);
        match (value(&rows[i]), value(&rows[j])) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-6 * (1.0 + a), "{a} vs {b}"),
            (None, None) => {}
            other => panic!("feasibility differs between mirrored points: {other:?}"),
        }
    }
    assert!(rows.iter().any(|r| r[6] == "1"));
}
