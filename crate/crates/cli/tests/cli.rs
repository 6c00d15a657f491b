//! End-to-end tests of the command-line interface: every subcommand, the
//! documented exit codes, and the emitted CSV/JSON shapes.

use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const J1_CONFIG: &str = r#"{"J":1,"lambda":1,"mu":[2],"z":[1],"c":1}"#;
const J2_CONFIG: &str = r#"{"J":2,"lambda":1,"mu":[2,1],"z":[1,1],"c":1}"#;
const SS_CONFIG: &str = r#"{"lambda":[1,1],"mu":[2,2],"z":[1,1],"c":1}"#;

fn write_config(dir: &Path, name: &str, content: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, content).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tandemq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_str(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_str(&stdout_str(out)).expect("valid JSON on stdout")
}

#[test]
fn roots_csv_has_tiny_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "j2.json", J2_CONFIG);
    let out = run(&["roots", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout_str(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "i,mu_i,beta_i,residual");
    for (idx, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], (idx + 1).to_string());
        let beta: f64 = cells[2].parse().unwrap();
        let residual: f64 = cells[3].parse().unwrap();
        assert!(beta > 0.0);
        assert!(residual.abs() < 1e-12 * 4.0);
    }
}

#[test]
fn validation_errors_name_the_field_and_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad_arity = write_config(
        dir.path(),
        "bad_mu.json",
        r#"{"J":2,"lambda":1,"mu":[2],"z":[1,1],"c":1}"#,
    );
    let out = run(&["roots", "--config", bad_arity.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("`mu`"), "stderr: {err}");

    let bad_c = write_config(
        dir.path(),
        "bad_c.json",
        r#"{"J":2,"lambda":1,"mu":[2,1],"z":[1,1],"c":0}"#,
    );
    let out = run(&["value", "--config", bad_c.to_str().unwrap(), "--at", "0,0"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("`c`"), "stderr: {err}");
}

#[test]
fn value_breakdown_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "j2.json", J2_CONFIG);
    let out = run(&["value", "--config", cfg.to_str().unwrap(), "--at", "0,0"]);
    assert!(out.status.success());
    let doc = stdout_json(&out);
    assert_eq!(doc["schema_version"], "tandemq.value.v1");
    let value = doc["value"].as_f64().unwrap();
    assert!((value - 1.2279471773).abs() < 1e-9);
    assert_eq!(doc["argmin"].as_array().unwrap().len(), 1);
    assert_eq!(doc["argmin"][0], 1);
    assert_eq!(doc["bottleneck"], 1);
    assert_eq!(doc["a_of_x"].as_array().unwrap().len(), 2);
}

#[test]
fn bottleneck_map_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "j2.json", J2_CONFIG);
    let out_path = dir.path().join("map.csv");
    let out = run(&[
        "bottleneck-map",
        "--config",
        cfg.to_str().unwrap(),
        "--resolution",
        "5",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&out_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x1,x2,V,argmin,A_of_x");
    assert_eq!(lines.len(), 1 + 25);
    // every listed bottleneck set is nonempty
    for line in &lines[1..] {
        let argmin = line.split(',').nth(3).unwrap();
        assert!(!argmin.is_empty());
    }
}

#[test]
fn hamiltonian_at_the_gradient_basis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "j2.json", J2_CONFIG);
    // -b_1 = (-beta_1, 0) with beta_1 = ln(2 + sqrt 2)
    let out = run(&[
        "hamiltonian",
        "--config",
        cfg.to_str().unwrap(),
        "--p",
        "-1.2279471772995156,0",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let doc = stdout_json(&out);
    assert!(doc["H"].as_f64().unwrap().abs() < 1e-10);
    assert_eq!(doc["forced_controls"][0], "on");
    assert_eq!(doc["forced_controls"][1], "free");
    assert!((doc["optimal_m"]["lambda"].as_f64().unwrap() - 3.4142135624).abs() < 1e-9);
    assert!(doc["product_relation_residual"].as_f64().unwrap() < 1e-9);
    assert!(doc["sum_relation_residual"].as_f64().unwrap() < 1e-9);
}

#[test]
fn check_pde_passes_on_the_reference_instance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "j2.json", J2_CONFIG);
    let out = run(&[
        "check-pde",
        "--config",
        cfg.to_str().unwrap(),
        "--resolution",
        "5",
        "--samples",
        "200",
        "--seed",
        "7",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let doc = stdout_json(&out);
    assert_eq!(doc["schema_version"], "tandemq.check-pde.v1");
    assert_eq!(doc["pass"], true);
    assert_eq!(doc["points"], 25);
}

#[test]
fn solve_dp_hand_value_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "j1.json", J1_CONFIG);
    let table = dir.path().join("table.csv");
    let out = run(&[
        "solve-dp",
        "--config",
        cfg.to_str().unwrap(),
        "--n",
        "2",
        "--warm",
        "--table",
        table.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let doc = stdout_json(&out);
    let vn = doc["vn_at"]["vn"].as_f64().unwrap();
    assert!((vn - 6.0f64.ln() / 2.0).abs() < 1e-9);
    let text = std::fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x1,W,Vn,u1");
    assert_eq!(lines.len(), 1 + 2);
}

#[test]
fn convergence_value_increases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "j1.json", J1_CONFIG);
    let out = run(&[
        "convergence",
        "--config",
        cfg.to_str().unwrap(),
        "--n-list",
        "1,2,4,8",
    ]);
    assert!(out.status.success());
    let text = stdout_str(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "n,vn,v_limit,gap");
    let vns: Vec<f64> = lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(vns.len(), 4);
    assert!(vns.windows(2).all(|w| w[1] > w[0]), "{vns:?}");
}

#[test]
fn simulate_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "j2.json", J2_CONFIG);
    let args = [
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--n",
        "2",
        "--paths",
        "2000",
        "--seed",
        "5",
    ];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(stdout_str(&a), stdout_str(&b));
    let doc = stdout_json(&a);
    let o = doc["exit_face_counts"]["boundary_o"].as_u64().unwrap();
    let c = doc["exit_face_counts"]["boundary_c"].as_u64().unwrap();
    assert_eq!(o + c, 2000);
}

#[test]
fn simulate_importance_sampling_and_custom_policy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "j2.json", J2_CONFIG);
    let out = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--n",
        "2",
        "--policy",
        "bottleneck",
        "--paths",
        "2000",
        "--seed",
        "5",
        "--is",
    ]);
    assert!(out.status.success());
    let doc = stdout_json(&out);
    assert_eq!(doc["importance_sampling"], true);
    assert!(doc["mean"].as_f64().unwrap() > 0.0);

    let policy = write_config(
        dir.path(),
        "policy.json",
        r#"{"default": [1, 0], "entries": []}"#,
    );
    let spec = format!("custom@{}", policy.to_str().unwrap());
    let out = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--n",
        "2",
        "--policy",
        &spec,
        "--paths",
        "500",
        "--seed",
        "5",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--n",
        "2",
        "--policy",
        "no-such-policy",
        "--paths",
        "500",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compare_policies_rows_and_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "j2.json", J2_CONFIG);
    let out = run(&[
        "compare-policies",
        "--config",
        cfg.to_str().unwrap(),
        "--n",
        "2",
        "--paths",
        "3000",
        "--seed",
        "11",
    ]);
    assert!(out.status.success());
    let doc = stdout_json(&out);
    let rows = doc["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4); // serve-all, bottleneck-only, idle-1, idle-2
    assert_eq!(rows[0]["policy"], "serve-all");
    assert!(doc["gap_serve_all_vs_idle_bottleneck"].as_f64().unwrap() >= 0.0);
}

#[test]
fn regions_single_server_warns_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ss.json", SS_CONFIG);
    let out = run(&[
        "regions-single-server",
        "--config",
        cfg.to_str().unwrap(),
        "--resolution",
        "4",
    ]);
    assert!(out.status.success());
    let warn = String::from_utf8(out.stderr.clone()).unwrap();
    assert!(warn.contains("valid-for-large-c"), "stderr: {warn}");
    let text = stdout_str(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x1,x2,V,serve");
    assert_eq!(lines.len(), 1 + 16);
    // symmetric instance: the diagonal ties, off-diagonal serves the longer queue
    for line in &lines[1..] {
        let cells: Vec<&str> = line.split(',').collect();
        let x1: f64 = cells[0].parse().unwrap();
        let x2: f64 = cells[1].parse().unwrap();
        let serve = cells[3];
        if x1 < x2 {
            assert_eq!(serve, "2", "{line}");
        } else if x1 > x2 {
            assert_eq!(serve, "1", "{line}");
        } else {
            assert_eq!(serve, "1;2", "{line}");
        }
    }
}
