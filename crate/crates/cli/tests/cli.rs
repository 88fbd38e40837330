use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn gapflow(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gapflow"));
    cmd.args(args);
    match threads {
        Some(n) => cmd.env("GAPFLOW_THREADS", n.to_string()),
        None => cmd.env_remove("GAPFLOW_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn symmetric_measure(dir: &Path) -> String {
    write(dir, "m.json", r#"{"atoms":[[-1,"inf"],[0,1.4426950408889634],[1,"inf"]]}"#)
        .display()
        .to_string()
}

#[test]
fn forward_reports_quarter_half_quarter() {
    let dir = TempDir::new().unwrap();
    let m = symmetric_measure(dir.path());
    let out = gapflow(&["forward", "--measure", &m, "--x0", "0", "--tol", "1e-13"], None);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let p: Vec<f64> = v["result"]["probabilities"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    assert!(v["meta"]["rate_convention"].as_f64() == Some(0.5));
}

#[test]
fn invert_valid_target() {
    let dir = TempDir::new().unwrap();
    let t = write(dir.path(), "t.json", r#"{"points":[[-1,0.25],[0,0.5],[1,0.25]]}"#);
    let out = gapflow(&["--no-meta", "invert", "--target", t.to_str().unwrap(), "--x0", "0"], None);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["result"]["converged"], Value::Bool(true));
    let b = v["result"]["measure"]["atoms"][1][1].as_f64().unwrap();
    assert!((b - 1.0 / std::f64::consts::LN_2).abs() < 1e-6);
    assert!(v.get("meta").is_none());
}

#[test]
fn malformed_json_exits_2() {
    let dir = TempDir::new().unwrap();
    let t = write(dir.path(), "t.json", "{\"points\": [[0, ");
    let out = gapflow(&["invert", "--target", t.to_str().unwrap(), "--x0", "0"], None);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["error"]["code"], "E_PARSE");
}

#[test]
fn validation_errors_exit_2_with_stable_codes() {
    let dir = TempDir::new().unwrap();
    let m = write(dir.path(), "m.json", r#"{"atoms":[[0,-1]]}"#);
    let out = gapflow(&["forward", "--measure", m.to_str().unwrap(), "--x0", "0"], None);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["error"]["code"], "E_NEGATIVE_MASS");

    let t = write(dir.path(), "t.json", r#"{"points":[[-1,0.5],[1,0.5]]}"#);
    let out = gapflow(&["invert", "--target", t.to_str().unwrap(), "--x0", "0.5"], None);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["error"]["code"], "E_MEAN_MISMATCH");

    let out = gapflow(&["forward", "--measure", "/nonexistent/m.json", "--x0", "0"], None);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["error"]["code"], "E_IO");
}

#[test]
fn unreachable_tolerance_exits_3_with_best_iterate() {
    let dir = TempDir::new().unwrap();
    let t = write(dir.path(), "t.json", r#"{"points":[[-1,0.2],[0,0.3],[0.5,0.3],[2,0.2]]}"#);
    let out = gapflow(
        &["--no-meta", "invert", "--target", t.to_str().unwrap(), "--x0", "0.35", "--tol", "1e-40", "--max-iter", "20"],
        None,
    );
    assert_eq!(out.status.code(), Some(3));
    let v = json(&out);
    assert_eq!(v["result"]["converged"], Value::Bool(false));
    assert!(v["result"]["residual"].as_f64().unwrap() < 1e-8);
    assert_eq!(v["result"]["measure"]["atoms"].as_array().unwrap().len(), 4);
}

#[test]
fn classify_reflected_brownian_motion() {
    let dir = TempDir::new().unwrap();
    let m = write(dir.path(), "m.json", r#"{"atoms":[[0,1]],"right_tail_diverges":true}"#);
    let out = gapflow(&["--no-meta", "classify", "--measure", m.to_str().unwrap(), "--x0", "0"], None);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["result"]["local_martingale"], Value::Bool(false));
    assert_eq!(v["result"]["true_martingale"], Value::Bool(false));
}

#[test]
fn classify_declared_tails() {
    let dir = TempDir::new().unwrap();
    let m = write(dir.path(), "m.json", r#"{"atoms":[]}"#);
    let out = gapflow(
        &["--no-meta", "classify", "--measure", m.to_str().unwrap(), "--x0", "0", "--left-tail", "finite", "--right-tail", "finite"],
        None,
    );
    let v = json(&out);
    assert_eq!(v["result"]["local_martingale"], Value::Bool(true));
    assert_eq!(v["result"]["true_martingale"], Value::Bool(false));
}

#[test]
fn calibrate_calls_two_point_curve() {
    let dir = TempDir::new().unwrap();
    let c = write(dir.path(), "c.csv", "strike,price\n0,100\n50,75\n100,50\n150,25\n200,0\n");
    let out = gapflow(&["--no-meta", "calibrate-calls", "--curve", c.to_str().unwrap(), "--T", "2"], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["result"]["calibration"]["measure"]["atoms"][0][1], "inf");
    assert_eq!(v["result"]["report"]["within_tolerance"], Value::Bool(true));
}

#[test]
fn convexity_violation_exits_2() {
    let dir = TempDir::new().unwrap();
    let c = write(dir.path(), "c.csv", "strike,price\n0,1\n1,0.9\n2,0\n");
    let out = gapflow(&["calibrate-calls", "--curve", c.to_str().unwrap(), "--T", "1"], None);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(json(&out)["error"]["code"], "E_CONVEXITY");
}

#[test]
fn approx_from_quantile_csv() {
    let dir = TempDir::new().unwrap();
    let mut body = String::from("u,quantile\n");
    for j in 0..200 {
        let u = (j as f64 + 0.5) / 200.0;
        body.push_str(&format!("{u},{}\n", 2.0 * u - 1.0));
    }
    let law = write(dir.path(), "q.csv", &body);
    let out = gapflow(&["--no-meta", "approx", "--law", law.to_str().unwrap(), "--x0", "0", "--n", "3"], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["result"]["calibration"]["converged"], Value::Bool(true));
    assert!(v["result"]["diagnostics"]["w1_fit"].as_f64().unwrap() < 1e-8);
}

#[test]
fn version_embeds_rate_convention() {
    let out = gapflow(&["--version"], None);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("rate convention 0.5"));
}

#[test]
fn output_is_byte_identical_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let m = symmetric_measure(dir.path());
    let t = write(dir.path(), "t.json", r#"{"points":[[-2,0.1],[-1,0.2],[0,0.3],[0.5,0.2],[3,0.2]]}"#);
    let mean = (-0.2 - 0.2 + 0.1 + 0.6f64).to_string();
    let commands: Vec<Vec<&str>> = vec![
        vec!["--no-meta", "simulate", "--measure", &m, "--x0", "0", "--engine", "jump", "--paths", "20000", "--seed", "7"],
        vec![
            "--no-meta", "simulate", "--measure", &m, "--x0", "0", "--engine", "timechange", "--paths", "300", "--seed",
            "7", "--step", "1e-4",
        ],
        vec!["--no-meta", "invert", "--target", t.to_str().unwrap(), "--x0", &mean],
    ];
    for args in commands {
        let one = gapflow(&args, Some(1));
        let four = gapflow(&args, Some(4));
        let again = gapflow(&args, Some(4));
        assert_eq!(one.status.code(), Some(0), "{}", String::from_utf8_lossy(&one.stderr));
        assert_eq!(one.stdout, four.stdout, "{args:?}");
        assert_eq!(four.stdout, again.stdout, "{args:?}");
    }
}
