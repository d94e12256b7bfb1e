use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn odeirls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odeirls")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = odeirls(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

fn fhn() -> Value {
    json!({
        "model": "fitzhugh_nagumo", "scheme": "euler", "dt": 0.2,
        "h": 0.2, "last": 201, "observed": [0], "gamma_sq": [0.01],
        "theta0": [1, 1, 1], "method": "irls", "seed": 11
    })
}

fn lorenz() -> Value {
    json!({
        "model": "lorenz", "scheme": "rk4", "dt": 0.01,
        "h": 0.01, "last": 201, "observed": [0, 1, 2],
        "gamma_sq": [0.5, 0.1, 0.1],
        "theta0": [-9, -1.5, 39, 11, 29, 3], "method": "irls", "seed": 3
    })
}

/// Data rows of a CSV (after the comment and header lines).
fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    lines.next().unwrap();
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().nth(1).unwrap().to_string()
}

fn numbers(path: &Path) -> Vec<Vec<f64>> {
    rows(path).iter().map(|r| r.iter().map(|x| x.parse().unwrap()).collect()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_protocol_shaped_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lorenz.json", &lorenz());
    let out = dir.path().join("lorenz");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    let obs = numbers(&out.join("observations.csv"));
    assert_eq!(obs.len(), 201);
    assert!(obs.iter().all(|r| r.len() == 4));
    assert_eq!(header(&out.join("observations.csv")), "t,y1,y2,y3");
    assert_eq!(obs[200][0], 2.0);

    let cfg = write_config(dir.path(), "fhn.json", &fhn());
    let out = dir.path().join("fhn");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    let obs = numbers(&out.join("observations.csv"));
    assert_eq!(obs.len(), 201);
    assert!(obs.iter().all(|r| r.len() == 2));
    assert_eq!(numbers(&out.join("truth.csv"))[0].len(), 3);
}

#[test]
fn noise_free_observations_equal_the_reference_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lorenz.json", &lorenz());
    let out = dir.path().join("clean");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out), "--noise-free"]);
    assert_eq!(numbers(&out.join("observations.csv")), numbers(&out.join("truth.csv")));
}

#[test]
fn equal_configs_give_byte_identical_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fhn.json", &fhn());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["fit", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["fit", "--config", s(&cfg), "--out", s(&b), "--threads", "1"]);
    for name in ["weights.csv", "trace.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let c = dir.path().join("c");
    ok(&["fit", "--config", s(&cfg), "--out", s(&c), "--seed", "12"]);
    assert_ne!(fs::read(a.join("trace.csv")).unwrap(), fs::read(c.join("trace.csv")).unwrap());
}

#[test]
fn fit_outputs_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fhn.json", &fhn());
    let out = dir.path().join("fit");
    ok(&["fit", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(header(&out.join("weights.csv")), "t,w_1,sigma_1");
    assert_eq!(header(&out.join("trace.csv")), "iter,objective,error");

    let record: Value = serde_json::from_slice(&fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["status"], "ok");
    assert_eq!(record["config"]["seed"], 11);
    assert_eq!(record["observations"]["times"].as_array().unwrap().len(), 201);

    let weights = numbers(&out.join("weights.csv"));
    assert_eq!(weights.len(), 201);
    let w: Vec<f64> = weights.iter().map(|r| r[1]).collect();
    assert!(w.windows(2).all(|p| p[1] <= p[0]), "weights must be nonincreasing");
    assert!(w.iter().all(|&x| x > 0.0 && x <= 100.0));
    for r in &weights {
        // sigma² = 1/w − γ̃².
        assert!((r[2] * r[2] - (1.0 / r[1] - 0.01)).abs() < 1e-12);
    }

    let trace = numbers(&out.join("trace.csv"));
    let last = trace.last().unwrap();
    assert_eq!(last[2], record["final_error"].as_f64().unwrap());
    assert_eq!(trace.len(), record["objective_trace"].as_array().unwrap().len());
    assert!(trace.windows(2).all(|p| p[1][1] <= p[0][1] + 1e-9 * p[0][1].abs()));
}

#[test]
fn zero_iterations_echo_the_initial_guess() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = fhn();
    c["method"] = json!("irls(0)");
    let cfg = write_config(dir.path(), "fhn.json", &c);
    let out = dir.path().join("fit");
    ok(&["fit", "--config", s(&cfg), "--out", s(&out)]);
    let record: Value = serde_json::from_slice(&fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["theta_hat"], json!([1.0, 1.0, 1.0]));
    assert_eq!(numbers(&out.join("trace.csv")).len(), 1);
}

#[test]
fn fitting_simulated_data_matches_fitting_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fhn.json", &fhn());
    let sim = dir.path().join("sim");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&sim)]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["fit", "--config", s(&cfg), "--out", s(&a)]);
    let data = sim.join("observations.csv");
    ok(&["fit", "--config", s(&cfg), "--out", s(&b), "--data", s(&data)]);
    let ra: Value = serde_json::from_slice(&fs::read(a.join("run.json")).unwrap()).unwrap();
    let rb: Value = serde_json::from_slice(&fs::read(b.join("run.json")).unwrap()).unwrap();
    assert_eq!(ra["theta_hat"], rb["theta_hat"]);
    assert_eq!(rb["data_source"]["kind"], "file");
    assert_eq!(rows(&a.join("weights.csv")), rows(&b.join("weights.csv")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let mut c = fhn();
    c["sed"] = json!(1);
    let cfg = write_config(dir.path(), "typo.json", &c);
    let r = odeirls(&["fit", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("sed"));

    let mut c = fhn();
    c["dt"] = json!(0.03);
    let cfg = write_config(dir.path(), "dt.json", &c);
    assert_eq!(odeirls(&["fit", "--config", s(&cfg)]).status.code(), Some(2));

    let r = odeirls(&["fit", "--config", s(&dir.path().join("missing.json"))]);
    assert_eq!(r.status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "t,y1\n0.0,1.0\n").unwrap();
    let cfg = write_config(dir.path(), "fhn.json", &fhn());
    let r = odeirls(&["fit", "--config", s(&cfg), "--data", s(&bad), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));

    // This Kepler start lands exactly on the singular origin after one step.
    let cfg = write_config(
        dir.path(),
        "kepler.json",
        &json!({
            "model": "kepler", "scheme": "euler", "dt": 0.0625,
            "h": 0.0625, "last": 11, "observed": [0, 1], "gamma_sq": [1e-4, 1e-4],
            "theta0": [0.0625, 0, -1, 0], "method": "irls"
        }),
    );
    let r = odeirls(&["fit", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn sweep_cell_matches_fit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fhn.json", &fhn());
    let (fit, sweep) = (dir.path().join("fit"), dir.path().join("sweep"));
    ok(&["fit", "--config", s(&cfg), "--out", s(&fit)]);
    ok(&["sweep", "--config", s(&cfg), "--out", s(&sweep), "--dt-list", "0.2"]);
    let table = rows(&sweep.join("sweep.csv"));
    assert_eq!(header(&sweep.join("sweep.csv")), "dt,method,seed,error");
    assert_eq!(table, vec![vec!["0.2".to_string(), "irls".into(), "11".into(), table[0][3].clone()]]);
    let record: Value = serde_json::from_slice(&fs::read(fit.join("run.json")).unwrap()).unwrap();
    assert_eq!(table[0][3].parse::<f64>().unwrap(), record["final_error"].as_f64().unwrap());
}

#[test]
fn sweep_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fhn.json", &fhn());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = ["--dt-list", "0.2,0.1,0.05", "--methods", "conventional,irls(1),irls", "--replicates", "3"];
    let run = |out: &Path, threads: &str| {
        let mut v = vec!["sweep", "--config", s(&cfg), "--threads", threads, "--out"];
        v.push(s(out));
        v.extend(args);
        ok(&v);
    };
    run(&a, "1");
    run(&b, "4");
    let bytes = fs::read(a.join("sweep.csv")).unwrap();
    assert_eq!(bytes, fs::read(b.join("sweep.csv")).unwrap());
    let table = rows(&a.join("sweep.csv"));
    assert_eq!(table.len(), 27);
    assert_eq!(table[0][..3], ["0.2", "conventional", "11"]);
    assert_eq!(table[26][..3], ["0.05", "irls", "13"]);
    assert!(table.iter().all(|r| r[3].parse::<f64>().unwrap().is_finite()));
}

#[test]
fn sweep_rejects_steps_that_do_not_divide_h() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fhn.json", &fhn());
    let r = odeirls(&["sweep", "--config", s(&cfg), "--dt-list", "0.2,0.07"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn ci_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fhn.json", &fhn());
    let out = dir.path().join("ci");
    ok(&["ci", "--config", s(&cfg), "--out", s(&out), "--profile", "fixed", "--level", "0.95"]);
    assert_eq!(header(&out.join("ci.csv")), "param,lower,estimate,upper,threshold");
    let table = rows(&out.join("ci.csv"));
    assert_eq!(table.len(), 3);
    for r in &table {
        let v: Vec<f64> = r[1..].iter().map(|x| x.parse().unwrap()).collect();
        assert!(v[0] < v[1] && v[1] < v[2], "{r:?}");
        assert!((v[3] - 1.920729).abs() < 1e-6);
    }
    let r = odeirls(&["ci", "--config", s(&cfg), "--out", s(&out), "--params", "5"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn ho_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ho");
    ok(&["ho", "--schemes", "midpoint,rk4", "--k-list", "1..=50", "--out", s(&out)]);
    assert_eq!(header(&out.join("ho.csv")), "K,ml,qml_midpoint,qml_rk4");
    let table = numbers(&out.join("ho.csv"));
    assert_eq!(table.len(), 50);
    for r in &table {
        let k = r[0] as usize;
        assert_eq!(r[1], 0.02 / r[0]);
        assert!(r[3] >= r[1], "{r:?}");
        if k <= 10 {
            assert!(r[3] < 1.05 * r[1], "rk4 tracks ML: {r:?}");
        }
        if k >= 5 {
            assert!(r[2] > 10.0 * r[1], "midpoint is far above ML: {r:?}");
        }
    }
}
