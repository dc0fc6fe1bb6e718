use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::Rng;
use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bracket-att"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run binary")
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn read_table(path: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let headers = rdr.headers().unwrap().clone();
    rdr.records()
        .map(|r| headers.iter().zip(r.unwrap().iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        .collect()
}

/// Staggered panel with noise: cohorts 3 and 4 plus never-treated units.
fn staggered_csv(dir: &Path) -> PathBuf {
    let mut r = bracket_att::rng::stream(12, 0);
    let mut s = String::from("unit,time,y,treated_at\n");
    for i in 0..60 {
        let g = [Some(3), Some(4), None][i % 3];
        let fe: f64 = r.gen_range(-1.0..1.0);
        for t in 0..8 {
            let effect = if g.is_some_and(|g| t >= g) { 1.0 } else { 0.0 };
            let y = fe + 0.1 * t as f64 + effect + r.gen_range(-0.5..0.5);
            s.push_str(&format!("u{i},{t},{y},{}\n", g.map_or(String::new(), |g| g.to_string())));
        }
    }
    let path = dir.join("staggered.csv");
    std::fs::write(&path, s).unwrap();
    path
}

#[test]
fn adapt_hand_panel_aggregates_to_three() {
    let dir = tempfile::tempdir().unwrap();
    let hand = fixture("hand_panel.csv");
    let o = run(
        dir.path(),
        &["adapt", "--input", &hand, "--style", "cohort-did", "--t", "2,3", "--horizon", "0,1", "--estimate", "--method", "mean", "--out", "out"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&dir.path().join("out"));
    assert!((r["aggregate"]["did"].as_f64().unwrap() - 3.0).abs() < 1e-12);
    let weights: Vec<f64> = r["aggregate"]["weights"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(weights, vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0]);
    for f in r["manifest"].as_array().unwrap() {
        assert!(dir.path().join("out").join(f.as_str().unwrap()).is_file());
    }
}

#[test]
fn adapt_local_projection_with_one_lag_gives_didm_equal_m() {
    let dir = tempfile::tempdir().unwrap();
    let panel = staggered_csv(dir.path()).display().to_string();
    let o = run(
        dir.path(),
        &["adapt", "--input", &panel, "--style", "localproj", "--lags", "1", "--t", "3,4", "--horizon", "0,1,2", "--estimate", "--method", "loclin", "--out", "out"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_table(&dir.path().join("out/cells.csv"));
    assert_eq!(rows.len(), 6);
    for row in rows {
        let m: f64 = row["m"].parse().unwrap();
        let didm: f64 = row["didm"].parse().unwrap();
        assert!((m - didm).abs() < 1e-12, "{row:?}");
    }
}

#[test]
fn adapt_horizon_sweep_reports_ordering_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let panel = staggered_csv(dir.path()).display().to_string();
    let o = run(
        dir.path(),
        &["adapt", "--input", &panel, "--style", "lagm", "--lags", "2", "--t", "4", "--horizon", "0,1,2,3", "--comparison", "notyet", "--estimate", "--out", "out"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_table(&dir.path().join("out/cells.csv"));
    assert_eq!(rows.iter().map(|r| r["h"].as_str()).collect::<Vec<_>>(), ["0", "1", "2", "3"]);
    assert!(rows.iter().all(|r| r["ordering_holds"] == "true" || r["ordering_holds"] == "false"));
    assert!(dir.path().join("out/cell_t4_h3.csv").is_file());
}

#[test]
fn empty_cell_exits_3_naming_the_cell() {
    let dir = tempfile::tempdir().unwrap();
    let hand = fixture("hand_panel.csv");
    let o = run(dir.path(), &["adapt", "--input", &hand, "--style", "cohort-did", "--t", "4", "--out", "out"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("t = 4"));
}

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let golden = fixture("golden4.csv");
    let o = run(
        dir.path(),
        &["estimate", "--input", &golden, "--w", "treat", "--ylag", "lag", "--y0", "pre", "--y1", "nope", "--out", "out"],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("input") && err.contains("nope"), "{err}");

    let o = run(dir.path(), &["estimate", "--input", "missing.csv", "--w", "a", "--ylag", "b", "--y0", "c", "--y1", "d", "--out", "out"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(dir.path(), &["simulate", "--dgp", "counterexample:unknown", "--out", "out"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn estimation_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let golden = fixture("golden4.csv");
    let o = run(
        dir.path(),
        &["estimate", "--input", &golden, "--w", "treat", "--ylag", "lag", "--y0", "pre", "--y1", "post", "--method", "nn", "--k", "5", "--out", "out"],
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("estimation"));
}

#[test]
fn bootstrap_fills_interval_columns() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["simulate", "--n", "1000", "--seed", "2", "--out", "sim"]).status.success());
    let o = run(
        dir.path(),
        &["estimate", "--input", "sim/panel.csv", "--id", "id", "--w", "w", "--ylag", "y_lag", "--y0", "y0", "--y1", "y1", "--bootstrap", "100", "--seed", "9", "--out", "out"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_table(&dir.path().join("out/estimates.csv"));
    assert_eq!(rows.len(), 5);
    for row in &rows {
        let (lo, hi): (f64, f64) = (row["ci_lo"].parse().unwrap(), row["ci_hi"].parse().unwrap());
        assert!(lo <= hi);
    }
    let r = report(&dir.path().join("out"));
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["seed"], 9);
    assert_eq!(r["intervals"]["scheme"].as_str().map(|s| !s.is_empty()), Some(true));
}

#[test]
fn diagnose_svg_outputs_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["simulate", "--n", "3000", "--seed", "2", "--out", "sim"]).status.success());
    let o = run(
        dir.path(),
        &["diagnose", "--input", "sim/panel.csv", "--w", "w", "--ylag", "y_lag", "--y0", "y0", "--y1", "y1", "--bins", "4", "--svg", "--out", "out"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&dir.path().join("out"));
    let m: Vec<&str> = r["manifest"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    for f in ["curves_selection.svg", "cdf_fosd.svg", "curve_phi.svg"] {
        assert!(m.contains(&f));
        let text = std::fs::read_to_string(dir.path().join("out").join(f)).unwrap();
        assert!(text.starts_with("<svg") && text.contains("<polygon"));
    }
    let curve = read_table(&dir.path().join("out/curves_selection.csv"));
    assert_eq!(curve.len(), bracket_att::diagnostics::GRID_SIZE);
}

#[test]
fn simulate_verify_reports_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["simulate", "--beta", "2", "--gamma", "-1", "--rho", "0.5", "--n", "50000", "--seed", "5", "--verify", "--out", "out"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/verify.json")).unwrap()).unwrap();
    assert_eq!(v["closed_forms"]["m"], 0.5);
    assert_eq!(v["closed_forms"]["didm"], 1.5);
    assert_eq!(v["closed_forms"]["did"], 1.75);
    assert_eq!(v["pass"], true);
    let ordering = v["checks"].as_array().unwrap().iter().find(|c| c["property"] == "closed_form_ordering").unwrap();
    assert_eq!(ordering["pass"], true);
}

#[test]
fn repeated_seed_gives_identical_panel() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        assert!(run(dir.path(), &["simulate", "--dgp", "counterexample:did_holds_didm_fails", "--n", "500", "--seed", "7", "--out", out]).status.success());
    }
    let a = std::fs::read(dir.path().join("a/panel.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b/panel.csv")).unwrap());
}
