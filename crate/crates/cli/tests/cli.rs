use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

fn xva(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xva")).args(args).output().expect("run xva")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Copies the toy inputs into a fresh directory so tests can edit them.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(toy_dir()).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "json") {
            std::fs::copy(&p, dir.path().join(p.file_name().unwrap())).unwrap();
        }
    }
    dir
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn totals(dir: &Path) -> BTreeMap<String, f64> {
    let report = read_json(&dir.join("xva_report.json"));
    let mut out = BTreeMap::new();
    for m in report["measures"].as_array().unwrap() {
        out.insert(m["measure"].as_str().unwrap().to_string(), m["total"].as_f64().unwrap());
    }
    for s in report["sensitivities"].as_array().unwrap() {
        out.insert(s["name"].as_str().unwrap().to_string(), s["total"].as_f64().unwrap());
    }
    out
}

/// Rows of `allocation.csv` grouped by (measure, level).
fn allocation_rows(dir: &Path) -> BTreeMap<(String, String), Vec<(String, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(dir.join("allocation.csv"))
        .unwrap();
    let mut out: BTreeMap<(String, String), Vec<(String, f64)>> = BTreeMap::new();
    for r in reader.records() {
        let r = r.unwrap();
        out.entry((r[0].to_string(), r[1].to_string()))
            .or_default()
            .push((r[2].to_string(), r[3].parse().unwrap()));
    }
    out
}

#[test]
fn run_writes_reports_whose_allocation_rows_sum_to_the_total_row() {
    let ws = workspace();
    let out = ws.path().join("out");
    ok(&xva(&["run", "--config", p(&ws.path().join("run.json")), "--output", p(&out)]));
    for f in [
        "xva_report.json",
        "xva_report.csv",
        "sensitivities.csv",
        "allocation.csv",
        "conditioning_sets.json",
        "diagnostics.json",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert!(!out.join(".xva.lock").exists());
    let rows = allocation_rows(&out);
    assert!(rows.contains_key(&("cva".to_string(), "trade".to_string())));
    assert!(rows.contains_key(&("cva".to_string(), "group".to_string())));
    for ((measure, level), rows) in &rows {
        let named: Vec<f64> = rows.iter().filter(|(n, _)| !n.starts_with('<')).map(|r| r.1).collect();
        let summary = |key: &str| rows.iter().find(|(n, _)| n == key).unwrap().1;
        if level == "trade" {
            let sum = xva_core::numeric::fsum(named.iter().copied());
            assert_eq!(sum.to_bits(), summary("<total>").to_bits(), "{measure}");
        }
        let scale: f64 = named.iter().map(|v| v.abs()).sum();
        assert!((summary("<portfolio>") - summary("<total>")).abs() <= 8.0 * f64::EPSILON * scale + 1e-15);
    }
    let report = read_json(&out.join("xva_report.json"));
    assert_eq!(report["schema_version"], 1);
    let diagnostics = read_json(&out.join("diagnostics.json"));
    assert_eq!(diagnostics["work"]["existing_trades"]["trade_path_evaluations"], 0);
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let ws = workspace();
    let cfg = ws.path().join("run.json");
    let outs: Vec<PathBuf> = ["1", "4", "8"].iter().map(|t| ws.path().join(format!("out{t}"))).collect();
    for (t, o) in ["1", "4", "8"].iter().zip(&outs) {
        ok(&xva(&["--threads", t, "run", "--config", p(&cfg), "--output", p(o)]));
    }
    for f in ["xva_report.json", "xva_report.csv", "sensitivities.csv", "allocation.csv", "conditioning_sets.json", "diagnostics.json"] {
        let first = std::fs::read(outs[0].join(f)).unwrap();
        for o in &outs[1..] {
            assert_eq!(first, std::fs::read(o.join(f)).unwrap(), "{f} differs");
        }
    }
}

#[test]
fn whatif_matches_a_full_run_of_the_merged_portfolio() {
    let ws = workspace();
    let dir = ws.path();
    let state = dir.join("state.json");
    ok(&xva(&["run", "--config", p(&dir.join("run.json")), "--output", p(&dir.join("base")), "--save-state", p(&state)]));
    let whatif_out = dir.join("whatif");
    let out = xva(&["whatif", "--state", p(&state), "--delta", p(&dir.join("delta.json")), "--output", p(&whatif_out)]);
    ok(&out);

    let mut merged: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(dir.join("portfolio.json")).unwrap()).unwrap();
    let delta = read_json(&dir.join("delta.json"));
    merged.extend(delta["trades"].as_array().unwrap().iter().cloned());
    std::fs::write(dir.join("merged.json"), serde_json::to_string(&merged).unwrap()).unwrap();
    let mut cfg = read_json(&dir.join("run.json"));
    cfg["portfolio"] = "merged.json".into();
    std::fs::write(dir.join("merged_run.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    let full_out = dir.join("full");
    ok(&xva(&["run", "--config", p(&dir.join("merged_run.json")), "--output", p(&full_out)]));

    let (a, b) = (totals(&whatif_out), totals(&full_out));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, v) in &a {
        assert_eq!(v.to_bits(), b[name].to_bits(), "{name}: {v} vs {}", b[name]);
    }
    assert_eq!(
        std::fs::read(whatif_out.join("allocation.csv")).unwrap(),
        std::fs::read(full_out.join("allocation.csv")).unwrap()
    );
    let report = read_json(&whatif_out.join("incremental_report.json"));
    assert_eq!(report["added_trades"][0], "eq-call");
}

#[test]
fn whatif_evaluates_no_existing_trade() {
    // the toy config has every measure, gammas and MVA sensitivities
    let ws = workspace();
    let dir = ws.path();
    let state = dir.join("state.json");
    ok(&xva(&["run", "--config", p(&dir.join("run.json")), "--output", p(&dir.join("base")), "--save-state", p(&state)]));
    let out = dir.join("w");
    ok(&xva(&["whatif", "--state", p(&state), "--delta", p(&dir.join("delta.json")), "--output", p(&out)]));
    let report = read_json(&out.join("incremental_report.json"));
    let existing = &report["work"]["existing_trades"];
    assert_eq!(existing["trade_path_evaluations"], 0);
    assert_eq!(existing["trade_shock_evaluations"], 0);
    let new = &report["work"]["new_trades"];
    assert!(new["trade_path_evaluations"].as_u64().unwrap() > 0);
    assert!(new["trade_shock_evaluations"].as_u64().unwrap() > 0);
}

#[test]
fn empty_delta_changes_nothing() {
    let ws = workspace();
    let dir = ws.path();
    let state = dir.join("state.json");
    ok(&xva(&["run", "--config", p(&dir.join("run.json")), "--output", p(&dir.join("base")), "--save-state", p(&state)]));
    std::fs::write(dir.join("none.json"), r#"{"increment": true, "trades": []}"#).unwrap();
    let out = dir.join("w");
    ok(&xva(&["whatif", "--state", p(&state), "--delta", p(&dir.join("none.json")), "--measures", "cva,fva,mva", "--output", p(&out)]));
    let report = read_json(&out.join("incremental_report.json"));
    assert_eq!(report["before"], report["after"]);
    assert!(report["before"].as_object().unwrap().contains_key("mva"));
    assert!(!report["before"].as_object().unwrap().contains_key("dva"));
    assert_eq!(report["flips"].as_array().unwrap().len(), 0);
    assert_eq!(report["allocation_changes"].as_array().unwrap().len(), 0);
    assert_eq!(
        std::fs::read(dir.join("base/allocation.csv")).unwrap(),
        std::fs::read(out.join("allocation.csv")).unwrap()
    );
}

#[test]
fn tampered_state_exits_with_state_mismatch() {
    let ws = workspace();
    let dir = ws.path();
    let state = dir.join("state.json");
    ok(&xva(&["run", "--config", p(&dir.join("run.json")), "--output", p(&dir.join("base")), "--save-state", p(&state)]));
    let mut book = read_json(&state);
    book["cube_identity"] = "0000".into();
    std::fs::write(&state, serde_json::to_string(&book).unwrap()).unwrap();
    let out = xva(&["whatif", "--state", p(&state), "--delta", p(&dir.join("delta.json")), "--output", p(&dir.join("w"))]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn validation_failures_exit_2_with_field_messages() {
    let ws = workspace();
    let dir = ws.path();
    std::fs::remove_file(dir.join("credit.json")).unwrap();
    std::fs::remove_file(dir.join("shocks.json")).unwrap();
    let out = xva(&["run", "--config", p(&dir.join("run.json"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("credit:") && err.contains("shocks:"), "{err}");

    let ws = workspace();
    let dir = ws.path();
    let mut cfg = read_json(&dir.join("run.json"));
    cfg["sensitivities"] = serde_json::json!([{"measure": "cva", "instruments": ["no_such_quote"]}]);
    std::fs::write(dir.join("run.json"), cfg.to_string()).unwrap();
    let out = xva(&["run", "--config", p(&dir.join("run.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_quote"));
}

#[test]
fn empty_portfolio_gives_zero_measures() {
    let ws = workspace();
    let dir = ws.path();
    std::fs::write(dir.join("portfolio.json"), "[]").unwrap();
    let out = dir.join("out");
    ok(&xva(&["run", "--config", p(&dir.join("run.json")), "--output", p(&out)]));
    for (name, v) in totals(&out) {
        assert_eq!(v, 0.0, "{name}");
    }
    let rows = allocation_rows(&out);
    for rows in rows.values() {
        assert!(rows.iter().all(|(n, _)| n.starts_with('<')));
    }
}

#[test]
fn locked_output_directory_is_refused() {
    let ws = workspace();
    let dir = ws.path();
    let out = dir.join("out");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".xva.lock"), "").unwrap();
    let res = xva(&["run", "--config", p(&dir.join("run.json")), "--output", p(&out)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("locked"));
}

#[test]
fn oracle_check_passes_on_the_toy_portfolio() {
    let ws = workspace();
    let dump = ws.path().join("oracle.json");
    let out = xva(&["oracle-check", "--config", p(&ws.path().join("run.json")), "--oracle-dump", p(&dump)]);
    ok(&out);
    let report = read_json(&dump);
    assert_eq!(report["passed"], true);
    assert!(report["checks"].as_array().unwrap().len() > 10);
}
