//! Report files of a computed book.
//!
//! Every file carries the schema version: JSON files in a top-level
//! `schema_version` field, CSV files in a leading `# schema_version=N`
//! comment line. Floats are written in the shortest form that reads back
//! to the same bits, and every map is key-ordered, so a given book always
//! produces the same bytes.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::allocation::AllocationReport;
use crate::error::{Error, Result};
use crate::state::{Book, BookWork, IncrementalReport, SCHEMA_VERSION};

pub const XVA_JSON: &str = "xva_report.json";
pub const XVA_CSV: &str = "xva_report.csv";
pub const SENSITIVITIES_CSV: &str = "sensitivities.csv";
pub const ALLOCATION_CSV: &str = "allocation.csv";
pub const CONDITIONING_JSON: &str = "conditioning_sets.json";
pub const DIAGNOSTICS_JSON: &str = "diagnostics.json";
pub const INCREMENTAL_JSON: &str = "incremental_report.json";

/// Shortest round-trip representation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn csv_text(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut out = format!("# schema_version={SCHEMA_VERSION}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let fail = |e: csv::Error| Error::Input(e.to_string());
        w.write_record(header).map_err(fail)?;
        for r in rows {
            w.write_record(&r).map_err(fail)?;
        }
        w.flush()?;
    }
    String::from_utf8(out).map_err(|e| Error::Input(e.to_string()))
}

fn pretty(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("json value");
    s.push('\n');
    s
}

/// Totals and per-date integrands of every adjustment.
pub fn xva_report_json(book: &Book) -> Value {
    let dates = book.regressions.dates();
    let mut measures: Vec<Value> = book
        .results
        .xva
        .iter()
        .map(|x| {
            json!({
                "measure": x.kind.name(),
                "total": x.total,
                "dates": dates,
                "integrands": x.integrands,
                "weights": x.weights,
                "set_sizes": x.set_sizes,
                "conditioning_hash": x.conditioning_hash,
                "direct_total": x.direct_total,
            })
        })
        .collect();
    if let (Some(m), Some(margin)) = (&book.results.mva, &book.results.margin) {
        measures.push(json!({
            "measure": "mva",
            "total": m.total,
            "dates": dates,
            "integrands": m.integrands,
            "weights": m.weights,
            "expected_margin": margin.margins,
            "alpha": margin.alpha,
            "margin_measure": margin.measure,
        }));
    }
    let sensitivities: Vec<Value> = book
        .results
        .sensitivities
        .iter()
        .map(|s| json!({"name": s.measure, "instrument": s.instrument, "instrument2": s.instrument2, "total": s.total}))
        .collect();
    json!({
        "schema_version": SCHEMA_VERSION,
        "cube_identity": book.cube_identity,
        "trades": book.regressions.trade_ids(),
        "measures": measures,
        "sensitivities": sensitivities,
    })
}

/// `measure,date,set_size,weight,integrand` per date, then one
/// `measure,total,,,value` row per measure.
pub fn xva_report_csv(book: &Book) -> Result<String> {
    let dates = book.regressions.dates();
    let mut rows = Vec::new();
    let mut totals = Vec::new();
    for x in &book.results.xva {
        for (k, &t) in dates.iter().enumerate() {
            rows.push(vec![
                x.kind.name().to_string(),
                fmt_f64(t),
                x.set_sizes[k].to_string(),
                fmt_f64(x.weights[k]),
                fmt_f64(x.integrands[k]),
            ]);
        }
        totals.push(vec![x.kind.name().to_string(), "total".into(), String::new(), String::new(), fmt_f64(x.total)]);
    }
    if let Some(m) = &book.results.mva {
        for (k, &t) in dates.iter().enumerate() {
            rows.push(vec![
                "mva".into(),
                fmt_f64(t),
                String::new(),
                fmt_f64(m.weights[k]),
                fmt_f64(m.integrands[k]),
            ]);
        }
        totals.push(vec!["mva".into(), "total".into(), String::new(), String::new(), fmt_f64(m.total)]);
    }
    rows.extend(totals);
    csv_text(&["measure", "date", "set_size", "weight", "integrand"], rows)
}

/// `measure,instrument,instrument2,date,contribution` per date, then a
/// `total` row per sensitivity.
pub fn sensitivities_csv(book: &Book) -> Result<String> {
    let mut rows = Vec::new();
    for s in &book.results.sensitivities {
        let adjustment = s.measure.split(':').next().unwrap_or_default().to_string();
        let second = s.instrument2.clone().unwrap_or_default();
        for (t, v) in s.dates.iter().zip(&s.per_date) {
            rows.push(vec![adjustment.clone(), s.instrument.clone(), second.clone(), fmt_f64(*t), fmt_f64(*v)]);
        }
        rows.push(vec![adjustment, s.instrument.clone(), second, "total".into(), fmt_f64(s.total)]);
    }
    csv_text(&["measure", "instrument", "instrument2", "date", "contribution"], rows)
}

fn allocation_rows(report: &AllocationReport, level: &str, rows: &mut Vec<Vec<String>>) {
    for e in &report.entries {
        rows.push(vec![report.measure.clone(), level.into(), e.name.clone(), fmt_f64(e.value)]);
    }
    let row = |name: &str, value: f64| vec![report.measure.clone(), level.to_string(), format!("<{name}>"), fmt_f64(value)];
    rows.push(row("total", report.allocated_total()));
    rows.push(row("portfolio", report.total));
    rows.push(row("residual", report.residual));
}

/// `measure,level,name,value`: one row per trade (level `trade`) or group
/// (level `group`), followed by three summary rows. `<total>` is the
/// ordered compensated sum of the trade rows, `<portfolio>` the figure
/// computed at portfolio level and `<residual>` their difference.
pub fn allocation_csv(book: &Book) -> Result<String> {
    let mut rows = Vec::new();
    for a in &book.results.allocations {
        allocation_rows(a, "trade", &mut rows);
    }
    for a in &book.results.group_allocations {
        allocation_rows(a, "group", &mut rows);
    }
    csv_text(&["measure", "level", "name", "value"], rows)
}

pub fn conditioning_sets_json(book: &Book) -> Value {
    let sets = &book.results.sets;
    let mut out = json!({
        "schema_version": SCHEMA_VERSION,
        "source_hash": sets.positive.source_hash(),
        "positive": sets.positive.to_json_value(),
        "negative": sets.negative.to_json_value(),
    });
    if let Some(m) = &book.results.margin {
        out["margin"] = json!({
            "alpha": m.alpha,
            "measure": m.measure,
            "scenario_hash": m.scenario_margins.hash(),
            "sets": m.sets,
        });
    }
    out
}

pub fn diagnostics_json(book: &Book, work: &BookWork) -> Value {
    let d = &book.results.diagnostics;
    let allocation: Vec<Value> = book
        .results
        .allocations
        .iter()
        .map(|a| json!({"measure": a.measure, "residual": a.residual, "scale": a.scale(), "exact": a.is_exact()}))
        .collect();
    json!({
        "schema_version": SCHEMA_VERSION,
        "cube_identity": book.cube_identity,
        "residual_rms": d.residual_rms,
        "factorizations": d.factorizations,
        "clamps": d.clamps,
        "allocation": allocation,
        "work": work,
    })
}

pub fn incremental_report_json(report: &IncrementalReport) -> Value {
    let mut value = serde_json::to_value(report).expect("incremental report");
    value["schema_version"] = json!(SCHEMA_VERSION);
    value
}

fn write(dir: &Path, name: &str, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    written.push(path);
    Ok(())
}

/// Writes the six report files into `dir`, creating it if needed.
pub fn write_reports(book: &Book, work: &BookWork, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    write(dir, XVA_JSON, &pretty(&xva_report_json(book)), &mut written)?;
    write(dir, XVA_CSV, &xva_report_csv(book)?, &mut written)?;
    write(dir, SENSITIVITIES_CSV, &sensitivities_csv(book)?, &mut written)?;
    write(dir, ALLOCATION_CSV, &allocation_csv(book)?, &mut written)?;
    write(dir, CONDITIONING_JSON, &pretty(&conditioning_sets_json(book)), &mut written)?;
    write(dir, DIAGNOSTICS_JSON, &pretty(&diagnostics_json(book, work)), &mut written)?;
    Ok(written)
}

/// Writes the incremental report next to the reports of the updated book.
pub fn write_incremental(book: &Book, report: &IncrementalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = write_reports(book, &report.work, dir)?;
    write(dir, INCREMENTAL_JSON, &pretty(&incremental_report_json(report)), &mut written)?;
    Ok(written)
}
