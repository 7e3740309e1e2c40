//! `modeseq report`: join finished runs into one ablation table. Metric cells
//! are copied verbatim from each run's report.json (same JSON token text), so
//! the table never re-rounds a number.

use crate::error::CliError;
use crate::runs::RunManifest;
use crate::ReportArgs;
use serde::Serialize;
use serde_json::Value;
use std::path::Path;

struct RunRow {
    name: String,
    manifest: RunManifest,
    kind: String,
    modes: u64,
    report: Value,
}

fn load_run(dir: &Path) -> Result<RunRow, String> {
    let manifest = RunManifest::read(dir).map_err(|e| e.to_string())?;
    let report_path = dir.join("report.json");
    let text = std::fs::read_to_string(&report_path)
        .map_err(|e| format!("reading {}: {e}", report_path.display()))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| format!("parsing {}: {e}", report_path.display()))?;
    let kind = value
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| format!("{} has no kind field", report_path.display()))?
        .to_string();
    let modes = value.get("modes").and_then(Value::as_u64).unwrap_or(0);
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunRow { name, manifest, kind, modes, report: value })
}

/// Serialize an enum the same way the manifest does, yielding its snake_case
/// token.
fn enum_token<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

/// Fetch a nested field and render it exactly as it appears in the JSON.
fn cell(report: &Value, path: &[&str]) -> String {
    let mut v = report;
    for key in path {
        match v.get(key) {
            Some(inner) => v = inner,
            None => return String::new(),
        }
    }
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn render_aligned(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let fmt_row = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{:<w$}", c, w = widths[i]))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = fmt_row(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row));
        out.push('\n');
    }
    out
}

const MARGINAL_METRICS: [(&str, &[&str]); 7] = [
    ("min_ade", &["report", "aggregate", "min_ade"]),
    ("min_fde", &["report", "aggregate", "min_fde"]),
    ("miss_rate", &["report", "aggregate", "miss_rate"]),
    ("m_ap", &["report", "aggregate", "m_ap"]),
    ("soft_m_ap", &["report", "aggregate", "soft_m_ap"]),
    ("coverage", &["report", "aggregate", "coverage"]),
    ("inversion_rate", &["report", "aggregate", "inversion_rate"]),
];

const JOINT_METRICS: [(&str, &[&str]); 5] = [
    ("joint_min_ade", &["report", "joint_min_ade"]),
    ("joint_min_fde", &["report", "joint_min_fde"]),
    ("joint_miss_rate", &["report", "joint_miss_rate"]),
    ("joint_m_ap", &["report", "joint_m_ap"]),
    ("joint_soft_m_ap", &["report", "joint_soft_m_ap"]),
];

pub fn run(args: ReportArgs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for dir in &args.runs {
        match load_run(dir) {
            Ok(r) => rows.push(r),
            Err(e) => missing.push(format!("{}: {e}", dir.display())),
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "missing or unreadable reports:\n  {}",
            missing.join("\n  ")
        )));
    }

    let kind = rows[0].kind.clone();
    if rows.iter().any(|r| r.kind != kind) {
        return Err(CliError::Config(
            "cannot mix marginal and joint runs in one table".to_string(),
        ));
    }

    // The K column appears automatically once the joined runs disagree on it.
    let mixed_k = rows.iter().any(|r| r.modes != rows[0].modes);

    let mut header: Vec<String> =
        ["run", "variant", "strategy", "ignored", "rearrange"].map(String::from).to_vec();
    if mixed_k {
        header.push("k".to_string());
    }
    let metrics: &[(&str, &[&str])] =
        if kind == "joint" { &JOINT_METRICS } else { &MARGINAL_METRICS };
    header.extend(metrics.iter().map(|(name, _)| name.to_string()));

    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let m = &r.manifest;
            let mut row = vec![
                r.name.clone(),
                enum_token(&m.config.model.variant),
                enum_token(&m.config.train.assign.strategy),
                enum_token(&m.config.train.assign.ignored_variant),
                if m.config.model.rearrange { "on" } else { "off" }.to_string(),
            ];
            if mixed_k {
                row.push(r.modes.to_string());
            }
            row.extend(metrics.iter().map(|(_, path)| cell(&r.report, path)));
            row
        })
        .collect();

    print!("{}", render_aligned(&header, &table));

    let mut csv = header.join(",");
    csv.push('\n');
    for row in &table {
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    match &args.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, &csv)?;
            println!("\ncsv: {}", path.display());
        }
        None => {
            println!();
            print!("{csv}");
        }
    }
    Ok(())
}
