//! CSV and summary emitters for run reports.
//!
//! Floats are written with Rust's shortest round-trip formatting, so identical
//! reports give byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::RunReport;
use crate::metrics::mean_std;

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Contract(format!("csv: {other:?}")),
    }
}

fn to_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>) -> Result<String> {
    let mut w = csv::Writer::from_writer(vec![]);
    write(&mut w)?;
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `after_task,task,accuracy`, one row per lower-triangular entry (tasks 1-based).
pub fn accuracy_csv(r: &RunReport) -> Result<String> {
    to_string(|w| {
        w.write_record(["after_task", "task", "accuracy"]).map_err(csv_err)?;
        for (t, row) in r.accuracy.rows().iter().enumerate() {
            for (i, a) in row.iter().enumerate() {
                w.write_record([(t + 1).to_string(), (i + 1).to_string(), a.to_string()])
                    .map_err(csv_err)?;
            }
        }
        Ok(())
    })
}

/// Square count matrix; the first column holds the true class.
pub fn confusion_csv(r: &RunReport) -> Result<String> {
    to_string(|w| {
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(r.classes.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (c, row) in r.classes.iter().zip(r.confusion.rows()) {
            let mut rec = vec![c.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        Ok(())
    })
}

/// `snapshot,nc`; snapshot 0 is the model before any task.
pub fn nc_csv(r: &RunReport) -> Result<String> {
    to_string(|w| {
        w.write_record(["snapshot", "nc"]).map_err(csv_err)?;
        for (i, v) in r.nc.iter().enumerate() {
            w.write_record([i.to_string(), v.to_string()]).map_err(csv_err)?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub seed: u64,
    pub method: String,
    pub task: usize,
    pub accuracy: f64,
    pub nc: f64,
    pub last_task_bias: f64,
}

/// One row per task of a run. `label` names the method column (the method
/// name unless the caller tags it, e.g. for joint runs).
pub fn metric_rows(r: &RunReport, label: &str) -> Vec<MetricRow> {
    r.tasks
        .iter()
        .enumerate()
        .map(|(i, t)| MetricRow {
            seed: r.seed,
            method: label.to_string(),
            task: i + 1,
            accuracy: t.accuracy,
            nc: t.nc,
            last_task_bias: t.last_task_bias,
        })
        .collect()
}

pub fn metrics_csv(rows: &[MetricRow]) -> Result<String> {
    to_string(|w| {
        w.write_record(["seed", "method", "task", "accuracy", "nc", "last_task_bias"])
            .map_err(csv_err)?;
        for r in rows {
            w.write_record([
                r.seed.to_string(),
                r.method.clone(),
                r.task.to_string(),
                r.accuracy.to_string(),
                r.nc.to_string(),
                r.last_task_bias.to_string(),
            ])
            .map_err(csv_err)?;
        }
        Ok(())
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut rows = vec![];
    for (i, rec) in rd.deserialize().enumerate() {
        rows.push(rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg: e.to_string(),
        })?);
    }
    Ok(rows)
}

/// Mean ± std across seeds of one method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryLine {
    pub method: String,
    pub seeds: usize,
    pub accuracy: (f64, f64),
    pub nc: (f64, f64),
    pub last_task_bias: (f64, f64),
}

/// Aggregates the final task of every (method, seed) run.
pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryLine> {
    let mut last: BTreeMap<(&str, u64), &MetricRow> = BTreeMap::new();
    for r in rows {
        let e = last.entry((r.method.as_str(), r.seed)).or_insert(r);
        if r.task > e.task {
            *e = r;
        }
    }
    let mut by_method: BTreeMap<&str, Vec<&MetricRow>> = BTreeMap::new();
    for ((m, _), r) in last {
        by_method.entry(m).or_default().push(r);
    }
    by_method
        .into_iter()
        .map(|(m, rs)| {
            let col = |f: fn(&MetricRow) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryLine {
                method: m.to_string(),
                seeds: rs.len(),
                accuracy: col(|r| r.accuracy),
                nc: col(|r| r.nc),
                last_task_bias: col(|r| r.last_task_bias),
            }
        })
        .collect()
}

pub fn summary_text(lines: &[SummaryLine]) -> String {
    let mut out = format!(
        "{:<24} {:>5} {:>16} {:>16} {:>16}\n",
        "method", "seeds", "final acc (%)", "final nc", "last-task bias"
    );
    for l in lines {
        out += &format!(
            "{:<24} {:>5} {:>16} {:>16} {:>16}\n",
            l.method,
            l.seeds,
            format!("{:.2} ± {:.2}", 100.0 * l.accuracy.0, 100.0 * l.accuracy.1),
            format!("{:.4} ± {:.4}", l.nc.0, l.nc.1),
            format!("{:.3} ± {:.3}", l.last_task_bias.0, l.last_task_bias.1),
        );
    }
    out
}

const CURVE_HEADER: [&str; 7] = ["method", "task", "seeds", "accuracy_mean", "accuracy_std", "nc_mean", "nc_std"];

fn curve_records(rows: &[MetricRow]) -> Vec<Vec<String>> {
    let mut groups: BTreeMap<(&str, usize), Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method.as_str(), r.task)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((m, t), rs)| {
            let (am, asd) = mean_std(&rs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
            let (nm, nsd) = mean_std(&rs.iter().map(|r| r.nc).collect::<Vec<_>>());
            vec![
                m.to_string(),
                t.to_string(),
                rs.len().to_string(),
                am.to_string(),
                asd.to_string(),
                nm.to_string(),
                nsd.to_string(),
            ]
        })
        .collect()
}

/// Accuracy-vs-task curve: mean and std across seeds per (method, task).
pub fn curve_csv(rows: &[MetricRow]) -> Result<String> {
    to_string(|w| {
        w.write_record(CURVE_HEADER).map_err(csv_err)?;
        for rec in curve_records(rows) {
            w.write_record(&rec).map_err(csv_err)?;
        }
        Ok(())
    })
}

/// [`curve_csv`] of several runs with a leading `run` column.
pub fn combined_curve_csv(runs: &[(String, Vec<MetricRow>)]) -> Result<String> {
    to_string(|w| {
        let mut header = vec!["run"];
        header.extend(CURVE_HEADER);
        w.write_record(&header).map_err(csv_err)?;
        for (run, rows) in runs {
            for rec in curve_records(rows) {
                let mut full = vec![run.clone()];
                full.extend(rec);
                w.write_record(&full).map_err(csv_err)?;
            }
        }
        Ok(())
    })
}

/// Writes accuracy, confusion and NC CSVs plus the JSON report into `dir`.
pub fn write_run(dir: &Path, r: &RunReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("accuracy.csv"), accuracy_csv(r)?)?;
    fs::write(dir.join("confusion.csv"), confusion_csv(r)?)?;
    fs::write(dir.join("nc.csv"), nc_csv(r)?)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(r)? + "\n")?;
    Ok(())
}

/// Writes `metrics.csv`, `curve.csv` and `summary.txt` into `dir`.
pub fn write_aggregate(dir: &Path, rows: &[MetricRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(rows)?)?;
    fs::write(dir.join("curve.csv"), curve_csv(rows)?)?;
    fs::write(dir.join("summary.txt"), summary_text(&summarize(rows)))?;
    Ok(())
}
