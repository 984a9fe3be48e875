//! CSV trace and JSON metadata sidecar.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{ErrorTrace, TraceMetadata};

pub const CSV_NAME: &str = "trace.csv";

/// Column names for the given run indices.
pub fn header(runs: &[usize]) -> Vec<String> {
    let mut h = vec![
        "iter".to_string(),
        "epsilon_median".to_string(),
        "epsilon_aligned_median".to_string(),
    ];
    h.extend(runs.iter().map(|r| format!("epsilon_run_{r}")));
    h.extend(runs.iter().map(|r| format!("epsilon_aligned_run_{r}")));
    h.extend(
        ["objective", "scalars_fused", "scalars_disseminated"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

/// Sidecar path next to a CSV trace.
pub fn metadata_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Writes `path` (CSV) and its `.json` sidecar.
pub fn emit_trace(trace: &ErrorTrace, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    w.write_record(header(&trace.runs)).map_err(csv_err)?;
    for row in &trace.rows {
        let mut rec = vec![
            row.iter.to_string(),
            format!("{:e}", row.epsilon_median),
            format!("{:e}", row.epsilon_aligned_median),
        ];
        rec.extend(row.epsilon_runs.iter().map(|v| format!("{v:e}")));
        rec.extend(row.epsilon_aligned_runs.iter().map(|v| format!("{v:e}")));
        rec.push(format!("{:e}", row.objective));
        rec.push(row.scalars_fused.to_string());
        rec.push(row.scalars_disseminated.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let meta_path = metadata_path(path);
    let meta = File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut meta = BufWriter::new(meta);
    serde_json::to_writer_pretty(&mut meta, &trace.metadata)
        .map_err(|e| Error::io(&meta_path, e.into()))?;
    meta.write_all(b"\n").map_err(|e| Error::io(&meta_path, e))?;
    meta.flush().map_err(|e| Error::io(&meta_path, e))
}

/// One parsed CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCsvRow {
    pub iter: usize,
    pub epsilon_median: f64,
    pub epsilon_aligned_median: f64,
    pub epsilon_runs: Vec<f64>,
    pub epsilon_aligned_runs: Vec<f64>,
    pub objective: f64,
    pub scalars_fused: u64,
    pub scalars_disseminated: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTrace {
    pub header: Vec<String>,
    pub rows: Vec<TraceCsvRow>,
}

pub fn read_trace(path: &Path) -> Result<ParsedTrace> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| parse_err(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 6 || !header.len().is_multiple_of(2) {
        return Err(parse_err(format!("unexpected column count {}", header.len())));
    }
    let runs = (header.len() - 6) / 2;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| parse_err(format!("bad number '{}' in column {}", &rec[i], header[i])))
        };
        let u = |i: usize| -> Result<u64> {
            rec[i]
                .parse()
                .map_err(|_| parse_err(format!("bad integer '{}' in column {}", &rec[i], header[i])))
        };
        rows.push(TraceCsvRow {
            iter: u(0)? as usize,
            epsilon_median: f(1)?,
            epsilon_aligned_median: f(2)?,
            epsilon_runs: (3..3 + runs).map(f).collect::<Result<_>>()?,
            epsilon_aligned_runs: (3 + runs..3 + 2 * runs).map(f).collect::<Result<_>>()?,
            objective: f(3 + 2 * runs)?,
            scalars_fused: u(4 + 2 * runs)?,
            scalars_disseminated: u(5 + 2 * runs)?,
        });
    }
    Ok(ParsedTrace { header, rows })
}

pub fn read_metadata(path: &Path) -> Result<TraceMetadata> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Summary printed by the `report` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub iterations: usize,
    pub runs: usize,
    pub final_epsilon: Option<f64>,
    pub final_epsilon_aligned: Option<f64>,
    pub threshold: f64,
    /// First iteration with median aligned error below the threshold.
    pub iterations_to_threshold: Option<usize>,
}

pub fn summarize(trace: &ParsedTrace, threshold: f64) -> TraceSummary {
    TraceSummary {
        iterations: trace.rows.len(),
        runs: (trace.header.len() - 6) / 2,
        final_epsilon: trace.rows.last().map(|r| r.epsilon_median),
        final_epsilon_aligned: trace.rows.last().map(|r| r.epsilon_aligned_median),
        threshold,
        iterations_to_threshold: trace
            .rows
            .iter()
            .find(|r| r.epsilon_aligned_median < threshold)
            .map(|r| r.iter),
    }
}
