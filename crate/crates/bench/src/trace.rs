//! Trace records and their CSV / JSON files.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

pub const CSV_HEADER: &str = "iteration,wall_time_s,elbo,test_loglik,gamma,rejections";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: u64,
    pub wall_time_s: f64,
    pub elbo: f64,
    /// Mean log predictive density per test point, original target scale.
    pub test_loglik: f64,
    pub gamma: f64,
    pub rejections: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    Json,
}

impl TraceFormat {
    /// JSON for a `.json` extension, CSV otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => TraceFormat::Json,
            _ => TraceFormat::Csv,
        }
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn trace_to_csv(records: &[TraceRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration,
            fmt_f64(r.wall_time_s),
            fmt_f64(r.elbo),
            fmt_f64(r.test_loglik),
            fmt_f64(r.gamma),
            r.rejections
        ));
    }
    out
}

pub fn emit_trace(records: &[TraceRecord], path: &Path, format: TraceFormat) -> Result<()> {
    if records.is_empty() {
        return Err(BenchError::Config("refusing to write an empty trace".into()));
    }
    let body = match format {
        TraceFormat::Csv => trace_to_csv(records),
        TraceFormat::Json => {
            serde_json::to_string_pretty(records).map_err(|e| BenchError::Config(e.to_string()))? + "\n"
        }
    };
    fs::write(path, body)?;
    Ok(())
}

fn field<T: FromStr>(cell: Option<&str>, line: u64) -> Result<T> {
    cell.and_then(|c| c.trim().parse().ok()).ok_or_else(|| BenchError::Parse {
        line,
        message: "bad trace field".into(),
    })
}

pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        _ => {
            return Err(BenchError::Parse {
                line: 1,
                message: "trace header does not match".into(),
            })
        }
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(k, l)| {
            let line = k as u64 + 2;
            let mut cells = l.split(',');
            let rec = TraceRecord {
                iteration: field(cells.next(), line)?,
                wall_time_s: field(cells.next(), line)?,
                elbo: field(cells.next(), line)?,
                test_loglik: field(cells.next(), line)?,
                gamma: field(cells.next(), line)?,
                rejections: field(cells.next(), line)?,
            };
            if cells.next().is_some() {
                return Err(BenchError::Parse {
                    line,
                    message: "too many trace fields".into(),
                });
            }
            Ok(rec)
        })
        .collect()
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    if !path.exists() {
        return Err(BenchError::FileNotFound(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    match TraceFormat::from_path(path) {
        TraceFormat::Csv => parse_trace_csv(&text),
        TraceFormat::Json => serde_json::from_str(&text).map_err(|e| BenchError::Parse {
            line: e.line() as u64,
            message: e.to_string(),
        }),
    }
}

/// `<trace path>.config.json`.
pub fn sidecar_path(trace: &Path) -> PathBuf {
    let mut s = trace.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

pub fn write_sidecar<T: Serialize>(trace: &Path, config: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(config).map_err(|e| BenchError::Config(e.to_string()))? + "\n";
    fs::write(sidecar_path(trace), body)?;
    Ok(())
}
