//! Trace CSV and JSON summary files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::sim::{SimTrace, TraceRow};
use crate::analysis::StabilityCertificate;
use crate::error::{Error, Result};
use crate::solvers::SolverKind;

pub const CSV_HEADER: [&str; 7] = [
    "k",
    "err_state_norm",
    "err_corr_norm",
    "lyapunov_v",
    "dist_qeq",
    "solver",
    "seed",
];

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_SCHEMA: &str = "distobs-summary/1";

#[derive(Debug, Serialize, Deserialize)]
struct CsvRecord {
    k: usize,
    err_state_norm: f64,
    err_corr_norm: f64,
    lyapunov_v: f64,
    dist_qeq: f64,
    solver: SolverKind,
    seed: u64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn trace_csv_string(trace: &SimTrace) -> String {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in &trace.rows {
        w.serialize(CsvRecord {
            k: r.k,
            err_state_norm: r.err_state_norm,
            err_corr_norm: r.err_corr_norm,
            lyapunov_v: r.lyapunov_v,
            dist_qeq: r.dist_qeq,
            solver: trace.solver,
            seed: trace.seed,
        })
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

pub fn write_trace_csv(trace: &SimTrace, path: &Path) -> Result<()> {
    fs::write(path, trace_csv_string(trace)).map_err(|e| Error::io(path, e))
}

/// Rows plus the solver and seed recorded in the file.
pub fn read_trace_csv(path: &Path) -> Result<(Vec<TraceRow>, Option<(SolverKind, u64)>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Config(format!(
            "{}: unexpected header `{}`",
            path.display(),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    let mut meta = None;
    for rec in r.deserialize::<CsvRecord>() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        meta = Some((rec.solver, rec.seed));
        rows.push(TraceRow {
            k: rec.k,
            err_state_norm: rec.err_state_norm,
            err_corr_norm: rec.err_corr_norm,
            lyapunov_v: rec.lyapunov_v,
            dist_qeq: rec.dist_qeq,
        });
    }
    Ok((rows, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub solver: SolverKind,
    pub seed: u64,
    pub steps: usize,
    pub config_hash: String,
    pub config: ScenarioConfig,
    pub initial_err_state_norm: Option<f64>,
    pub final_err_state_norm: Option<f64>,
    pub final_err_corr_norm: Option<f64>,
    pub max_err_corr_norm: Option<f64>,
    pub final_lyapunov_v: Option<f64>,
    pub final_dist_qeq: Option<f64>,
    pub final_agent_errors: Vec<f64>,
    pub baseline_final_err_state_norm: Option<f64>,
    pub certificate: Option<StabilityCertificate>,
}

impl Summary {
    pub fn from_trace(trace: &SimTrace, certificate: Option<StabilityCertificate>) -> Self {
        let first = trace.rows.first();
        let last = trace.rows.last();
        Self {
            schema: SUMMARY_SCHEMA.to_string(),
            solver: trace.solver,
            seed: trace.seed,
            steps: trace.rows.len(),
            config_hash: trace.config.hash(),
            config: trace.config.clone(),
            initial_err_state_norm: first.map(|r| r.err_state_norm),
            final_err_state_norm: last.map(|r| r.err_state_norm),
            final_err_corr_norm: last.map(|r| r.err_corr_norm),
            max_err_corr_norm: trace
                .rows
                .iter()
                .map(|r| r.err_corr_norm)
                .reduce(f64::max),
            final_lyapunov_v: last.map(|r| r.lyapunov_v),
            final_dist_qeq: last.map(|r| r.dist_qeq),
            final_agent_errors: trace.agent_errors.last().cloned().unwrap_or_default(),
            baseline_final_err_state_norm: trace
                .baseline_err
                .as_ref()
                .and_then(|b| b.last().copied()),
            certificate,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary is serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value is serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes `trace.csv`, `summary.json` and `config.toml` into `dir`.
pub fn export(trace: &SimTrace, summary: &Summary, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(TRACE_FILE);
    let json = dir.join(SUMMARY_FILE);
    let cfg = dir.join(CONFIG_FILE);
    write_trace_csv(trace, &csv)?;
    fs::write(&json, summary.to_json() + "\n").map_err(|e| Error::io(&json, e))?;
    fs::write(&cfg, trace.config.to_toml_string()).map_err(|e| Error::io(&cfg, e))?;
    Ok(vec![csv, json, cfg])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::sim::run;

    fn tiny() -> ScenarioConfig {
        ScenarioConfig {
            n_agents: 4,
            n_anchors: 2,
            workspace: 5.0,
            steps: 12,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn empty_trace_is_header_only() {
        let t = run(&ScenarioConfig { steps: 0, ..tiny() }).unwrap();
        assert_eq!(trace_csv_string(&t), CSV_HEADER.join(",") + "\n");
    }

    #[test]
    fn csv_and_summary_round_trip() {
        let t = run(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let summary = Summary::from_trace(&t, None);
        export(&t, &summary, dir.path()).unwrap();
        let (rows, meta) = read_trace_csv(&dir.path().join(TRACE_FILE)).unwrap();
        assert_eq!(rows, t.rows);
        assert_eq!(meta, Some((t.solver, t.seed)));
        let text = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert_eq!(Summary::from_json(&text).unwrap(), summary);
        let cfg = ScenarioConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(cfg, t.config);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let t = run(&ScenarioConfig { steps: 1, ..tiny() }).unwrap();
        let err = write_trace_csv(&t, Path::new("/proc/nope/trace.csv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
