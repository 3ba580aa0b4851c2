//! CSV files. Numbers are written with Rust's shortest round-trip `f64`
//! formatting, which is locale independent, and rows always come out in a
//! deterministic order.
//!
//! | file | columns |
//! |------|---------|
//! | staircase | `repeat,t,u,u_eff,alpha,branch` |
//! | identification | `t,u,alpha` |
//! | trace | `valve,controller,seed,t,alpha_ref,alpha,u_applied,u_commanded,cost` |
//! | curve | `episode,cumulative_cost,wall_time_s` |
//! | curve runs | `agent,valve,seed,episode,cumulative_cost` |
//! | curve aggregate | `agent,episode,mean_cost,smoothed_cost` |
//! | report | `valve,controller,condition,mean_mse,std_mse,count,seeds` |
//!
//! `wall_time_s` is left empty unless timing was requested, so that repeated
//! runs produce identical files. In reports, `valve` is `all` for rows
//! aggregated over valves and `seeds` is a `;`-separated list.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;
use valve_core::valve::StaircaseTrace;
use valve_core::{ControllerKind, EpisodeTrace, StepRecord};

use crate::metrics::MetricReport;

pub const STAIRCASE_HEADER: [&str; 6] = ["repeat", "t", "u", "u_eff", "alpha", "branch"];
pub const IDENT_HEADER: [&str; 3] = ["t", "u", "alpha"];
pub const TRACE_HEADER: [&str; 9] = ["valve", "controller", "seed", "t", "alpha_ref", "alpha", "u_applied", "u_commanded", "cost"];
pub const CURVE_HEADER: [&str; 3] = ["episode", "cumulative_cost", "wall_time_s"];
pub const RUNS_HEADER: [&str; 5] = ["agent", "valve", "seed", "episode", "cumulative_cost"];
pub const AGGREGATE_HEADER: [&str; 4] = ["agent", "episode", "mean_cost", "smoothed_cost"];
pub const REPORT_HEADER: [&str; 7] = ["valve", "controller", "condition", "mean_mse", "std_mse", "count", "seeds"];

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("line {line}: {detail}")]
    Format { line: u64, detail: String },
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn create(path: &Path) -> Result<File, ExportError> {
    File::create(path).map_err(|source| ExportError::Io { path: path.display().to_string(), source })
}

fn open(path: &Path) -> Result<File, ExportError> {
    File::open(path).map_err(|source| ExportError::Io { path: path.display().to_string(), source })
}

pub fn write_staircase<W: Write>(out: W, traces: &[StaircaseTrace]) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STAIRCASE_HEADER)?;
    for tr in traces {
        for s in &tr.samples {
            w.write_record([tr.repeat.to_string(), num(s.t), num(s.u), num(s.u_eff), num(s.alpha), s.branch.label().to_string()])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_identification<W: Write>(out: W, u: &[f64], alpha: &[f64], dt: f64) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(IDENT_HEADER)?;
    for (k, (u, a)) in u.iter().zip(alpha).enumerate() {
        w.write_record([num(k as f64 * dt), num(*u), num(*a)])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_traces<W: Write>(out: W, traces: &[EpisodeTrace]) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for tr in traces {
        for r in &tr.records {
            w.write_record([
                tr.valve_id.to_string(),
                tr.controller.label().to_string(),
                tr.seed.to_string(),
                num(r.t),
                num(r.alpha_ref),
                num(r.alpha),
                num(r.u_applied),
                num(r.u_commanded),
                num(r.cost),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads traces back; consecutive rows with the same `(valve, controller,
/// seed)` form one trace.
pub fn read_traces<R: Read>(input: R) -> Result<Vec<EpisodeTrace>, ExportError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(TRACE_HEADER) {
        return Err(ExportError::Format { line: 1, detail: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()) });
    }
    let mut out: Vec<EpisodeTrace> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |detail: String| ExportError::Format { line, detail };
        let f = |i: usize| -> Result<f64, ExportError> { rec[i].parse::<f64>().map_err(|e| bad(format!("column {}: {e}", TRACE_HEADER[i]))) };
        let valve: u8 = rec[0].parse().map_err(|e| bad(format!("valve: {e}")))?;
        let controller = ControllerKind::from_label(&rec[1]).ok_or_else(|| bad(format!("unknown controller {:?}", &rec[1])))?;
        let seed: u64 = rec[2].parse().map_err(|e| bad(format!("seed: {e}")))?;
        let record = StepRecord { t: f(3)?, alpha_ref: f(4)?, alpha: f(5)?, u_applied: f(6)?, u_commanded: f(7)?, cost: f(8)? };
        match out.last_mut() {
            Some(t) if t.valve_id == valve && t.controller == controller && t.seed == seed => t.records.push(record),
            _ => {
                let mut t = EpisodeTrace::new(valve, controller, seed);
                t.records.push(record);
                out.push(t);
            }
        }
    }
    Ok(out)
}

pub fn write_curve<W: Write>(out: W, curve: &[f64], wall_time: Option<&[f64]>) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_HEADER)?;
    for (i, c) in curve.iter().enumerate() {
        let wt = wall_time.and_then(|w| w.get(i)).map(|t| num(*t)).unwrap_or_default();
        w.write_record([i.to_string(), num(*c), wt])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// One training run's curve, tagged for the runs file.
pub struct CurveRun<'a> {
    pub agent: ControllerKind,
    pub valve: u8,
    pub seed: u64,
    pub curve: &'a [f64],
}

pub fn write_curve_runs<W: Write>(out: W, runs: &[CurveRun<'_>]) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RUNS_HEADER)?;
    for r in runs {
        for (i, c) in r.curve.iter().enumerate() {
            w.write_record([r.agent.label().to_string(), r.valve.to_string(), r.seed.to_string(), i.to_string(), num(*c)])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_curve_aggregate<W: Write>(out: W, rows: &[(ControllerKind, &[f64], &[f64])]) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AGGREGATE_HEADER)?;
    for (agent, mean, smooth) in rows {
        for (i, (m, s)) in mean.iter().zip(smooth.iter()).enumerate() {
            w.write_record([agent.label().to_string(), i.to_string(), num(*m), num(*s)])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_report<W: Write>(out: W, report: &MetricReport) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    let seeds = report.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";");
    for r in &report.rows {
        let valve = r.valve.map(|v| v.to_string()).unwrap_or_else(|| "all".into());
        w.write_record([valve, r.controller.label().to_string(), r.condition.clone(), num(r.mean), num(r.std), r.count.to_string(), seeds.clone()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Writes to `path` through one of the writers above.
pub fn to_file(path: &Path, f: impl FnOnce(File) -> Result<(), ExportError>) -> Result<(), ExportError> {
    f(create(path)?)
}

pub fn read_traces_file(path: &Path) -> Result<Vec<EpisodeTrace>, ExportError> {
    read_traces(open(path)?)
}
