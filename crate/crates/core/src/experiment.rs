//! Config-driven runs and their output bundles.
//!
//! A simulation writes three files next to each other:
//!
//! - `<stem>.csv`: the trace, one row per accepted step, fixed columns
//!   `t, y_*, yref_*, e_norm, phi, funnel_ratio, xi_{i}_*, theta_{i}_norm, u_*, h`;
//! - `<stem>.state.csv`: the full closed-loop state `t, h, x_*, xi_*, eta_*`
//!   per row, which is what `diagnose` needs to rebuild every derivative;
//! - `<stem>.meta.json`: [`RunMetadata`].
//!
//! Floats are written with 17 significant digits so they read back exactly.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, DiagnosticsReport};
use crate::config::ExperimentConfig;
use crate::controller::{initial_feasibility, FeasibilityReport};
use crate::error::{AnalysisError, ConfigError, SimError};
use crate::integrator::{
    simulate_partial, ClosedLoop, IntegratorConfig, InvariantSummary, SimResult, SimStats,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Exit codes of the command-line runs.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const STEP_UNDERFLOW: i32 = 2;
    pub const INFEASIBLE: i32 = 3;
    /// The run finished but a checked invariant or identity did not hold.
    pub const CHECK_FAILED: i32 = 4;
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Plant(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Sim(e) => e.exit_code(),
            _ => exit::FAILURE,
        }
    }

    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn csv(path: &Path) -> impl FnOnce(csv::Error) -> Self + '_ {
        move |e| ExperimentError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

/// Paths of one output bundle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub trace: PathBuf,
    pub state: PathBuf,
    pub meta: PathBuf,
}

impl Bundle {
    pub fn new(dir: &Path, stem: &str) -> Self {
        Self {
            trace: dir.join(format!("{stem}.csv")),
            state: dir.join(format!("{stem}.state.csv")),
            meta: dir.join(format!("{stem}.meta.json")),
        }
    }

    /// The bundle a trace file belongs to.
    pub fn for_trace(trace: &Path) -> Self {
        let dir = trace.parent().unwrap_or(Path::new(""));
        let name = trace.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let stem = name.strip_suffix(".csv").unwrap_or(&name);
        let mut b = Self::new(dir, stem);
        b.trace = trace.to_path_buf();
        b
    }

    pub fn diagnostics(&self) -> PathBuf {
        with_suffix(&self.trace, "diagnostics.json")
    }
}

fn with_suffix(trace: &Path, suffix: &str) -> PathBuf {
    let name = trace.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.strip_suffix(".csv").unwrap_or(&name);
    trace.with_file_name(format!("{stem}.{suffix}"))
}

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn trace_columns(r: usize, n: usize) -> Vec<String> {
    let mut c = vec!["t".to_string()];
    c.extend((1..=n).map(|k| format!("y_{k}")));
    c.extend((1..=n).map(|k| format!("yref_{k}")));
    c.extend(["e_norm", "phi", "funnel_ratio"].map(String::from));
    for i in 1..r {
        c.extend((1..=n).map(|k| format!("xi_{i}_{k}")));
    }
    c.extend((1..r).map(|i| format!("theta_{i}_norm")));
    c.extend((1..=n).map(|k| format!("u_{k}")));
    c.push("h".into());
    c
}

pub fn state_columns(r: usize, n: usize, m: usize) -> Vec<String> {
    let mut c = vec!["t".to_string(), "h".to_string()];
    c.extend((0..r * n).map(|k| format!("x_{}", k + 1)));
    c.extend((0..(r - 1) * n).map(|k| format!("xi_{}", k + 1)));
    c.extend((0..m).map(|k| format!("eta_{}", k + 1)));
    c
}

pub fn write_trace(path: &Path, res: &SimResult) -> Result<(), ExperimentError> {
    let n = res.n;
    let mut w = csv::Writer::from_path(path).map_err(ExperimentError::csv(path))?;
    w.write_record(trace_columns(res.r, n)).map_err(ExperimentError::csv(path))?;
    let mut row = Vec::new();
    for s in &res.samples {
        row.clear();
        row.push(s.t);
        row.extend(s.x.rows(0, n).iter());
        row.extend(s.y_ref.iter());
        row.extend([s.e_norm, s.phi, s.funnel_ratio]);
        row.extend(s.xi.iter());
        row.extend(s.theta_norms.iter());
        row.extend(s.u.iter());
        row.push(s.h);
        w.write_record(row.iter().map(|v| fmt_float(*v)))
            .map_err(ExperimentError::csv(path))?;
    }
    w.flush().map_err(ExperimentError::io(path))
}

pub fn write_state(path: &Path, res: &SimResult) -> Result<(), ExperimentError> {
    let m = res.samples.first().map_or(0, |s| s.eta.len());
    let mut w = csv::Writer::from_path(path).map_err(ExperimentError::csv(path))?;
    w.write_record(state_columns(res.r, res.n, m)).map_err(ExperimentError::csv(path))?;
    for s in &res.samples {
        let row = [s.t, s.h]
            .into_iter()
            .chain(s.x.iter().copied())
            .chain(s.xi.iter().copied())
            .chain(s.eta.iter().copied());
        w.write_record(row.map(fmt_float)).map_err(ExperimentError::csv(path))?;
    }
    w.flush().map_err(ExperimentError::io(path))
}

/// Reads a state file and recomputes every sample with the controller of
/// `cl`.
pub fn read_state(path: &Path, cl: &ClosedLoop<'_>) -> Result<Vec<crate::integrator::Sample>, ExperimentError> {
    let bad = |message: String| ExperimentError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut rd = csv::Reader::from_path(path).map_err(ExperimentError::csv(path))?;
    let expected = state_columns(cl.sys.r, cl.sys.n, cl.sys.m());
    let header: Vec<String> = rd
        .headers()
        .map_err(ExperimentError::csv(path))?
        .iter()
        .map(String::from)
        .collect();
    if header != expected {
        return Err(bad(format!(
            "state columns do not match the configured plant (expected {} columns starting {:?}, found {})",
            expected.len(),
            &expected[..expected.len().min(4)],
            header.len()
        )));
    }
    let mut out = Vec::new();
    for (k, rec) in rd.records().enumerate() {
        let rec = rec.map_err(ExperimentError::csv(path))?;
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(format!("row {}: {e}", k + 1)))?;
        let z = DVector::from_column_slice(&v[2..]);
        let s = crate::integrator::Sample::from_state(cl, v[0], v[1], &z)
            .map_err(|e| bad(format!("row {} (t = {}): {e}", k + 1, v[0])))?;
        out.push(s);
    }
    Ok(out)
}

/// Checks that a trace file carries the fixed column schema for `(r, n)`.
pub fn check_trace_header(path: &Path, r: usize, n: usize) -> Result<usize, ExperimentError> {
    let mut rd = csv::Reader::from_path(path).map_err(ExperimentError::csv(path))?;
    let header: Vec<String> = rd
        .headers()
        .map_err(ExperimentError::csv(path))?
        .iter()
        .map(String::from)
        .collect();
    let expected = trace_columns(r, n);
    if let Some(missing) = expected.iter().find(|c| !header.contains(c)) {
        return Err(ExperimentError::Format {
            path: path.to_path_buf(),
            message: format!("missing column `{missing}`"),
        });
    }
    Ok(rd.records().count())
}

/// Sidecar metadata of a simulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub version: String,
    pub config: serde_json::Value,
    pub plant: String,
    pub order: usize,
    pub outputs: usize,
    pub gain: f64,
    pub theta_hat: Vec<f64>,
    pub integral_arg: Option<String>,
    pub integrator: IntegratorConfig,
    /// Exactly the text printed by the `feasible` command.
    pub feasibility_text: String,
    pub feasibility: FeasibilityReport,
    pub stats: SimStats,
    pub invariants: InvariantSummary,
    pub completed: bool,
    pub failure: Option<String>,
    pub rows: usize,
    pub columns: Vec<String>,
    pub wall_time_s: f64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub message: String,
    pub result: Option<SimResult>,
    pub bundle: Option<Bundle>,
}

/// Feasibility report for the configured initial data.
pub fn run_feasible(cfg: &ExperimentConfig) -> Result<FeasibilityReport, ExperimentError> {
    let sys = cfg.system().map_err(ExperimentError::Plant)?;
    Ok(initial_feasibility(&sys, &cfg.params, &cfg.funnel, &cfg.reference))
}

/// Simulates the configuration and writes the bundle into `dir` (defaults to
/// `[output] dir`). Exit code 0 only when the horizon was completed and every
/// invariant held; 2 on step-size underflow (partial bundle still written);
/// 3 on an infeasible start (nothing written); 4 on a completed run with a
/// violated invariant.
pub fn run_simulate(cfg: &ExperimentConfig, dir: Option<&Path>) -> RunOutcome {
    match simulate_bundle(cfg, dir) {
        Ok((res, bundle)) => {
            let summary = res.summary();
            let (code, message) = match &res.failure {
                Some(f) => (f.exit_code(), f.to_string()),
                None if !summary.holds => (
                    exit::CHECK_FAILED,
                    format!("invariant violated: max phi|e| = {:.6e}", summary.max_funnel_ratio),
                ),
                None => (
                    exit::OK,
                    format!(
                        "completed {} steps; max phi|e| = {:.6e}, max |u| = {:.6e}",
                        res.stats.accepted, summary.max_funnel_ratio, summary.max_u_norm
                    ),
                ),
            };
            RunOutcome {
                exit_code: code,
                message,
                result: Some(res),
                bundle: Some(bundle),
            }
        }
        Err(e) => RunOutcome {
            exit_code: e.exit_code(),
            message: match &e {
                ExperimentError::Sim(SimError::InfeasibleStart(rep)) => {
                    format!("{e}\n{}", rep.render().trim_end())
                }
                _ => e.to_string(),
            },
            result: None,
            bundle: None,
        },
    }
}

fn simulate_bundle(
    cfg: &ExperimentConfig,
    dir: Option<&Path>,
) -> Result<(SimResult, Bundle), ExperimentError> {
    let started = Instant::now();
    let sys = cfg.system().map_err(ExperimentError::Plant)?;
    let res = simulate_partial(&sys, &cfg.params, &cfg.funnel, &cfg.reference, &cfg.integrator)?;
    let dir = dir.unwrap_or(&cfg.output.dir);
    fs::create_dir_all(dir).map_err(ExperimentError::io(dir))?;
    let bundle = Bundle::new(dir, &cfg.output.stem);
    write_trace(&bundle.trace, &res)?;
    write_state(&bundle.state, &res)?;
    let meta = RunMetadata {
        version: VERSION.into(),
        config: serde_json::to_value(&cfg.source).unwrap_or(serde_json::Value::Null),
        plant: sys.name.clone(),
        order: sys.r,
        outputs: sys.n,
        gain: cfg.params.gain,
        theta_hat: cfg.params.theta_hat.clone(),
        integral_arg: sys.integral_arg.map(|a| a.to_string()),
        integrator: cfg.integrator.clone(),
        feasibility_text: res.feasibility.render(),
        feasibility: res.feasibility.clone(),
        stats: res.stats.clone(),
        invariants: res.summary(),
        completed: res.completed(),
        failure: res.failure.as_ref().map(|f| f.to_string()),
        rows: res.samples.len(),
        columns: trace_columns(sys.r, sys.n),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_json(&bundle.meta, &meta)?;
    Ok((res, bundle))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let file = File::create(path).map_err(ExperimentError::io(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| ExperimentError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    w.write_all(b"\n").map_err(ExperimentError::io(path))?;
    w.flush().map_err(ExperimentError::io(path))
}

pub fn read_metadata(path: &Path) -> Result<RunMetadata, ExperimentError> {
    let text = fs::read_to_string(path).map_err(ExperimentError::io(path))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Diagnostics for a stored trace. The state companion file of the trace
/// must be present; the report is also written as
/// `<stem>.diagnostics.json`.
pub fn run_diagnose(trace: &Path, cfg: &ExperimentConfig) -> Result<DiagnosticsReport, ExperimentError> {
    let sys = cfg.system().map_err(ExperimentError::Plant)?;
    check_trace_header(trace, sys.r, sys.n)?;
    let bundle = Bundle::for_trace(trace);
    let cl = ClosedLoop::new(&sys, &cfg.params, &cfg.funnel, &cfg.reference);
    let samples = read_state(&bundle.state, &cl)?;
    let report = analysis::diagnose(&samples, &sys, &cfg.params, &cfg.funnel, &cfg.reference)?;
    write_json(&bundle.diagnostics(), &report)?;
    Ok(report)
}

/// One cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub index: usize,
    /// Axis values in axis order, rendered as TOML literals.
    pub values: Vec<String>,
    pub feasible: bool,
    pub completed: bool,
    pub max_funnel_ratio: Option<f64>,
    pub max_u_norm: Option<f64>,
    pub accepted: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub keys: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepSummary {
    pub fn write_csv(&self, path: &Path) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_path(path).map_err(ExperimentError::csv(path))?;
        let mut header = vec!["index".to_string()];
        header.extend(self.keys.iter().cloned());
        header.extend(
            ["feasible", "completed", "max_funnel_ratio", "max_u_norm", "accepted", "error"]
                .map(String::from),
        );
        w.write_record(&header).map_err(ExperimentError::csv(path))?;
        let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![r.index.to_string()];
            rec.extend(r.values.iter().cloned());
            rec.push(r.feasible.to_string());
            rec.push(r.completed.to_string());
            rec.push(opt(r.max_funnel_ratio));
            rec.push(opt(r.max_u_norm));
            rec.push(r.accepted.map(|a| a.to_string()).unwrap_or_default());
            rec.push(r.error.clone().unwrap_or_default());
            w.write_record(&rec).map_err(ExperimentError::csv(path))?;
        }
        w.flush().map_err(ExperimentError::io(path))
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:>5}  {:<28} {:>8} {:>9} {:>14} {:>14}\n", "cell", self.keys.join(", "), "feasible", "completed", "max phi|e|", "max |u|");
        for r in &self.rows {
            let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6e}"));
            s.push_str(&format!(
                "{:>5}  {:<28} {:>8} {:>9} {:>14} {:>14}{}\n",
                r.index,
                r.values.join(", "),
                r.feasible,
                r.completed,
                f(r.max_funnel_ratio),
                f(r.max_u_norm),
                r.error.as_ref().map_or(String::new(), |e| format!("  ({e})"))
            ));
        }
        s
    }
}

/// Cartesian product of the sweep axes, first axis slowest.
pub fn sweep_cells(axes: &[crate::config::SweepAxis]) -> Vec<Vec<toml::Value>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect()
    })
}

fn sweep_cell(cfg: &ExperimentConfig, index: usize, values: &[toml::Value]) -> SweepRow {
    let axes = &cfg.sweep.as_ref().expect("checked by caller").axes;
    let mut row = SweepRow {
        index,
        values: values.iter().map(|v| v.to_string()).collect(),
        feasible: false,
        completed: false,
        max_funnel_ratio: None,
        max_u_norm: None,
        accepted: None,
        error: None,
    };
    let mut table = cfg.source.clone();
    table.remove("sweep");
    for (axis, v) in axes.iter().zip(values) {
        match ExperimentConfig::substitute(&table, &axis.key, v) {
            Ok(t) => table = t,
            Err(e) => {
                row.error = Some(e);
                return row;
            }
        }
    }
    let cell = match ExperimentConfig::from_table(table) {
        Ok(c) => c,
        Err(e) => {
            row.error = Some(e.to_string().replace('\n', " "));
            return row;
        }
    };
    let sys = match cell.system() {
        Ok(s) => s,
        Err(e) => {
            row.error = Some(e);
            return row;
        }
    };
    match simulate_partial(&sys, &cell.params, &cell.funnel, &cell.reference, &cell.integrator) {
        Ok(res) => {
            let s = res.summary();
            row.feasible = true;
            row.completed = res.completed() && s.holds;
            row.max_funnel_ratio = Some(s.max_funnel_ratio);
            row.max_u_norm = Some(s.max_u_norm);
            row.accepted = Some(res.stats.accepted);
            row.error = res.failure.map(|f| f.to_string());
        }
        Err(e) => {
            row.feasible = !matches!(e, SimError::InfeasibleStart(_));
            row.error = Some(e.to_string());
        }
    }
    row
}

/// Runs every cell of the sweep on a pool of `[sweep] workers` threads
/// (or `workers` when given). Rows come back in cell order regardless of
/// scheduling. Failed cells are recorded, not fatal.
pub fn run_sweep(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<SweepSummary, ExperimentError> {
    let Some(sweep) = &cfg.sweep else {
        return Err(ExperimentError::Config(ConfigError::Invalid(vec![
            crate::error::ConfigIssue {
                key: "sweep".into(),
                message: "missing section".into(),
            },
        ])));
    };
    let cells = sweep_cells(&sweep.axes);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(sweep.workers).max(1))
        .build()
        .map_err(|e| ExperimentError::Plant(e.to_string()))?;
    let rows = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, v)| sweep_cell(cfg, i, v))
            .collect()
    });
    Ok(SweepSummary {
        keys: sweep.axes.iter().map(|a| a.key.clone()).collect(),
        rows,
    })
}

/// Writes `<stem>.sweep.csv` into `dir` and returns its path.
pub fn write_sweep(summary: &SweepSummary, dir: &Path, stem: &str) -> Result<PathBuf, ExperimentError> {
    fs::create_dir_all(dir).map_err(ExperimentError::io(dir))?;
    let path = dir.join(format!("{stem}.sweep.csv"));
    summary.write_csv(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_schema_order() {
        let c = trace_columns(3, 2);
        assert_eq!(
            c,
            [
                "t", "y_1", "y_2", "yref_1", "yref_2", "e_norm", "phi", "funnel_ratio", "xi_1_1",
                "xi_1_2", "xi_2_1", "xi_2_2", "theta_1_norm", "theta_2_norm", "u_1", "u_2", "h"
            ]
        );
    }

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            assert_eq!(fmt_float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn bundle_paths() {
        let b = Bundle::for_trace(Path::new("out/run.csv"));
        assert_eq!(b.state, Path::new("out/run.state.csv"));
        assert_eq!(b.meta, Path::new("out/run.meta.json"));
        assert_eq!(b.diagnostics(), Path::new("out/run.diagnostics.json"));
    }

    #[test]
    fn cells_are_a_cartesian_product() {
        use crate::config::SweepAxis;
        let axes = vec![
            SweepAxis { key: "a".into(), values: vec![1.into(), 2.into()] },
            SweepAxis { key: "b".into(), values: vec![10.into(), 20.into(), 30.into()] },
        ];
        let cells = sweep_cells(&axes);
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[1], vec![toml::Value::from(1), toml::Value::from(20)]);
        assert_eq!(cells[3], vec![toml::Value::from(2), toml::Value::from(10)]);
    }
}
