//! Batch front end for `pmelab-core`: run configurations, bundled suites and
//! calibration of the universal decay constant.

// `!(x > y)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use pmelab_core::capacity::{brute_force_capacity, capacity_of_compact};
use pmelab_core::io::{
    cell_set_to_json, measure_to_json, read_field_csv, write_field_file, write_json,
    write_obstacle_family, CalibrationEntry, CalibrationSidecar,
};
use pmelab_core::obstacle::{
    complementarity_residual, default_deltas, increasing_obstacle_sequence, reduite_sequence,
    solve_penalized, solve_projected, ObstacleSolution, ObstacleSpec,
};
use pmelab_core::reference::{universal_calibrate, Barenblatt, Calibration};
use pmelab_core::solver::{solve_cauchy_dirichlet, truncation_horizon};
use pmelab_core::verify::{
    run_suite, scaling_residual_check, summarize, to_jsonl, SuiteRecord, Verdict,
};
use pmelab_core::{Error, Field64, Grid64, PmeProblem64, SolverReport};

use config::{BackendChoice, InitialData, ObstacleSource, RunConfig, Task};

pub use config::parse_config;

/// Failures of a CLI invocation, each with its exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments: exit 1.
    Validation(String),
    /// A solver or I/O failure: exit 2.
    Solver(String),
    /// Computation finished but a check or suite instance failed: exit 3.
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Solver(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Solver(m) => write!(f, "solver failure: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidGrid(_)
            | Error::LevelOutOfRange { .. }
            | Error::InvalidSet { .. }
            | Error::GridMismatch { .. }
            | Error::InvalidProblem(_)
            | Error::Inadmissible(_)
            | Error::Parse(_)
            | Error::Reference { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Solver(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Solver(format!("io: {}: {e}", path.display()))
}

/// Caps the rayon pool at `PMELAB_THREADS` when set. Returns the thread count in use.
pub fn configure_threads() -> Result<usize, CliError> {
    if let Ok(raw) = std::env::var("PMELAB_THREADS") {
        let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::Validation(format!(
                "PMELAB_THREADS = '{raw}' must be a positive integer"
            ))
        })?;
        // A pool that already exists (tests, repeated calls) keeps its size.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(rayon::current_num_threads())
}

/// What a finished run wrote and whether its checks passed.
#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub task: String,
    pub passed: bool,
    pub outputs: Vec<String>,
    pub summary: Value,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    core_version: &'static str,
    task: &'a str,
    config: &'a config::Echo,
    outputs: &'a [String],
    passed: bool,
    exit_code: i32,
    threads: usize,
    wall_time_seconds: f64,
}

/// `pmelab run <config>`: parses, validates, runs the task and writes the
/// artifacts plus `manifest.json` into the output directory.
pub fn run_config_file(path: &Path) -> Result<RunOutcome, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("config: {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let cfg = parse_config(&text, base)?;
    run_config(&cfg)
}

pub fn run_config(cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    let threads = configure_threads()?;
    let start = Instant::now();
    fs::create_dir_all(&cfg.output).map_err(|e| io_err(&cfg.output, e))?;
    let result = match &cfg.task {
        Task::Solve(s) => run_solve(cfg, s),
        Task::Obstacle(o) => run_obstacle(cfg, o),
        Task::Capacity(c) => run_capacity(cfg, c),
        Task::Verify { suite, seed } => run_verify_task(cfg, suite, *seed),
        Task::Calibrate { value } => run_calibrate_task(cfg, *value),
    };
    let (outcome, exit_code) = match &result {
        Ok(o) => (Some(o), if o.passed { 0 } else { 3 }),
        Err(e) => (None, e.exit_code()),
    };
    let outputs = outcome.map(|o| o.outputs.clone()).unwrap_or_default();
    let manifest = Manifest {
        tool: "pmelab",
        version: env!("CARGO_PKG_VERSION"),
        core_version: pmelab_core_version(),
        task: cfg.task.name(),
        config: &cfg.echo,
        outputs: &outputs,
        passed: exit_code == 0,
        exit_code,
        threads,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&cfg.output.join("manifest.json"), &manifest)?;
    result
}

fn pmelab_core_version() -> &'static str {
    // Both crates are versioned together in this workspace.
    env!("CARGO_PKG_VERSION")
}

/// Serializes a solver report without its wall time, so outputs stay reproducible.
fn report_json(r: &SolverReport) -> Value {
    let mut v = serde_json::to_value(r).expect("report serializes");
    if let Value::Object(map) = &mut v {
        map.remove("wall_time");
    }
    v
}

struct Out<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl<'a> Out<'a> {
    fn new(dir: &'a Path) -> Self {
        Self {
            dir,
            files: Vec::new(),
        }
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn field(&mut self, name: &str, f: &Field64) -> Result<(), CliError> {
        let p = self.path(name);
        write_field_file(&p, f)?;
        Ok(())
    }

    fn json(&mut self, name: &str, v: &impl Serialize) -> Result<(), CliError> {
        let p = self.path(name);
        write_json(&p, v)?;
        Ok(())
    }
}

fn run_solve(cfg: &RunConfig, s: &config::SolveConfig) -> Result<RunOutcome, CliError> {
    let g = cfg.grid()?;
    let m = cfg.m()?;
    let problem = match &s.initial {
        InitialData::Constant(c) => {
            let c = *c;
            PmeProblem64::new(g, m)?
                .with_initial(|_| c)?
                .with_lateral(|_, _| c)?
        }
        InitialData::Barenblatt {
            center,
            radius,
            tau,
        } => {
            let b = Barenblatt::with_support_radius(m, g.dim(), *radius, *center, *tau)?;
            PmeProblem64::new(g, m)?.with_initial(|x| b.eval(x, 0.0))?
        }
    };
    let (u, report) = solve_cauchy_dirichlet(&problem)?;
    let mut out = Out::new(&cfg.output);
    out.field("u.csv", &u)?;
    let scaling = if s.eps.is_empty() {
        None
    } else {
        Some(scaling_residual_check(&u, m, &s.eps)?)
    };
    let passed = report.converged
        && scaling
            .as_ref()
            .is_none_or(|r| r.verdict == Verdict::Pass);
    let summary = json!({
        "report": report_json(&report),
        "scaling": scaling,
        "max": u.max_value(),
        "min": u.min_value(),
    });
    out.json("solve.json", &summary)?;
    Ok(RunOutcome {
        task: "solve".into(),
        passed,
        outputs: out.files,
        summary,
    })
}

/// Bump obstacle vanishing at the initial and final levels.
pub fn bump_obstacle(g: &Grid64, center: [f64; 2], radius: f64, height: f64) -> Field64 {
    let t0 = g.t0();
    let span = g.final_time() - t0;
    Field64::from_fn(*g, "psi", |x, t| {
        let mut r2 = (x[0] - center[0]).powi(2);
        if g.dim() == 2 {
            r2 += (x[1] - center[1]).powi(2);
        }
        let r = r2.sqrt();
        if r >= radius {
            return 0.0;
        }
        let space = (std::f64::consts::FRAC_PI_2 * r / radius).cos().powi(2);
        let time = (std::f64::consts::PI * (t - t0) / span).sin().powi(2);
        height * space * time
    })
}

fn obstacle_summary(
    spec: &ObstacleSpec<f64>,
    sol: &ObstacleSolution<f64>,
) -> Result<Value, CliError> {
    Ok(json!({
        "backend": sol.backend,
        "complementarity_residual": complementarity_residual(spec, &sol.u)?,
        "contact_cells": sol.contact_set.len(),
        "delta": sol.delta,
        "deltas": sol.deltas.len(),
        "last_change": sol.last_change,
        "report": report_json(&sol.report),
    }))
}

fn run_obstacle(cfg: &RunConfig, o: &config::ObstacleConfig) -> Result<RunOutcome, CliError> {
    let g = cfg.grid()?;
    let m = cfg.m()?;
    let psi = match &o.source {
        ObstacleSource::File(p) => {
            let file = fs::File::open(p).map_err(|e| {
                CliError::Validation(format!("config: [obstacle] file: {}: {e}", p.display()))
            })?;
            read_field_csv(&g, std::io::BufReader::new(file), "psi")?
        }
        ObstacleSource::Bump {
            center,
            radius,
            height,
        } => bump_obstacle(&g, *center, *radius, *height),
    };
    let spec = ObstacleSpec::new(psi.clone(), m)?;
    let mut out = Out::new(&cfg.output);
    out.field("psi.csv", &psi)?;
    let mut backends = Vec::new();
    let mut solutions = Vec::new();
    if matches!(o.backend, BackendChoice::Projected | BackendChoice::Both) {
        let sol = solve_projected(&spec)?;
        out.field("u_projected.csv", &sol.u)?;
        out.json(
            "contact_projected.json",
            &cell_set_to_json(&sol.contact_set),
        )?;
        backends.push(obstacle_summary(&spec, &sol)?);
        solutions.push(sol);
    }
    if matches!(o.backend, BackendChoice::Penalized | BackendChoice::Both) {
        let sol = solve_penalized(&spec, &default_deltas())?;
        out.field("u_penalized.csv", &sol.u)?;
        out.json(
            "contact_penalized.json",
            &cell_set_to_json(&sol.contact_set),
        )?;
        backends.push(obstacle_summary(&spec, &sol)?);
        solutions.push(sol);
    }
    let scale = spec.scale();
    let agreement_tol = 10.0 * g.dt().max(g.h()) * scale;
    let agreement = (solutions.len() == 2).then(|| solutions[0].u.max_abs_diff(&solutions[1].u));
    let mut passed = agreement.is_none_or(|d| d <= agreement_tol);
    let mut reduite = Value::Null;
    if o.family_count > 0 {
        let family = increasing_obstacle_sequence(&psi, m, o.family_count)?;
        let members: Vec<Field64> = family.iter().map(|s| s.psi().clone()).collect();
        let params: Vec<f64> = (1..=o.family_count).map(|j| j as f64).collect();
        let dir = cfg.output.join("family");
        write_obstacle_family(&dir, "increasing", m, &params, &members)?;
        out.files.push("family/family.json".into());
        let seq = reduite_sequence(&psi, m, o.family_count)?;
        let tol = 1e-8 * scale;
        let monotone = seq.worst_decrease <= tol;
        passed &= monotone;
        reduite = json!({
            "count": o.family_count,
            "increments": seq.increments,
            "worst_decrease": seq.worst_decrease,
            "tolerance": tol,
            "monotone": monotone,
        });
    }
    let summary = json!({
        "backends": backends,
        "agreement": agreement,
        "agreement_tolerance": agreement_tol,
        "reduite": reduite,
        "scale": scale,
    });
    out.json("obstacle.json", &summary)?;
    Ok(RunOutcome {
        task: "obstacle".into(),
        passed,
        outputs: out.files,
        summary,
    })
}

fn run_capacity(cfg: &RunConfig, c: &config::CapacityConfig) -> Result<RunOutcome, CliError> {
    let g = cfg.grid()?;
    let m = cfg.m()?;
    let k = c.compact.build(&g)?;
    let res = capacity_of_compact(&k, m, c.depth)?;
    let mut out = Out::new(&cfg.output);
    out.json("k.json", &cell_set_to_json(k.cells()))?;
    out.field("extremal.csv", &res.extremal)?;
    out.json("measure.json", &measure_to_json(&res.extremal_measure))?;
    let mut passed = true;
    let oracle = if c.oracle {
        let bf = brute_force_capacity(&k, m)?;
        let rel = if bf.value > 0.0 {
            (res.value - bf.value).abs() / bf.value
        } else {
            res.value.abs()
        };
        passed &= !bf.budget_exceeded && rel <= 0.10;
        Some(
            json!({ "value": bf.value, "relative_difference": rel, "cycles": bf.cycles,
                     "solves": bf.solves, "budget_exceeded": bf.budget_exceeded, "max_u": bf.max_u }),
        )
    } else {
        None
    };
    let horizon = match &c.calibration {
        None => Value::Null,
        Some(path) => {
            let sidecar = CalibrationSidecar::load(path)?;
            match sidecar.lookup(g.dim(), m, g.lx(), g.ly()) {
                None => json!({ "error": "no calibration entry for this (n, m, Lx, Ly)" }),
                Some(_) if k.is_empty() => json!({ "needed": 0, "available": g.nt() - 1 }),
                Some(entry) => match truncation_horizon(&g, m, &k, 1e-6, entry.c_inflated) {
                    Ok(needed) => {
                        json!({ "needed": needed, "available": g.nt() - 1, "c": entry.c_inflated })
                    }
                    Err(Error::HorizonExceedsGrid { needed, available }) => {
                        json!({ "needed": needed, "available": available, "c": entry.c_inflated, "exceeds_grid": true })
                    }
                    Err(e) => return Err(e.into()),
                },
            }
        }
    };
    let s = res.summary();
    let summary = json!({
        "value": s.value,
        "error_bar": s.error_bar,
        "diagnostics": s.diagnostics,
        "extremal_file": "extremal.csv",
        "measure_file": "measure.json",
        "oracle": oracle,
        "truncation_horizon": horizon,
    });
    out.json("capacity.json", &summary)?;
    Ok(RunOutcome {
        task: "capacity".into(),
        passed,
        outputs: out.files,
        summary,
    })
}

fn run_verify_task(cfg: &RunConfig, suite: &str, seed: u64) -> Result<RunOutcome, CliError> {
    let records = run_suite(suite, seed)?;
    let mut out = Out::new(&cfg.output);
    let p = out.path("suite.jsonl");
    fs::write(&p, to_jsonl(&records)?).map_err(|e| io_err(&p, e))?;
    let summary = serde_json::to_value(summarize(&records)).expect("summary serializes");
    out.json("suite_summary.json", &summary)?;
    Ok(RunOutcome {
        task: "verify".into(),
        passed: records.iter().all(SuiteRecord::ok),
        outputs: out.files,
        summary,
    })
}

fn run_calibrate_task(cfg: &RunConfig, value: f64) -> Result<RunOutcome, CliError> {
    let g = cfg.grid()?;
    let m = cfg.m()?;
    let cal = calibrate_on(&[g], m, value)?;
    let path = cfg.output.join(CALIBRATION_FILE);
    let entry = store_calibration(&path, &g, cal)?;
    let summary = serde_json::to_value(&entry).expect("entry serializes");
    Ok(RunOutcome {
        task: "calibrate".into(),
        passed: true,
        outputs: vec![CALIBRATION_FILE.into()],
        summary,
    })
}

pub const CALIBRATION_FILE: &str = "calibration.json";

/// Grids of the standalone calibration: a coarse and a refined one with the
/// same domain and horizon `T = 2`.
pub fn default_calibration_grids(dim: usize) -> Result<Vec<Grid64>, CliError> {
    let grids = match dim {
        1 => vec![
            Grid64::new_1d(40, 1.0, 101, 0.02)?,
            Grid64::new_1d(80, 1.0, 201, 0.01)?,
        ],
        2 => vec![
            Grid64::new_2d(16, 16, 1.0, 1.0, 101, 0.02)?,
            Grid64::new_2d(32, 32, 1.0, 1.0, 201, 0.01)?,
        ],
        _ => {
            return Err(CliError::Validation(format!(
                "calibrate: dim = {dim} must be 1 or 2"
            )))
        }
    };
    Ok(grids)
}

/// Initial level of the calibration runs.
pub const CALIBRATION_DATUM: f64 = 100.0;

pub fn calibrate_on(grids: &[Grid64], m: f64, value: f64) -> Result<Calibration, CliError> {
    if !(m > 1.0) || !m.is_finite() {
        return Err(CliError::Validation(format!(
            "calibrate: m = {m} must be a finite number > 1"
        )));
    }
    let init = move |_: [f64; 2]| value;
    Ok(universal_calibrate(grids, m, &[&init])?)
}

/// Upserts the calibration into the sidecar at `path`.
pub fn store_calibration(
    path: &Path,
    g: &Grid64,
    cal: Calibration,
) -> Result<CalibrationEntry, CliError> {
    let mut sidecar = CalibrationSidecar::load(path)?;
    let entry = CalibrationEntry {
        n: g.dim(),
        m: cal.m,
        lx: g.lx(),
        ly: g.ly(),
        c_emp: cal.c_emp,
        c_inflated: cal.inflated(),
        calibration: cal,
    };
    sidecar.upsert(entry.clone());
    sidecar.save(path)?;
    Ok(entry)
}

/// `pmelab verify`: the suite's JSON lines (stdout) and whether every instance
/// got its expected verdict.
pub fn verify_command(suite: &str, seed: u64) -> Result<(String, bool, Value), CliError> {
    configure_threads()?;
    if !pmelab_core::verify::SUITES.contains(&suite) {
        return Err(CliError::Validation(format!(
            "verify: unknown suite '{suite}' (expected one of {})",
            pmelab_core::verify::SUITES.join(", ")
        )));
    }
    let records = run_suite(suite, seed)?;
    let ok = records.iter().all(SuiteRecord::ok);
    let summary = serde_json::to_value(summarize(&records)).expect("summary serializes");
    Ok((to_jsonl(&records)?, ok, summary))
}

/// `pmelab calibrate`: calibrates on the default grids and upserts the sidecar.
pub fn calibrate_command(m: f64, dim: usize, sidecar: &Path) -> Result<CalibrationEntry, CliError> {
    configure_threads()?;
    let grids = default_calibration_grids(dim)?;
    let cal = calibrate_on(&grids, m, CALIBRATION_DATUM)?;
    store_calibration(sidecar, &grids[0], cal)
}
