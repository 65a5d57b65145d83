//! INI run configuration. Every key is validated before any computation and
//! unknown sections or keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ini::Ini;
use pmelab_core::{CompactSet64, Grid64};

use crate::CliError;

/// Raw `section -> key -> value` echo of the file, in sorted order.
pub type Echo = BTreeMap<String, BTreeMap<String, String>>;

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub dim: usize,
    pub nx: usize,
    pub ny: Option<usize>,
    pub nt: usize,
    pub lx: f64,
    pub ly: Option<f64>,
    pub dt: f64,
}

impl GridConfig {
    pub fn build(&self) -> Result<Grid64, CliError> {
        let g = match self.dim {
            1 => Grid64::new_1d(self.nx, self.lx, self.nt, self.dt),
            _ => Grid64::new_2d(
                self.nx,
                self.ny.unwrap_or(0),
                self.lx,
                self.ly.unwrap_or(0.0),
                self.nt,
                self.dt,
            ),
        };
        g.map_err(|e| CliError::Validation(format!("config: [grid]: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialData {
    Constant(f64),
    /// Barenblatt profile with the given centre, support radius and time shift.
    Barenblatt {
        center: [f64; 2],
        radius: f64,
        tau: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    pub initial: InitialData,
    /// Scaling-identity check on the result (empty: skipped).
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendChoice {
    Projected,
    Penalized,
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObstacleSource {
    File(PathBuf),
    /// `height cos²(π r / 2R) sin²(π (t - t0) / (T - t0))` around `center`.
    Bump {
        center: [f64; 2],
        radius: f64,
        height: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleConfig {
    pub source: ObstacleSource,
    pub backend: BackendChoice,
    /// Number of increasing obstacles for the réduite sequence (0: skipped).
    pub family_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompactSpec {
    /// `(level, ix, iy)` lattice coordinates.
    Cells(Vec<(usize, usize, usize)>),
    /// Inclusive level and node ranges.
    Box {
        t: (usize, usize),
        x: (usize, usize),
        y: Option<(usize, usize)>,
    },
    Empty,
}

impl CompactSpec {
    pub fn build(&self, g: &Grid64) -> Result<CompactSet64, CliError> {
        let invalid =
            |e: pmelab_core::Error| CliError::Validation(format!("config: [capacity]: {e}"));
        match self {
            CompactSpec::Cells(c) => {
                CompactSet64::from_lattice(*g, c.iter().copied()).map_err(invalid)
            }
            CompactSpec::Box { t, x, y } => {
                let ys = y.map_or(vec![0], |(a, b)| (a..=b).collect());
                let mut cells = Vec::new();
                for n in t.0..=t.1 {
                    for ix in x.0..=x.1 {
                        for &iy in &ys {
                            cells.push((n, ix, iy));
                        }
                    }
                }
                CompactSet64::from_lattice(*g, cells).map_err(invalid)
            }
            CompactSpec::Empty => Ok(CompactSet64::empty(*g)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapacityConfig {
    pub compact: CompactSpec,
    pub depth: usize,
    pub oracle: bool,
    /// Calibration sidecar used for the truncation-horizon diagnostic.
    pub calibration: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Solve(SolveConfig),
    Obstacle(ObstacleConfig),
    Capacity(CapacityConfig),
    Verify { suite: String, seed: u64 },
    Calibrate { value: f64 },
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Solve(_) => "solve",
            Task::Obstacle(_) => "obstacle",
            Task::Capacity(_) => "capacity",
            Task::Verify { .. } => "verify",
            Task::Calibrate { .. } => "calibrate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid: Option<GridConfig>,
    pub m: Option<f64>,
    pub task: Task,
    pub output: PathBuf,
    pub echo: Echo,
}

impl RunConfig {
    pub fn grid(&self) -> Result<Grid64, CliError> {
        self.grid
            .as_ref()
            .ok_or_else(|| CliError::Validation("config: [grid] is required for this task".into()))?
            .build()
    }

    pub fn m(&self) -> Result<f64, CliError> {
        self.m.ok_or_else(|| {
            CliError::Validation("config: [model] m is required for this task".into())
        })
    }
}

const SCHEMA: &[(&str, &[&str])] = &[
    ("grid", &["dim", "nx", "ny", "nt", "lx", "ly", "dt"]),
    ("model", &["m"]),
    ("task", &["kind"]),
    (
        "solve",
        &["initial", "value", "center", "radius", "tau", "eps"],
    ),
    (
        "obstacle",
        &[
            "file",
            "center",
            "radius",
            "height",
            "backend",
            "family_count",
        ],
    ),
    (
        "capacity",
        &["cells", "box", "depth", "oracle", "calibration"],
    ),
    ("verify", &["suite", "seed"]),
    ("calibrate", &["value"]),
    ("output", &["dir"]),
];

const TASKS: [&str; 5] = ["solve", "obstacle", "capacity", "verify", "calibrate"];

fn err(msg: impl Into<String>) -> CliError {
    CliError::Validation(format!("config: {}", msg.into()))
}

/// Parses the INI text. Relative paths are resolved against `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig, CliError> {
    let ini = Ini::load_from_str(text).map_err(|e| err(format!("parse error: {e}")))?;
    let mut echo = Echo::new();
    for (section, props) in ini.iter() {
        let Some(section) = section else {
            if let Some((k, _)) = props.iter().next() {
                return Err(err(format!("key '{k}' appears before any [section]")));
            }
            continue;
        };
        let Some((_, keys)) = SCHEMA.iter().find(|(s, _)| *s == section) else {
            return Err(err(format!("unknown section [{section}]")));
        };
        if echo.contains_key(section) {
            return Err(err(format!("section [{section}] appears twice")));
        }
        let mut entries = BTreeMap::new();
        for (k, v) in props.iter() {
            if !keys.contains(&k) {
                return Err(err(format!(
                    "unknown key '{k}' in [{section}] (allowed: {})",
                    keys.join(", ")
                )));
            }
            if entries
                .insert(k.to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(err(format!("key '{k}' repeated in [{section}]")));
            }
        }
        echo.insert(section.to_string(), entries);
    }
    let sec = Section { echo: &echo };
    let kind = sec.required("task", "kind")?;
    if !TASKS.contains(&kind) {
        return Err(err(format!(
            "[task] kind = '{kind}' (expected one of {})",
            TASKS.join(", ")
        )));
    }
    for (s, _) in SCHEMA {
        if TASKS.contains(s) && *s != kind && echo.contains_key(*s) {
            return Err(err(format!("section [{s}] is not used by task '{kind}'")));
        }
    }
    let needs_model = kind != "verify";
    let grid = if needs_model || echo.contains_key("grid") {
        Some(parse_grid(&sec)?)
    } else {
        None
    };
    let m = if needs_model || echo.contains_key("model") {
        let m: f64 = sec.parse_required("model", "m")?;
        if !(m > 1.0) || !m.is_finite() {
            return Err(err(format!("[model] m = {m} must be a finite number > 1")));
        }
        Some(m)
    } else {
        None
    };
    let task = match kind {
        "solve" => Task::Solve(parse_solve(&sec)?),
        "obstacle" => Task::Obstacle(parse_obstacle(&sec, base)?),
        "capacity" => Task::Capacity(parse_capacity(&sec, base)?),
        "verify" => Task::Verify {
            suite: sec.get("verify", "suite").unwrap_or("full").to_string(),
            seed: sec.parse_or("verify", "seed", 7)?,
        },
        _ => {
            let value: f64 = sec.parse_or("calibrate", "value", 100.0)?;
            if !(value > 0.0) || !value.is_finite() {
                return Err(err(format!("[calibrate] value = {value} must be positive")));
            }
            Task::Calibrate { value }
        }
    };
    if let Task::Verify { suite, .. } = &task {
        if !pmelab_core::verify::SUITES.contains(&suite.as_str()) {
            return Err(err(format!(
                "[verify] suite = '{suite}' (expected one of {})",
                pmelab_core::verify::SUITES.join(", ")
            )));
        }
    }
    let output = base.join(sec.get("output", "dir").unwrap_or("pmelab-out"));
    let cfg = RunConfig {
        grid,
        m,
        task,
        output,
        echo,
    };
    // Grid-dependent checks, still before any compute.
    if let Some(g) = &cfg.grid {
        let g = g.build()?;
        if let Task::Capacity(c) = &cfg.task {
            c.compact.build(&g)?;
        }
    }
    Ok(cfg)
}

struct Section<'a> {
    echo: &'a Echo,
}

impl Section<'_> {
    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.echo
            .get(section)
            .and_then(|s| s.get(key))
            .map(|s| s.as_str())
    }

    fn required(&self, section: &str, key: &str) -> Result<&str, CliError> {
        self.get(section, key)
            .ok_or_else(|| err(format!("missing [{section}] {key}")))
    }

    fn parse<V: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
        raw: &str,
    ) -> Result<V, CliError> {
        raw.parse().map_err(|_| {
            err(format!(
                "[{section}] {key} = '{raw}' is not a valid {}",
                type_name::<V>()
            ))
        })
    }

    fn parse_required<V: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
    ) -> Result<V, CliError> {
        let raw = self.required(section, key)?;
        self.parse(section, key, raw)
    }

    fn parse_opt<V: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
    ) -> Result<Option<V>, CliError> {
        self.get(section, key)
            .map(|raw| self.parse(section, key, raw))
            .transpose()
    }

    fn parse_or<V: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
        default: V,
    ) -> Result<V, CliError> {
        Ok(self.parse_opt(section, key)?.unwrap_or(default))
    }

    fn point(
        &self,
        section: &str,
        key: &str,
        dim: usize,
        default: [f64; 2],
    ) -> Result<[f64; 2], CliError> {
        let Some(raw) = self.get(section, key) else {
            return Ok(default);
        };
        let parts = list::<f64>(raw)
            .map_err(|_| err(format!("[{section}] {key} = '{raw}' is not a point")))?;
        match (dim, parts.as_slice()) {
            (1, [x]) => Ok([*x, 0.0]),
            (2, [x, y]) => Ok([*x, *y]),
            _ => Err(err(format!(
                "[{section}] {key} = '{raw}' needs {dim} coordinate(s)"
            ))),
        }
    }
}

fn type_name<V>() -> &'static str {
    let full = std::any::type_name::<V>();
    match full {
        "f64" => "number",
        "usize" | "u64" => "nonnegative integer",
        "bool" => "boolean (true/false)",
        other => other,
    }
}

fn list<V: std::str::FromStr>(raw: &str) -> Result<Vec<V>, ()> {
    raw.split(',')
        .map(|p| p.trim().parse().map_err(|_| ()))
        .collect()
}

fn parse_grid(sec: &Section) -> Result<GridConfig, CliError> {
    let dim: usize = sec.parse_required("grid", "dim")?;
    if dim != 1 && dim != 2 {
        return Err(err(format!("[grid] dim = {dim} must be 1 or 2")));
    }
    let cfg = GridConfig {
        dim,
        nx: sec.parse_required("grid", "nx")?,
        ny: sec.parse_opt("grid", "ny")?,
        nt: sec.parse_required("grid", "nt")?,
        lx: sec.parse_or("grid", "lx", 1.0)?,
        ly: sec.parse_opt("grid", "ly")?,
        dt: sec.parse_required("grid", "dt")?,
    };
    match (dim, cfg.ny, cfg.ly) {
        (1, None, None) => {}
        (1, _, _) => return Err(err("[grid] ny and ly are only valid when dim = 2")),
        (2, Some(_), Some(_)) => {}
        _ => return Err(err("[grid] dim = 2 needs ny and ly")),
    }
    cfg.build()?;
    Ok(cfg)
}

fn dim_of(sec: &Section) -> usize {
    sec.get("grid", "dim")
        .and_then(|d| d.parse().ok())
        .unwrap_or(1)
}

fn parse_solve(sec: &Section) -> Result<SolveConfig, CliError> {
    let dim = dim_of(sec);
    let initial = match sec.get("solve", "initial").unwrap_or("constant") {
        "constant" => {
            for k in ["center", "radius", "tau"] {
                if sec.get("solve", k).is_some() {
                    return Err(err(format!(
                        "[solve] {k} only applies to initial = barenblatt"
                    )));
                }
            }
            let v: f64 = sec.parse_or("solve", "value", 0.0)?;
            if !(v >= 0.0) || !v.is_finite() {
                return Err(err(format!("[solve] value = {v} must be finite and >= 0")));
            }
            InitialData::Constant(v)
        }
        "barenblatt" => {
            if sec.get("solve", "value").is_some() {
                return Err(err("[solve] value only applies to initial = constant"));
            }
            let radius: f64 = sec.parse_or("solve", "radius", 0.2)?;
            let tau: f64 = sec.parse_or("solve", "tau", 0.1)?;
            if !(radius > 0.0 && tau > 0.0) {
                return Err(err("[solve] radius and tau must be positive"));
            }
            InitialData::Barenblatt {
                center: sec.point("solve", "center", dim, [0.5; 2])?,
                radius,
                tau,
            }
        }
        other => {
            return Err(err(format!(
                "[solve] initial = '{other}' (expected constant or barenblatt)"
            )))
        }
    };
    let eps = match sec.get("solve", "eps") {
        None => Vec::new(),
        Some(raw) => {
            let eps: Vec<f64> = list(raw)
                .map_err(|_| err(format!("[solve] eps = '{raw}' is not a list of numbers")))?;
            if eps.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
                return Err(err("[solve] eps values must be finite and >= 0"));
            }
            eps
        }
    };
    Ok(SolveConfig { initial, eps })
}

fn parse_obstacle(sec: &Section, base: &Path) -> Result<ObstacleConfig, CliError> {
    let dim = dim_of(sec);
    let source = match sec.get("obstacle", "file") {
        Some(f) => {
            for k in ["center", "radius", "height"] {
                if sec.get("obstacle", k).is_some() {
                    return Err(err(format!("[obstacle] {k} conflicts with file")));
                }
            }
            ObstacleSource::File(base.join(f))
        }
        None => {
            let radius: f64 = sec.parse_or("obstacle", "radius", 0.2)?;
            let height: f64 = sec.parse_or("obstacle", "height", 0.5)?;
            if !(radius > 0.0 && height >= 0.0 && height.is_finite()) {
                return Err(err("[obstacle] radius must be positive and height >= 0"));
            }
            ObstacleSource::Bump {
                center: sec.point("obstacle", "center", dim, [0.5; 2])?,
                radius,
                height,
            }
        }
    };
    let backend = match sec.get("obstacle", "backend").unwrap_or("projected") {
        "projected" => BackendChoice::Projected,
        "penalized" => BackendChoice::Penalized,
        "both" => BackendChoice::Both,
        other => {
            return Err(err(format!(
                "[obstacle] backend = '{other}' (expected projected, penalized or both)"
            )))
        }
    };
    Ok(ObstacleConfig {
        source,
        backend,
        family_count: sec.parse_or("obstacle", "family_count", 0)?,
    })
}

fn parse_capacity(sec: &Section, base: &Path) -> Result<CapacityConfig, CliError> {
    let dim = dim_of(sec);
    let compact = match (sec.get("capacity", "cells"), sec.get("capacity", "box")) {
        (Some(_), Some(_)) => return Err(err("[capacity] give either cells or box, not both")),
        (Some(raw), None) => CompactSpec::Cells(parse_cells(raw, dim)?),
        (None, Some(raw)) => parse_box(raw, dim)?,
        (None, None) => CompactSpec::Empty,
    };
    let depth: usize = sec.parse_or("capacity", "depth", pmelab_core::capacity::DEFAULT_DEPTH)?;
    if depth == 0 {
        return Err(err("[capacity] depth must be at least 1"));
    }
    Ok(CapacityConfig {
        compact,
        depth,
        oracle: sec.parse_or("capacity", "oracle", false)?,
        calibration: sec.get("capacity", "calibration").map(|p| base.join(p)),
    })
}

/// `level:ix[:iy]` entries separated by `;`.
fn parse_cells(raw: &str, dim: usize) -> Result<Vec<(usize, usize, usize)>, CliError> {
    raw.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|cell| {
            let parts: Vec<usize> = cell
                .split(':')
                .map(|p| p.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| err(format!("[capacity] cell '{cell}' is not level:ix[:iy]")))?;
            match (dim, parts.as_slice()) {
                (1, [n, ix]) => Ok((*n, *ix, 0)),
                (2, [n, ix, iy]) => Ok((*n, *ix, *iy)),
                _ => Err(err(format!(
                    "[capacity] cell '{cell}' needs {} coordinates",
                    dim + 1
                ))),
            }
        })
        .collect()
}

/// `t0..t1, x0..x1[, y0..y1]`, inclusive.
fn parse_box(raw: &str, dim: usize) -> Result<CompactSpec, CliError> {
    let ranges: Vec<(usize, usize)> = raw
        .split(',')
        .map(|r| {
            let (a, b) = r.trim().split_once("..").ok_or(())?;
            let (a, b): (usize, usize) = (
                a.trim().parse().map_err(|_| ())?,
                b.trim().parse().map_err(|_| ())?,
            );
            if a <= b {
                Ok((a, b))
            } else {
                Err(())
            }
        })
        .collect::<Result<_, ()>>()
        .map_err(|_| {
            err(format!(
                "[capacity] box = '{raw}' is not t0..t1, x0..x1[, y0..y1]"
            ))
        })?;
    match (dim, ranges.as_slice()) {
        (1, [t, x]) => Ok(CompactSpec::Box {
            t: *t,
            x: *x,
            y: None,
        }),
        (2, [t, x, y]) => Ok(CompactSpec::Box {
            t: *t,
            x: *x,
            y: Some(*y),
        }),
        _ => Err(err(format!(
            "[capacity] box = '{raw}' needs {} ranges",
            dim + 1
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SOLVE: &str = "[grid]\ndim = 1\nnx = 10\nnt = 4\ndt = 0.01\n[model]\nm = 2\n[task]\nkind = solve\n[solve]\nvalue = 0.5\n";

    #[test]
    fn parses_minimal_solve() {
        let cfg = parse_config(SOLVE, Path::new("/tmp")).unwrap();
        assert_eq!(
            cfg.task,
            Task::Solve(SolveConfig {
                initial: InitialData::Constant(0.5),
                eps: vec![]
            })
        );
        assert_eq!(cfg.output, PathBuf::from("/tmp/pmelab-out"));
        assert_eq!(cfg.echo["grid"]["nx"], "10");
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        let bad = SOLVE.replace("dt = 0.01", "dt = 0.01\nspeed = 3");
        assert!(
            matches!(parse_config(&bad, Path::new(".")), Err(CliError::Validation(m)) if m.contains("speed"))
        );
        let bad = format!("{SOLVE}[extra]\na = 1\n");
        assert!(parse_config(&bad, Path::new(".")).is_err());
        let bad = format!("{SOLVE}[capacity]\ndepth = 2\n");
        assert!(parse_config(&bad, Path::new(".")).is_err());
        assert!(parse_config(&format!("x = 1\n{SOLVE}"), Path::new(".")).is_err());
    }

    #[test]
    fn validates_values() {
        assert!(parse_config(&SOLVE.replace("m = 2", "m = 1"), Path::new(".")).is_err());
        assert!(parse_config(&SOLVE.replace("nx = 10", "nx = ten"), Path::new(".")).is_err());
        assert!(parse_config(&SOLVE.replace("dim = 1", "dim = 3"), Path::new(".")).is_err());
        assert!(parse_config(&SOLVE.replace("value = 0.5", "value = -1"), Path::new(".")).is_err());
    }

    #[test]
    fn capacity_sets() {
        let base = "[grid]\ndim = 1\nnx = 16\nnt = 12\ndt = 0.0625\n[model]\nm = 2\n[task]\nkind = capacity\n[capacity]\n";
        let cfg = parse_config(&format!("{base}cells = 5:8; 5:9\n"), Path::new(".")).unwrap();
        let Task::Capacity(c) = cfg.task else {
            panic!()
        };
        assert_eq!(c.compact, CompactSpec::Cells(vec![(5, 8, 0), (5, 9, 0)]));
        let cfg = parse_config(&format!("{base}box = 4..5, 7..8\n"), Path::new(".")).unwrap();
        let Task::Capacity(c) = cfg.task else {
            panic!()
        };
        assert_eq!(
            c.compact
                .build(&cfg.grid.unwrap().build().unwrap())
                .unwrap()
                .len(),
            4
        );
        // outside the margin
        assert!(parse_config(&format!("{base}cells = 1:8\n"), Path::new(".")).is_err());
        assert!(parse_config(&format!("{base}box = 5..4, 7..8\n"), Path::new(".")).is_err());
    }

    #[test]
    fn verify_needs_no_grid() {
        let cfg = parse_config(
            "[task]\nkind = verify\n[verify]\nsuite = scaling\nseed = 3\n",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(
            cfg.task,
            Task::Verify {
                suite: "scaling".into(),
                seed: 3
            }
        );
        assert!(parse_config(
            "[task]\nkind = verify\n[verify]\nsuite = bogus\n",
            Path::new(".")
        )
        .is_err());
    }
}
