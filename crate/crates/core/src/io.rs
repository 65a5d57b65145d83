//! File formats: field CSV, grid and cell-set JSON, sparse measure JSON,
//! obstacle families and the calibration sidecar.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grid::{CellSet, CompactSet, Field, Grid};
use crate::measure::DiscreteMeasure;
use crate::reference::Calibration;
use crate::{Error, Real, Result};

/// Explicit grid description used in every JSON format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub nx: usize,
    pub ny: Option<usize>,
    pub nt: usize,
    pub lx: f64,
    pub ly: Option<f64>,
    pub h: f64,
    pub dt: f64,
    pub t0: f64,
}

impl GridSpec {
    pub fn of<T: Real>(g: &Grid<T>) -> Self {
        Self {
            dim: g.dim(),
            nx: g.nx(),
            ny: g.ny(),
            nt: g.nt(),
            lx: g.lx().f64(),
            ly: g.ly().map(|v| v.f64()),
            h: g.h().f64(),
            dt: g.dt().f64(),
            t0: g.t0().f64(),
        }
    }

    pub fn to_grid<T: Real>(&self) -> Result<Grid<T>> {
        let g = match (self.dim, self.ny, self.ly) {
            (1, None, None) => Grid::new_1d(self.nx, T::of(self.lx), self.nt, T::of(self.dt))?,
            (2, Some(ny), Some(ly)) => Grid::new_2d(
                self.nx,
                ny,
                T::of(self.lx),
                T::of(ly),
                self.nt,
                T::of(self.dt),
            )?,
            _ => {
                return Err(Error::Parse(format!(
                    "grid: dim = {} is inconsistent with ny = {:?}, ly = {:?}",
                    self.dim, self.ny, self.ly
                )))
            }
        };
        if (g.h().f64() - self.h).abs() > 1e-12 * self.h.abs().max(1.0) {
            return Err(Error::Parse(format!(
                "grid: h = {} does not match Lx / nx = {}",
                self.h,
                g.h()
            )));
        }
        Ok(g.with_t0(T::of(self.t0)))
    }
}

/// SHA-256 of the canonical grid JSON, hex encoded.
pub fn grid_hash<T: Real>(g: &Grid<T>) -> String {
    let json = serde_json::to_string(&GridSpec::of(g)).expect("grid spec serializes");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes one row per time level: the time, then the nodal values in row-major order.
pub fn write_field_csv<T: Real>(f: &Field<T>, mut w: impl Write) -> Result<()> {
    let g = f.grid();
    let mut header = String::from("t");
    for j in 0..g.n_nodes() {
        header.push_str(&format!(",u{j}"));
    }
    writeln!(w, "{header}")?;
    for n in 0..g.nt() {
        let mut line = g.time(n).f64().to_string();
        for v in f.level(n) {
            line.push(',');
            line.push_str(&v.f64().to_string());
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads a field written by [`write_field_csv`] on the given grid.
pub fn read_field_csv<T: Real>(grid: &Grid<T>, r: impl BufRead, name: &str) -> Result<Field<T>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("field csv: empty file".into()))??;
    let columns = header.split(',').count();
    if columns != grid.n_nodes() + 1 || !header.starts_with('t') {
        return Err(Error::Parse(format!(
            "field csv: header has {columns} columns, expected t plus {} nodes",
            grid.n_nodes()
        )));
    }
    let mut values = Vec::with_capacity(grid.n_points());
    let mut level = 0;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        let t: f64 = parse_number(cells.next().unwrap_or(""), level)?;
        if level >= grid.nt() {
            return Err(Error::Parse(format!(
                "field csv: more than {} time levels",
                grid.nt()
            )));
        }
        let expected = grid.time(level).f64();
        if (t - expected).abs() > 1e-9 * expected.abs().max(1.0) {
            return Err(Error::Parse(format!(
                "field csv: row {level} has t = {t}, grid says {expected}"
            )));
        }
        let before = values.len();
        for c in cells {
            values.push(T::of(parse_number(c, level)?));
        }
        if values.len() - before != grid.n_nodes() {
            return Err(Error::Parse(format!(
                "field csv: row {level} has {} values",
                values.len() - before
            )));
        }
        level += 1;
    }
    if level != grid.nt() {
        return Err(Error::Parse(format!(
            "field csv: {level} time levels, grid has {}",
            grid.nt()
        )));
    }
    Field::from_values(*grid, values, name)
}

fn parse_number(s: &str, row: usize) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("field csv: row {row}: '{s}' is not a number")))
}

/// Cell set as JSON: the grid plus runs `[start, length]` of consecutive flat indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSetJson {
    pub grid: GridSpec,
    pub runs: Vec<[usize; 2]>,
}

pub fn run_length_encode(indices: impl IntoIterator<Item = usize>) -> Vec<[usize; 2]> {
    let mut runs: Vec<[usize; 2]> = Vec::new();
    for i in indices {
        match runs.last_mut() {
            Some([start, len]) if *start + *len == i => *len += 1,
            _ => runs.push([i, 1]),
        }
    }
    runs
}

pub fn run_length_decode(runs: &[[usize; 2]]) -> impl Iterator<Item = usize> + '_ {
    runs.iter().flat_map(|&[s, l]| s..s + l)
}

pub fn cell_set_to_json<T: Real>(set: &CellSet<T>) -> CellSetJson {
    CellSetJson {
        grid: GridSpec::of(set.grid()),
        runs: run_length_encode(set.iter()),
    }
}

pub fn cell_set_from_json<T: Real>(json: &CellSetJson) -> Result<CellSet<T>> {
    let g = json.grid.to_grid()?;
    CellSet::from_indices(g, run_length_decode(&json.runs))
}

pub fn compact_set_from_json<T: Real>(json: &CellSetJson) -> Result<CompactSet<T>> {
    CompactSet::new(cell_set_from_json(json)?)
}

/// Sparse measure: nonzero `(cell index, weight)` pairs plus the grid and its hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureJson {
    pub grid_hash: String,
    pub grid: GridSpec,
    pub cells: Vec<(usize, f64)>,
}

pub fn measure_to_json<T: Real>(mu: &DiscreteMeasure<T>) -> MeasureJson {
    MeasureJson {
        grid_hash: grid_hash(mu.grid()),
        grid: GridSpec::of(mu.grid()),
        cells: mu.sparse().into_iter().map(|(i, w)| (i, w.f64())).collect(),
    }
}

/// Reads a measure for `grid`, rejecting files written for another grid.
pub fn measure_from_json<T: Real>(
    grid: &Grid<T>,
    json: &MeasureJson,
) -> Result<DiscreteMeasure<T>> {
    if json.grid_hash != grid_hash(grid) {
        return Err(Error::GridMismatch {
            op: "measure_from_json",
        });
    }
    DiscreteMeasure::from_cells(*grid, json.cells.iter().map(|&(i, w)| (i, T::of(w))))
}

/// Manifest of an obstacle family on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleFamilyManifest {
    /// `"increasing"` (parameter j), `"smoothed"` (parameter ε) or `"balayage"` (parameter i).
    pub family: String,
    pub m: f64,
    pub grid: GridSpec,
    pub parameters: Vec<f64>,
    pub files: Vec<String>,
}

pub const FAMILY_MANIFEST: &str = "family.json";

/// Writes `psi_<k>.csv` for every member plus `family.json` into `dir`.
pub fn write_obstacle_family<T: Real>(
    dir: &Path,
    family: &str,
    m: T,
    parameters: &[f64],
    members: &[Field<T>],
) -> Result<ObstacleFamilyManifest> {
    if parameters.len() != members.len() || members.is_empty() {
        return Err(Error::InvalidProblem(format!(
            "write_obstacle_family: {} parameters for {} members",
            parameters.len(),
            members.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (k, f) in members.iter().enumerate() {
        let name = format!("psi_{k}.csv");
        write_field_csv(
            f,
            std::io::BufWriter::new(fs::File::create(dir.join(&name))?),
        )?;
        files.push(name);
    }
    let manifest = ObstacleFamilyManifest {
        family: family.into(),
        m: m.f64(),
        grid: GridSpec::of(members[0].grid()),
        parameters: parameters.to_vec(),
        files,
    };
    write_json(&dir.join(FAMILY_MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_obstacle_family<T: Real>(
    dir: &Path,
) -> Result<(ObstacleFamilyManifest, Vec<Field<T>>)> {
    let manifest: ObstacleFamilyManifest = read_json(&dir.join(FAMILY_MANIFEST))?;
    let g = manifest.grid.to_grid()?;
    let fields = manifest
        .files
        .iter()
        .map(|name| {
            let file = std::io::BufReader::new(fs::File::open(dir.join(name))?);
            read_field_csv(&g, file, name.trim_end_matches(".csv"))
        })
        .collect::<Result<_>>()?;
    Ok((manifest, fields))
}

/// One calibrated constant, keyed by `(n, m, Lx, Ly)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub n: usize,
    pub m: f64,
    pub lx: f64,
    pub ly: Option<f64>,
    pub c_emp: f64,
    /// `2 c_emp`, the value used for truncation horizons.
    pub c_inflated: f64,
    pub calibration: Calibration,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSidecar {
    pub entries: Vec<CalibrationEntry>,
}

impl CalibrationSidecar {
    /// Reads the sidecar, or an empty one if the file does not exist.
    pub fn load(path: &Path) -> Result<Self> {
        if path.exists() {
            read_json(path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn lookup(&self, n: usize, m: f64, lx: f64, ly: Option<f64>) -> Option<&CalibrationEntry> {
        self.entries
            .iter()
            .find(|e| e.n == n && e.m == m && e.lx == lx && e.ly == ly)
    }

    /// Inserts or replaces the entry with the same key; entries stay sorted by key.
    pub fn upsert(&mut self, entry: CalibrationEntry) {
        self.entries.retain(|e| {
            !(e.n == entry.n && e.m == entry.m && e.lx == entry.lx && e.ly == entry.ly)
        });
        self.entries.push(entry);
        self.entries.sort_by(|a, b| {
            (a.n, a.m, a.lx, a.ly.unwrap_or(0.0))
                .partial_cmp(&(b.n, b.m, b.lx, b.ly.unwrap_or(0.0)))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_field_file<T: Real>(path: &Path, f: &Field<T>) -> Result<PathBuf> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    write_field_csv(f, &mut w)?;
    w.flush()?;
    Ok(path.to_path_buf())
}
