//! Uniform space-time grids, nodal fields and sets of space-time cells.
//!
//! Nodes are indexed by `(level, node)` where `level ∈ 0..nt` is the time level
//! and `node` the row-major spatial node index (`x` fastest). The flat index of a
//! space-time point is `level * n_nodes + node`.
//!
//! A space-time *cell* is the control volume of an interior spatial node over the
//! time slab `(t_{n-1}, t_n]`; it carries the flat index of its upper node. Cells
//! therefore exist for `level >= 1` and interior nodes only. Measures live on
//! cells, fields on nodes, and the field value of a cell is the nodal value at its
//! upper time level.

use crate::{Error, Real, Result};

/// Uniform rectilinear discretization of `Ω × (t0, t0 + (nt-1) dt)` with
/// `Ω = (0, Lx)` or `(0, Lx) × (0, Ly)` and square cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid<T> {
    dim: usize,
    nx: usize,
    ny: usize,
    nt: usize,
    h: T,
    dt: T,
    t0: T,
    lx: T,
    ly: T,
}

impl<T: Real> Grid<T> {
    pub fn new_1d(nx: usize, lx: T, nt: usize, dt: T) -> Result<Self> {
        Self::validate_common(nx, nt, lx, dt)?;
        Ok(Self {
            dim: 1,
            nx,
            ny: 0,
            nt,
            h: lx / T::of_usize(nx),
            dt,
            t0: T::zero(),
            lx,
            ly: T::zero(),
        })
    }

    pub fn new_2d(nx: usize, ny: usize, lx: T, ly: T, nt: usize, dt: T) -> Result<Self> {
        Self::validate_common(nx, nt, lx, dt)?;
        if ny < 2 || !(ly > T::zero()) {
            return Err(Error::InvalidGrid(format!(
                "ny = {ny} and Ly = {ly} must be >= 2 and > 0"
            )));
        }
        let hx = lx / T::of_usize(nx);
        let hy = ly / T::of_usize(ny);
        if (hx - hy).abs() > T::of(1e-12).max(T::tol_floor()) * hx {
            return Err(Error::InvalidGrid(format!(
                "cells must be square: Lx/nx = {hx}, Ly/ny = {hy}"
            )));
        }
        Ok(Self {
            dim: 2,
            nx,
            ny,
            nt,
            h: hx,
            dt,
            t0: T::zero(),
            lx,
            ly,
        })
    }

    fn validate_common(nx: usize, nt: usize, lx: T, dt: T) -> Result<()> {
        if nx < 2 || nt < 2 {
            return Err(Error::InvalidGrid(format!(
                "nx = {nx} and nt = {nt} must both be >= 2"
            )));
        }
        if !(lx > T::zero()) || !lx.is_finite() {
            return Err(Error::InvalidGrid(format!("Lx = {lx} must be positive")));
        }
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(Error::InvalidGrid(format!("dt = {dt} must be positive")));
        }
        Ok(())
    }

    pub fn with_t0(mut self, t0: T) -> Self {
        self.t0 = t0;
        self
    }

    /// Same spatial layout, `nt` time levels.
    pub fn with_levels(mut self, nt: usize) -> Result<Self> {
        if nt < 2 {
            return Err(Error::InvalidGrid(format!("nt = {nt} must be >= 2")));
        }
        self.nt = nt;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    /// Cell count along `y`; `None` in one dimension.
    pub fn ny(&self) -> Option<usize> {
        (self.dim == 2).then_some(self.ny)
    }
    pub fn nt(&self) -> usize {
        self.nt
    }
    pub fn h(&self) -> T {
        self.h
    }
    pub fn dt(&self) -> T {
        self.dt
    }
    pub fn t0(&self) -> T {
        self.t0
    }
    pub fn lx(&self) -> T {
        self.lx
    }
    pub fn ly(&self) -> Option<T> {
        (self.dim == 2).then_some(self.ly)
    }

    /// Nodes per axis `(nx + 1, ny + 1)`; the second entry is 1 in one dimension.
    pub fn nodes_per_axis(&self) -> (usize, usize) {
        if self.dim == 1 {
            (self.nx + 1, 1)
        } else {
            (self.nx + 1, self.ny + 1)
        }
    }

    /// Spatial nodes per time level.
    pub fn n_nodes(&self) -> usize {
        let (a, b) = self.nodes_per_axis();
        a * b
    }

    /// Total space-time nodes.
    pub fn n_points(&self) -> usize {
        self.nt * self.n_nodes()
    }

    #[inline]
    pub fn index(&self, level: usize, node: usize) -> usize {
        level * self.n_nodes() + node
    }

    #[inline]
    pub fn split(&self, index: usize) -> (usize, usize) {
        (index / self.n_nodes(), index % self.n_nodes())
    }

    #[inline]
    pub fn node_ij(&self, node: usize) -> (usize, usize) {
        let px = self.nx + 1;
        (node % px, node / px)
    }

    #[inline]
    pub fn node_at(&self, ix: usize, iy: usize) -> usize {
        iy * (self.nx + 1) + ix
    }

    pub fn is_boundary_node(&self, node: usize) -> bool {
        let (ix, iy) = self.node_ij(node);
        ix == 0 || ix == self.nx || (self.dim == 2 && (iy == 0 || iy == self.ny))
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&j| !self.is_boundary_node(j))
            .collect()
    }

    pub fn coords(&self, node: usize) -> [T; 2] {
        let (ix, iy) = self.node_ij(node);
        [T::of_usize(ix) * self.h, T::of_usize(iy) * self.h]
    }

    pub fn time(&self, level: usize) -> T {
        self.t0 + T::of_usize(level) * self.dt
    }

    pub fn final_time(&self) -> T {
        self.time(self.nt - 1)
    }

    /// `h^d`, the spatial volume of a cell.
    pub fn cell_area(&self) -> T {
        self.h.powi(self.dim as i32)
    }

    /// Whether the flat index names a space-time cell (level >= 1, interior node).
    pub fn is_cell(&self, index: usize) -> bool {
        let (level, node) = self.split(index);
        index < self.n_points() && level >= 1 && !self.is_boundary_node(node)
    }

    /// Whether the cell keeps a one-cell margin from `∂Ω` and from the initial and
    /// final levels: every index coordinate lies in `2..=max-2`.
    pub fn is_margin_cell(&self, index: usize) -> bool {
        if index >= self.n_points() {
            return false;
        }
        let (level, node) = self.split(index);
        let (ix, iy) = self.node_ij(node);
        let inside = |i: usize, n: usize| i >= 2 && i + 2 <= n;
        inside(level, self.nt - 1) && inside(ix, self.nx) && (self.dim == 1 || inside(iy, self.ny))
    }

    /// Spatial neighbours of a node (2 in 1-D, 4 in 2-D, fewer on the boundary).
    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        let (ix, iy) = self.node_ij(node);
        let mut out = [usize::MAX; 4];
        if ix > 0 {
            out[0] = self.node_at(ix - 1, iy);
        }
        if ix < self.nx {
            out[1] = self.node_at(ix + 1, iy);
        }
        if self.dim == 2 {
            if iy > 0 {
                out[2] = self.node_at(ix, iy - 1);
            }
            if iy < self.ny {
                out[3] = self.node_at(ix, iy + 1);
            }
        }
        out.into_iter().filter(|&j| j != usize::MAX)
    }

    /// Grids agree in layout and spacing (floating fields compared to 1e-12).
    pub fn same_as(&self, other: &Self) -> bool {
        let close = |a: T, b: T| {
            (a - b).abs() <= T::of(1e-12).max(T::tol_floor()) * a.abs().max(b.abs()).max(T::one())
        };
        self.dim == other.dim
            && self.nx == other.nx
            && self.ny == other.ny
            && self.nt == other.nt
            && close(self.h, other.h)
            && close(self.dt, other.dt)
            && close(self.t0, other.t0)
    }

    pub(crate) fn ensure_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch { op })
        }
    }

    pub(crate) fn ensure_level(&self, level: usize, op: &'static str) -> Result<()> {
        if level < self.nt {
            Ok(())
        } else {
            Err(Error::LevelOutOfRange {
                op,
                level,
                nt: self.nt,
            })
        }
    }

    /// Lattice coordinates `(level, ix, iy)` of a flat index.
    pub(crate) fn lattice(&self, index: usize) -> [usize; 3] {
        let (level, node) = self.split(index);
        let (ix, iy) = self.node_ij(node);
        [level, ix, iy]
    }
}

/// `(Δ_h f)` at an interior node from one time level of nodal values.
#[inline]
pub(crate) fn laplacian_node<T: Real>(grid: &Grid<T>, values: &[T], node: usize) -> T {
    let centre = values[node];
    let mut acc = T::zero();
    let mut count = 0usize;
    for j in grid.neighbors(node) {
        acc = acc + values[j];
        count += 1;
    }
    (acc - T::of_usize(count) * centre) / (grid.h * grid.h)
}

/// Nodal values over all time levels, indexed `(level, node)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T> {
    grid: Grid<T>,
    values: Vec<T>,
    name: String,
    nonnegative: bool,
}

impl<T: Real> Field<T> {
    pub fn zeros(grid: Grid<T>, name: impl Into<String>) -> Self {
        Self::constant(grid, T::zero(), name)
    }

    pub fn constant(grid: Grid<T>, value: T, name: impl Into<String>) -> Self {
        Self {
            grid,
            values: vec![value; grid.n_points()],
            name: name.into(),
            nonnegative: false,
        }
    }

    pub fn from_values(grid: Grid<T>, values: Vec<T>, name: impl Into<String>) -> Result<Self> {
        if values.len() != grid.n_points() {
            return Err(Error::InvalidGrid(format!(
                "field has {} values, grid has {} points",
                values.len(),
                grid.n_points()
            )));
        }
        Ok(Self {
            grid,
            values,
            name: name.into(),
            nonnegative: false,
        })
    }

    /// Samples `f(x, t)` at every space-time node.
    pub fn from_fn(grid: Grid<T>, name: impl Into<String>, f: impl Fn([T; 2], T) -> T) -> Self {
        let nn = grid.n_nodes();
        let values = (0..grid.n_points())
            .map(|k| f(grid.coords(k % nn), grid.time(k / nn)))
            .collect();
        Self {
            grid,
            values,
            name: name.into(),
            nonnegative: false,
        }
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }
    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn level(&self, level: usize) -> &[T] {
        let nn = self.grid.n_nodes();
        &self.values[level * nn..(level + 1) * nn]
    }

    pub fn level_mut(&mut self, level: usize) -> &mut [T] {
        let nn = self.grid.n_nodes();
        &mut self.values[level * nn..(level + 1) * nn]
    }

    #[inline]
    pub fn at(&self, level: usize, node: usize) -> T {
        self.values[self.grid.index(level, node)]
    }

    #[inline]
    pub fn set(&mut self, level: usize, node: usize, value: T) {
        let k = self.grid.index(level, node);
        self.values[k] = value;
    }

    pub fn map(&self, name: impl Into<String>, f: impl Fn(T) -> T) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
            name: name.into(),
            nonnegative: false,
        }
    }

    pub fn zip_map(
        &self,
        other: &Self,
        name: impl Into<String>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self> {
        self.grid.ensure_same(&other.grid, "Field::zip_map")?;
        Ok(Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            name: name.into(),
            nonnegative: false,
        })
    }

    pub fn sup_norm(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_value(&self) -> T {
        self.values.iter().fold(T::neg_infinity(), |m, &v| m.max(v))
    }

    pub fn min_value(&self) -> T {
        self.values.iter().fold(T::infinity(), |m, &v| m.min(v))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn is_marked_nonnegative(&self) -> bool {
        self.nonnegative
    }

    /// Marks the field nonnegative after checking `min >= -1e-12 max(1, max)`.
    pub fn mark_nonnegative(&mut self) -> Result<()> {
        let floor = -T::of(1e-12).max(T::tol_floor()) * T::one().max(self.max_value());
        let min = self.min_value();
        if min < floor {
            return Err(Error::InvalidProblem(format!(
                "field `{}` has minimum {min} below the nonnegativity floor {floor}",
                self.name
            )));
        }
        self.nonnegative = true;
        Ok(())
    }

    pub(crate) fn set_nonnegative_flag(&mut self, flag: bool) {
        self.nonnegative = flag;
    }

    /// Maximum of `self - other` over the points selected by `mask` (all when `None`),
    /// with the flat index where it is attained.
    pub fn max_excess(&self, other: &Self, mask: Option<&[bool]>) -> Option<(T, usize)> {
        let mut best: Option<(T, usize)> = None;
        for (k, (&a, &b)) in self.values.iter().zip(&other.values).enumerate() {
            if mask.is_none_or(|m| m[k]) {
                let d = a - b;
                if best.is_none_or(|(v, _)| d > v) {
                    best = Some((d, k));
                }
            }
        }
        best
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// `Δ_h f` at one time level, returned in the order of [`Grid::interior_nodes`].
pub fn discrete_laplacian<T: Real>(f: &Field<T>, level: usize) -> Result<Vec<T>> {
    let grid = f.grid();
    grid.ensure_level(level, "discrete_laplacian")?;
    let vals = f.level(level);
    Ok(grid
        .interior_nodes()
        .into_iter()
        .map(|j| laplacian_node(grid, vals, j))
        .collect())
}

/// Which part of the space-time boundary [`boundary_nodes`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryKind {
    /// Initial level (all nodes) plus the lateral boundary.
    Parabolic,
    /// `∂Ω` nodes at levels `1..nt`.
    Lateral,
    /// Interior nodes of the final level.
    Top,
}

/// Boundary node sets as `(level, node)` pairs.
pub fn boundary_nodes<T: Real>(grid: &Grid<T>, which: BoundaryKind) -> Vec<(usize, usize)> {
    let nn = grid.n_nodes();
    let lateral = || {
        (1..grid.nt()).flat_map(move |n| {
            (0..nn)
                .filter(|&j| grid.is_boundary_node(j))
                .map(move |j| (n, j))
        })
    };
    match which {
        BoundaryKind::Parabolic => (0..nn).map(|j| (0, j)).chain(lateral()).collect(),
        BoundaryKind::Lateral => lateral().collect(),
        BoundaryKind::Top => {
            let last = grid.nt() - 1;
            grid.interior_nodes()
                .into_iter()
                .map(|j| (last, j))
                .collect()
        }
    }
}

/// Mask over all space-time points marking the discrete parabolic boundary.
pub fn parabolic_mask<T: Real>(grid: &Grid<T>) -> Vec<bool> {
    let mut mask = vec![false; grid.n_points()];
    for (n, j) in boundary_nodes(grid, BoundaryKind::Parabolic) {
        mask[grid.index(n, j)] = true;
    }
    mask
}

/// A set of space-time cells. Only genuine cells (level >= 1, interior node) may be
/// members.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSet<T> {
    grid: Grid<T>,
    mask: Vec<bool>,
}

impl<T: Real> CellSet<T> {
    pub fn empty(grid: Grid<T>) -> Self {
        Self {
            grid,
            mask: vec![false; grid.n_points()],
        }
    }

    pub fn from_mask(grid: Grid<T>, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != grid.n_points() {
            return Err(Error::InvalidSet {
                op: "CellSet::from_mask",
                reason: format!(
                    "mask has {} entries, grid has {} points",
                    mask.len(),
                    grid.n_points()
                ),
            });
        }
        if let Some(k) = mask
            .iter()
            .enumerate()
            .position(|(k, &b)| b && !grid.is_cell(k))
        {
            return Err(Error::InvalidSet {
                op: "CellSet::from_mask",
                reason: format!("index {k} is not a cell (initial level or boundary node)"),
            });
        }
        Ok(Self { grid, mask })
    }

    pub fn from_indices(grid: Grid<T>, cells: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut mask = vec![false; grid.n_points()];
        for k in cells {
            if k >= mask.len() {
                return Err(Error::InvalidSet {
                    op: "CellSet::from_indices",
                    reason: format!("cell index {k} outside the grid"),
                });
            }
            mask[k] = true;
        }
        Self::from_mask(grid, mask)
    }

    /// Cells given by `(level, ix, iy)` lattice coordinates (`iy = 0` in 1-D).
    pub fn from_lattice(
        grid: Grid<T>,
        cells: impl IntoIterator<Item = (usize, usize, usize)>,
    ) -> Result<Self> {
        let (px, py) = grid.nodes_per_axis();
        let mut idx = Vec::new();
        for (n, ix, iy) in cells {
            if n >= grid.nt() || ix >= px || iy >= py {
                return Err(Error::InvalidSet {
                    op: "CellSet::from_lattice",
                    reason: format!("cell ({n}, {ix}, {iy}) outside the grid"),
                });
            }
            idx.push(grid.index(n, grid.node_at(ix, iy)));
        }
        Self::from_indices(grid, idx)
    }

    /// All cells with `level ∈ levels`, `ix ∈ xs`, `iy ∈ ys` (closed ranges).
    pub fn from_box(
        grid: Grid<T>,
        levels: (usize, usize),
        xs: (usize, usize),
        ys: Option<(usize, usize)>,
    ) -> Result<Self> {
        let ys = ys.unwrap_or((0, 0));
        let cells = (levels.0..=levels.1).flat_map(|n| {
            (ys.0..=ys.1).flat_map(move |iy| (xs.0..=xs.1).map(move |ix| (n, ix, iy)))
        });
        Self::from_lattice(grid, cells)
    }

    /// Every cell of the grid.
    pub fn all(grid: Grid<T>) -> Self {
        let mask = (0..grid.n_points()).map(|k| grid.is_cell(k)).collect();
        Self { grid, mask }
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
    pub fn contains(&self, index: usize) -> bool {
        self.mask.get(index).copied().unwrap_or(false)
    }
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(k, _)| k)
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.grid.ensure_same(&other.grid, "CellSet::union")?;
        Ok(Self {
            grid: self.grid,
            mask: self
                .mask
                .iter()
                .zip(&other.mask)
                .map(|(&a, &b)| a || b)
                .collect(),
        })
    }

    pub fn intersection(&self, other: &Self) -> Result<Self> {
        self.grid
            .ensure_same(&other.grid, "CellSet::intersection")?;
        Ok(Self {
            grid: self.grid,
            mask: self
                .mask
                .iter()
                .zip(&other.mask)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    pub fn difference(&self, other: &Self) -> Result<Self> {
        self.grid.ensure_same(&other.grid, "CellSet::difference")?;
        Ok(Self {
            grid: self.grid,
            mask: self
                .mask
                .iter()
                .zip(&other.mask)
                .map(|(&a, &b)| a && !b)
                .collect(),
        })
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }

    /// Chebyshev (L∞) lattice distance from every space-time point to the set,
    /// capped at `cap`; points farther away (or all points, for the empty set) get `cap`.
    pub fn distance_capped(&self, cap: usize) -> Vec<usize> {
        let mut dist: Vec<usize> = self.mask.iter().map(|&b| if b { 0 } else { cap }).collect();
        let mut front = self.mask.clone();
        for r in 1..cap {
            front = dilate_once(&self.grid, &front);
            for (d, &f) in dist.iter_mut().zip(&front) {
                if f && *d > r {
                    *d = r;
                }
            }
        }
        dist
    }

    /// Cells within L∞ lattice distance `radius` of the set.
    pub fn dilate(&self, radius: usize) -> Self {
        let mut front = self.mask.clone();
        for _ in 0..radius {
            front = dilate_once(&self.grid, &front);
        }
        let mask = front
            .into_iter()
            .enumerate()
            .map(|(k, b)| b && self.grid.is_cell(k))
            .collect();
        Self {
            grid: self.grid,
            mask,
        }
    }

    /// Cells at L∞ distance exactly `1..=radius` from the set.
    pub fn ring(&self, radius: usize) -> Self {
        let d = self.dilate(radius);
        let mask = d
            .mask
            .iter()
            .zip(&self.mask)
            .map(|(&a, &b)| a && !b)
            .collect();
        Self {
            grid: self.grid,
            mask,
        }
    }
}

/// One step of 3×3(×3) box dilation over the whole lattice.
fn dilate_once<T: Real>(grid: &Grid<T>, mask: &[bool]) -> Vec<bool> {
    let (px, py) = grid.nodes_per_axis();
    let nt = grid.nt();
    let strides = [grid.n_nodes(), 1, px];
    let extents = [nt, px, py];
    let mut cur = mask.to_vec();
    for axis in 0..3 {
        if extents[axis] == 1 {
            continue;
        }
        let mut next = cur.clone();
        for k in 0..cur.len() {
            if cur[k] {
                continue;
            }
            let c = grid.lattice(k)[axis];
            let s = strides[axis];
            if (c > 0 && cur[k - s]) || (c + 1 < extents[axis] && cur[k + s]) {
                next[k] = true;
            }
        }
        cur = next;
    }
    cur
}

/// A compact set `K ⋐ Ω_T`: a closed union of cells respecting the one-cell margin
/// (see [`Grid::is_margin_cell`]). The margin is checked here, once.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactSet<T>(CellSet<T>);

impl<T: Real> CompactSet<T> {
    pub fn new(cells: CellSet<T>) -> Result<Self> {
        let grid = cells.grid;
        if let Some(k) = cells.iter().find(|&k| !grid.is_margin_cell(k)) {
            let [n, ix, iy] = grid.lattice(k);
            return Err(Error::InvalidSet {
                op: "CompactSet::new",
                reason: format!("cell (level {n}, ix {ix}, iy {iy}) violates the one-cell margin"),
            });
        }
        Ok(Self(cells))
    }

    pub fn empty(grid: Grid<T>) -> Self {
        Self(CellSet::empty(grid))
    }

    pub fn from_lattice(
        grid: Grid<T>,
        cells: impl IntoIterator<Item = (usize, usize, usize)>,
    ) -> Result<Self> {
        Self::new(CellSet::from_lattice(grid, cells)?)
    }

    pub fn from_box(
        grid: Grid<T>,
        levels: (usize, usize),
        xs: (usize, usize),
        ys: Option<(usize, usize)>,
    ) -> Result<Self> {
        Self::new(CellSet::from_box(grid, levels, xs, ys)?)
    }

    pub fn cells(&self) -> &CellSet<T> {
        &self.0
    }

    pub fn into_cells(self) -> CellSet<T> {
        self.0
    }

    /// Last time level touched by the set, if nonempty.
    pub fn last_level(&self) -> Option<usize> {
        self.0.iter().map(|k| self.0.grid.split(k).0).max()
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        Ok(Self(self.0.union(&other.0)?))
    }
}

impl<T> std::ops::Deref for CompactSet<T> {
    type Target = CellSet<T>;
    fn deref(&self) -> &CellSet<T> {
        &self.0
    }
}

/// Shrinking open neighbourhoods `E_1 ⊃ E_2 ⊃ …` of `K`:
/// `E_i = {cells at L∞ distance < ⌈radius / i⌉ from K}`.
///
/// `E_i = K` as soon as `⌈radius / i⌉ = 1`, so the intersection of the closures is `K`.
/// `E_1` must consist of margin cells.
pub fn shrink_neighborhoods<T: Real>(
    k: &CompactSet<T>,
    radius: usize,
    levels: usize,
) -> Result<Vec<CellSet<T>>> {
    if k.is_empty() {
        return Err(Error::InvalidSet {
            op: "shrink_neighborhoods",
            reason: "K is empty".into(),
        });
    }
    if radius == 0 || levels == 0 {
        return Err(Error::InvalidSet {
            op: "shrink_neighborhoods",
            reason: format!("radius ({radius}) and level count ({levels}) must be positive"),
        });
    }
    let grid = *k.grid();
    let dist = k.distance_capped(radius + 1);
    let mut out = Vec::with_capacity(levels);
    for i in 1..=levels {
        let rho = radius.div_ceil(i);
        let mask: Vec<bool> = dist
            .iter()
            .enumerate()
            .map(|(idx, &d)| d < rho && grid.is_cell(idx))
            .collect();
        let set = CellSet { grid, mask };
        if i == 1 {
            if let Some(bad) = set.iter().find(|&c| !grid.is_margin_cell(c)) {
                let [n, ix, iy] = grid.lattice(bad);
                return Err(Error::InvalidSet {
                    op: "shrink_neighborhoods",
                    reason: format!(
                        "K too close to the boundary: E_1 reaches (level {n}, ix {ix}, iy {iy}) outside the margin"
                    ),
                });
            }
        }
        out.push(set);
    }
    Ok(out)
}

/// Closed box of grid nodes: `x`, optional `y` and time-level index ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SpaceTimeBox {
    pub x: (usize, usize),
    pub y: Option<(usize, usize)>,
    pub t: (usize, usize),
}

impl SpaceTimeBox {
    fn open_contains(&self, [n, ix, iy]: [usize; 3]) -> bool {
        let strict = |c: usize, (a, b): (usize, usize)| a < c && c < b;
        strict(n, self.t) && strict(ix, self.x) && self.y.is_none_or(|r| strict(iy, r))
    }

    fn closed_contains(&self, [n, ix, iy]: [usize; 3]) -> bool {
        let within = |c: usize, (a, b): (usize, usize)| a <= c && c <= b;
        within(n, self.t) && within(ix, self.x) && self.y.is_none_or(|r| within(iy, r))
    }

    fn spatial_open(&self, [_, ix, iy]: [usize; 3]) -> bool {
        let strict = |c: usize, (a, b): (usize, usize)| a < c && c < b;
        strict(ix, self.x) && self.y.is_none_or(|r| strict(iy, r))
    }
}

/// Classification of a space-time node relative to a [`SpaceTimeUnion`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeClass {
    Outside,
    Interior,
    Lateral,
    Top,
    Bottom,
}

/// Finite union of grid-aligned space-time boxes, with its boundary split into
/// lateral (Σ), top (𝒯) and bottom (ℬ) pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeUnion<T> {
    grid: Grid<T>,
    boxes: Vec<SpaceTimeBox>,
    classes: Vec<NodeClass>,
}

impl<T: Real> SpaceTimeUnion<T> {
    pub fn new(grid: Grid<T>, boxes: Vec<SpaceTimeBox>) -> Result<Self> {
        let (px, py) = grid.nodes_per_axis();
        for b in &boxes {
            let ok_range = |(a, c): (usize, usize), n: usize| a < c && c < n;
            let y_ok = match (grid.dim(), b.y) {
                (1, None) => true,
                (2, Some(r)) => ok_range(r, py),
                _ => false,
            };
            if !(ok_range(b.x, px) && ok_range(b.t, grid.nt()) && y_ok) {
                return Err(Error::InvalidSet {
                    op: "SpaceTimeUnion::new",
                    reason: format!("box {b:?} is degenerate or leaves the grid"),
                });
            }
        }
        let classes = (0..grid.n_points())
            .map(|k| {
                let p = grid.lattice(k);
                if boxes.iter().any(|b| b.open_contains(p)) {
                    NodeClass::Interior
                } else if !boxes.iter().any(|b| b.closed_contains(p)) {
                    NodeClass::Outside
                } else if boxes.iter().any(|b| b.closed_contains(p) && p[0] == b.t.1) {
                    NodeClass::Top
                } else if boxes.iter().any(|b| b.closed_contains(p) && p[0] == b.t.0) {
                    NodeClass::Bottom
                } else {
                    debug_assert!(boxes
                        .iter()
                        .any(|b| b.closed_contains(p) && !b.spatial_open(p)));
                    NodeClass::Lateral
                }
            })
            .collect();
        Ok(Self {
            grid,
            boxes,
            classes,
        })
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }
    pub fn boxes(&self) -> &[SpaceTimeBox] {
        &self.boxes
    }
    pub fn classes(&self) -> &[NodeClass] {
        &self.classes
    }

    pub fn interior_mask(&self) -> Vec<bool> {
        self.classes
            .iter()
            .map(|&c| c == NodeClass::Interior)
            .collect()
    }

    /// Closure minus interior: `Σ ∪ 𝒯 ∪ ℬ`.
    pub fn boundary_mask(&self) -> Vec<bool> {
        self.classes
            .iter()
            .map(|&c| matches!(c, NodeClass::Lateral | NodeClass::Top | NodeClass::Bottom))
            .collect()
    }

    pub fn closure_mask(&self) -> Vec<bool> {
        self.classes
            .iter()
            .map(|&c| c != NodeClass::Outside)
            .collect()
    }

    pub fn nodes_of(&self, class: NodeClass) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class)
            .map(|(k, _)| k)
            .collect()
    }
}
