//! Numerical laboratory for the porous medium equation `u_t = Δ(u^m)`, `m > 1`.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`]: uniform space-time grids, nodal fields, cell sets and unions of boxes.
//! * [`solver`]: backward-Euler/Newton time stepping with Dirichlet data and sources.
//! * [`obstacle`]: penalized and projected obstacle solvers, obstacle families, réduites.
//! * [`measure`]: discrete Riesz measures and comparisons between them.
//! * [`capacity`]: balayages, capacities of compact and open cell sets, brute-force oracle.
//! * [`reference`]: Barenblatt profiles, universal-estimate calibration, Caccioppoli check.
//! * [`verify`]: executable comparison theorems and the bundled instance suites.
//!
//! All numerical code is generic over the scalar type through [`Real`]; the
//! `*64` aliases at the crate root fix it to `f64`, which is what the CLI uses.

// `!(x > y)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Stencil code reads better with explicit node indices.
#![allow(clippy::needless_range_loop)]

pub mod capacity;
pub mod grid;
pub mod io;
pub mod measure;
pub mod obstacle;
pub mod reference;
pub mod solver;
pub mod verify;

mod linalg;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

/// Floating point scalar used throughout the crate: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` constant into `Self`.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }

    /// Converts a count into `Self`.
    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance floor: relative tolerances tighter than a few hundred ulps are
    /// unattainable, so every relative tolerance is raised to at least this.
    #[inline]
    fn tol_floor() -> Self {
        Self::epsilon() * Self::of(256.0)
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type Grid64 = grid::Grid<f64>;
pub type Field64 = grid::Field<f64>;
pub type CellSet64 = grid::CellSet<f64>;
pub type CompactSet64 = grid::CompactSet<f64>;
pub type Measure64 = measure::DiscreteMeasure<f64>;
pub type PmeProblem64 = solver::PmeProblem<f64>;
pub type ObstacleSpec64 = obstacle::ObstacleSpec<f64>;
pub type ObstacleSolution64 = obstacle::ObstacleSolution<f64>;
pub type CapacityResult64 = capacity::CapacityResult<f64>;
pub type Barenblatt64 = reference::Barenblatt<f64>;

pub use grid::{BoundaryKind, CellSet, CompactSet, Field, Grid, SpaceTimeBox, SpaceTimeUnion};
pub use measure::DiscreteMeasure;
pub use solver::{PmeProblem, SolverReport};

/// Errors raised by the library. Messages name the module and the operation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("core-grid: invalid grid: {0}")]
    InvalidGrid(String),

    #[error("core-grid: {op}: level {level} out of range (nt = {nt})")]
    LevelOutOfRange {
        op: &'static str,
        level: usize,
        nt: usize,
    },

    #[error("core-grid: {op}: {reason}")]
    InvalidSet { op: &'static str, reason: String },

    #[error("{op}: grid mismatch")]
    GridMismatch { op: &'static str },

    #[error("pme-solver: invalid problem: {0}")]
    InvalidProblem(String),

    #[error("pme-solver: {op}: Newton did not converge at level {level} after {iterations} iterations (residual {residual:e})")]
    NewtonFailure {
        op: &'static str,
        level: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("pme-solver: {op}: linear solve failed at level {level}: {reason}")]
    LinearSolve {
        op: &'static str,
        level: usize,
        reason: String,
    },

    #[error("pme-solver: step_implicit: negative source makes level {level} infeasible (min rhs {min_rhs:e})")]
    InfeasibleSource { level: usize, min_rhs: f64 },

    #[error("pme-solver: truncation_horizon: bound needs level {needed}, grid ends at level {available}")]
    HorizonExceedsGrid { needed: usize, available: usize },

    #[error("obstacle: inadmissible obstacle: {0}")]
    Inadmissible(String),

    #[error("obstacle: solve_penalized: iterates did not settle (last change {last_change:e}, tolerance {tolerance:e}, delta {delta:e})")]
    PenaltyNonConvergence {
        last_change: f64,
        tolerance: f64,
        delta: f64,
    },

    #[error("obstacle: solve_projected: active set did not settle at level {level} within {iterations} iterations (residual {residual:e})")]
    ActiveSetCycling {
        level: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("obstacle: increasing_obstacle_sequence: empty band for j = {j} at {count} nodes")]
    EmptyBand { j: usize, count: usize },

    #[error(
        "{op}: monotonicity violated by {violation:e} (tolerance {tolerance:e}) at index {index}"
    )]
    Monotonicity {
        op: &'static str,
        violation: f64,
        tolerance: f64,
        index: usize,
    },

    #[error("measure: {op}: negative weight {weight:e} at cell {cell}")]
    NegativeMeasure {
        op: &'static str,
        cell: usize,
        weight: f64,
    },

    #[error("reference: {op}: {reason}")]
    Reference { op: &'static str, reason: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("io: malformed input: {0}")]
    Parse(String),

    #[error("io: json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
