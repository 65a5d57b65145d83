//! Discrete Riesz measures: one weight per space-time cell, in units of mass.
//!
//! The weight of the cell ending at node `j`, level `n` is the discrete weak form
//! `[(u^n_j - u^{n-1}_j) - dt (Δ_h (u^n)^m)_j] h^d`, the same stencil the solver
//! uses, so that `extract_riesz` inverts `solve_measure_data` exactly.

use serde::{Deserialize, Serialize};

use crate::grid::{CellSet, Field, Grid};
use crate::solver::discrete_residual;
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure<T> {
    grid: Grid<T>,
    weights: Vec<T>,
}

impl<T: Real> DiscreteMeasure<T> {
    pub fn zero(grid: Grid<T>) -> Self {
        Self {
            weights: vec![T::zero(); grid.n_points()],
            grid,
        }
    }

    /// Full weight vector in the field layout; entries at non-cells must be zero.
    pub fn from_weights(grid: Grid<T>, weights: Vec<T>) -> Result<Self> {
        if weights.len() != grid.n_points() {
            return Err(Error::InvalidSet {
                op: "DiscreteMeasure::from_weights",
                reason: format!("{} weights for {} points", weights.len(), grid.n_points()),
            });
        }
        for (i, w) in weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(Error::InvalidSet {
                    op: "DiscreteMeasure::from_weights",
                    reason: format!("weight at {i} is not finite"),
                });
            }
            if *w != T::zero() && !grid.is_cell(i) {
                return Err(Error::InvalidSet {
                    op: "DiscreteMeasure::from_weights",
                    reason: format!("index {i} is not a cell"),
                });
            }
        }
        Ok(Self { grid, weights })
    }

    pub fn from_cells(grid: Grid<T>, cells: impl IntoIterator<Item = (usize, T)>) -> Result<Self> {
        let mut weights = vec![T::zero(); grid.n_points()];
        for (i, w) in cells {
            if i >= weights.len() {
                return Err(Error::InvalidSet {
                    op: "DiscreteMeasure::from_cells",
                    reason: format!("index {i} out of range"),
                });
            }
            weights[i] = weights[i] + w;
        }
        Self::from_weights(grid, weights)
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }
    pub fn weights(&self) -> &[T] {
        &self.weights
    }
    pub fn weight(&self, index: usize) -> T {
        self.weights[index]
    }

    pub fn total(&self) -> T {
        self.weights.iter().copied().sum()
    }

    pub fn total_variation(&self) -> T {
        self.weights.iter().map(|w| w.abs()).sum()
    }

    /// Tolerance for negative weights: `1e-8` times the total variation.
    pub fn neg_tol(&self) -> T {
        T::of(1e-8) * self.total_variation()
    }

    /// Most negative weight and its cell, if any weight is negative.
    pub fn min_weight(&self) -> Option<(T, usize)> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w < T::zero())
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, w)| (*w, i))
    }

    pub fn is_nonnegative(&self) -> bool {
        self.min_weight()
            .is_none_or(|(w, _)| w >= -self.neg_tol())
    }

    pub(crate) fn ensure_nonnegative(&self, op: &'static str) -> Result<()> {
        match self.min_weight() {
            Some((w, cell)) if w < -self.neg_tol() => Err(Error::NegativeMeasure {
                op,
                cell,
                weight: w.f64(),
            }),
            _ => Ok(()),
        }
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            grid: self.grid,
            weights: self.weights.iter().map(|&w| w * factor).collect(),
        }
    }

    pub fn restricted(&self, set: &CellSet<T>) -> Result<Self> {
        self.grid
            .ensure_same(set.grid(), "DiscreteMeasure::restricted")?;
        Ok(Self {
            grid: self.grid,
            weights: self
                .weights
                .iter()
                .zip(set.mask())
                .map(|(&w, &inside)| if inside { w } else { T::zero() })
                .collect(),
        })
    }

    /// Cells with nonzero weight.
    pub fn support(&self) -> CellSet<T> {
        CellSet::from_mask(
            self.grid,
            self.weights.iter().map(|w| *w != T::zero()).collect(),
        )
        .expect("weights vanish off cells")
    }

    /// Nonzero `(cell, weight)` pairs in index order.
    pub fn sparse(&self) -> Vec<(usize, T)> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != T::zero())
            .map(|(i, w)| (i, *w))
            .collect()
    }
}

/// Riesz measure of a nonnegative field.
pub fn extract_riesz<T: Real>(u: &Field<T>, m: T) -> Result<DiscreteMeasure<T>> {
    let scale = T::one().max(u.max_value());
    if !u.is_finite() {
        return Err(Error::InvalidProblem(
            "extract_riesz: field is not finite".into(),
        ));
    }
    if u.min_value() < -T::of(1e-12) * scale {
        return Err(Error::InvalidProblem(format!(
            "extract_riesz: field has negative value {}",
            u.min_value()
        )));
    }
    let vol = u.grid().cell_area();
    let residual = discrete_residual(u, m);
    let weights = residual.values().iter().map(|&r| r * vol).collect();
    DiscreteMeasure::from_weights(*u.grid(), weights)
}

pub fn measure_of_set<T: Real>(mu: &DiscreteMeasure<T>, set: &CellSet<T>) -> Result<T> {
    mu.grid.ensure_same(set.grid(), "measure_of_set")?;
    Ok(set.iter().map(|i| mu.weights[i]).sum())
}

/// True iff `b <= a + 1e-12 scale` on every cell, `scale = max(1, max |a|, max |b|)`.
pub fn dominates<T: Real>(a: &DiscreteMeasure<T>, b: &DiscreteMeasure<T>) -> Result<bool> {
    a.grid.ensure_same(&b.grid, "dominates")?;
    let sup = |m: &DiscreteMeasure<T>| m.weights.iter().fold(T::zero(), |s, w| s.max(w.abs()));
    let tol = T::of(1e-12) * T::one().max(sup(a)).max(sup(b));
    Ok(a.weights
        .iter()
        .zip(&b.weights)
        .all(|(&wa, &wb)| wb <= wa + tol))
}

/// Result of comparing a finite measure sequence with a candidate limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakConvergenceReport {
    /// `μ_N(K) - μ(K)` for each compact, with `μ_N` the last term.
    pub compact_margins: Vec<f64>,
    /// `μ(U) - μ_N(U)` for each open set.
    pub open_margins: Vec<f64>,
    /// Tail error bars `N |μ_N(S) - μ_{N-1}(S)|`, compacts first then opens.
    pub tail_bars: Vec<f64>,
    pub tol: f64,
    pub worst_compact: f64,
    pub worst_open: f64,
    pub passed: bool,
}

/// Checks `limsup μ_k(K) <= μ(K) + tol` and `μ(U) <= liminf μ_k(U) + tol` on the
/// supplied sets. The last term of the sequence stands in for the limit point,
/// and each inequality is allowed the tail error bar `N |μ_N(S) - μ_{N-1}(S)|`
/// on top of `tol = 1e-6 scale`, `scale` the largest total variation involved.
pub fn weak_convergence_check<T: Real>(
    mus: &[DiscreteMeasure<T>],
    limit: &DiscreteMeasure<T>,
    opens: &[CellSet<T>],
    compacts: &[CellSet<T>],
) -> Result<WeakConvergenceReport> {
    let scale = mus
        .iter()
        .chain(std::iter::once(limit))
        .map(|m| m.total_variation().f64())
        .fold(f64::MIN_POSITIVE, f64::max);
    let tol = 1e-6 * scale;
    let mut report = WeakConvergenceReport {
        compact_margins: Vec::new(),
        open_margins: Vec::new(),
        tail_bars: Vec::new(),
        tol,
        worst_compact: f64::NEG_INFINITY,
        worst_open: f64::NEG_INFINITY,
        passed: true,
    };
    let Some(last) = mus.last() else {
        return Ok(report);
    };
    for mu in mus {
        limit.grid.ensure_same(&mu.grid, "weak_convergence_check")?;
    }
    let n = mus.len();
    let tail = |set: &CellSet<T>| -> Result<f64> {
        if n < 2 {
            return Ok(0.0);
        }
        let a = measure_of_set(&mus[n - 1], set)?.f64();
        let b = measure_of_set(&mus[n - 2], set)?.f64();
        Ok(n as f64 * (a - b).abs())
    };
    for k in compacts {
        let margin = measure_of_set(last, k)?.f64() - measure_of_set(limit, k)?.f64();
        let bar = tail(k)?;
        report.passed &= margin <= tol + bar;
        report.worst_compact = report.worst_compact.max(margin);
        report.compact_margins.push(margin);
        report.tail_bars.push(bar);
    }
    for u in opens {
        let margin = measure_of_set(limit, u)?.f64() - measure_of_set(last, u)?.f64();
        let bar = tail(u)?;
        report.passed &= margin <= tol + bar;
        report.worst_open = report.worst_open.max(margin);
        report.open_margins.push(margin);
        report.tail_bars.push(bar);
    }
    Ok(report)
}
