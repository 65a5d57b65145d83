//! Balayages and PME capacities of cell sets.
//!
//! The balayage of a compact `K` is approximated by obstacle solutions for
//! `ψ_i = (1 + 2^{-i}) cos²(π d / (2ρ_i))` on the shrinking neighbourhoods
//! `E_i = {d < ρ_i}`, `ρ_i = ⌈r / i⌉`, with `d` the lattice distance to `K`.
//! Once `ρ_i = 1` the obstacle is `1 + 2^{-i}` on `K` and zero elsewhere.
//! The capacity is the Riesz mass of the last member on `K` plus one ring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{shrink_neighborhoods, CellSet, CompactSet, Field, Grid};
use crate::measure::{extract_riesz, measure_of_set, DiscreteMeasure};
use crate::obstacle::{solve_projected, ObstacleSpec};
use crate::solver::solve_measure_data;
use crate::{Error, Real, Result};

/// Radius of the first neighbourhood, in cells.
pub const NEIGHBORHOOD_RADIUS: usize = 3;

/// Default number of obstacles in the balayage family.
pub const DEFAULT_DEPTH: usize = 5;

/// Obstacle heights on `K`: `1 + 2^{-i}`.
pub fn obstacle_height<T: Real>(i: usize) -> T {
    T::one() + T::of(0.5f64.powi(i as i32))
}

/// The smooth obstacles `ψ_1, …, ψ_depth` of the balayage family.
pub fn balayage_obstacles<T: Real>(
    k: &CompactSet<T>,
    m: T,
    depth: usize,
) -> Result<Vec<ObstacleSpec<T>>> {
    let g = *k.grid();
    if depth == 0 {
        return Err(Error::InvalidSet {
            op: "balayage",
            reason: "depth must be at least 1".into(),
        });
    }
    // Validates that E_1 keeps the one-cell margin.
    shrink_neighborhoods(k, NEIGHBORHOOD_RADIUS, depth)?;
    let dist = k.distance_capped(NEIGHBORHOOD_RADIUS);
    (1..=depth)
        .map(|i| {
            let rho = NEIGHBORHOOD_RADIUS.div_ceil(i);
            let height: T = obstacle_height(i);
            let values = (0..g.n_points())
                .map(|p| {
                    let d = dist[p];
                    if !g.is_cell(p) || d >= rho {
                        T::zero()
                    } else {
                        let arg =
                            T::of(std::f64::consts::FRAC_PI_2) * T::of_usize(d) / T::of_usize(rho);
                        height * arg.cos().powi(2)
                    }
                })
                .collect();
            ObstacleSpec::new(Field::from_values(g, values, format!("psi_{i}"))?, m)
        })
        .collect()
}

/// Obstacle solutions for every member of the balayage family, checked to
/// decrease nodewise within `1e-8 scale`.
pub fn balayage_sequence<T: Real>(k: &CompactSet<T>, m: T, depth: usize) -> Result<Vec<Field<T>>> {
    let g = *k.grid();
    if k.is_empty() {
        return Ok(vec![Field::zeros(g, "balayage"); depth.max(1)]);
    }
    let specs = balayage_obstacles(k, m, depth)?;
    let fields: Vec<Field<T>> = specs
        .par_iter()
        .map(|s| solve_projected(s).map(|sol| sol.u))
        .collect::<Result<_>>()?;
    let tol = T::of(1e-8) * obstacle_height::<T>(1);
    for pair in fields.windows(2) {
        if let Some((excess, index)) = pair[1].max_excess(&pair[0], None) {
            if excess > tol {
                return Err(Error::Monotonicity {
                    op: "balayage",
                    violation: excess.f64(),
                    tolerance: tol.f64(),
                    index,
                });
            }
        }
    }
    Ok(fields)
}

/// Approximate balayage `R̂_K`: the last member of the obstacle family.
pub fn balayage<T: Real>(k: &CompactSet<T>, m: T, depth: usize) -> Result<Field<T>> {
    let mut fields = balayage_sequence(k, m, depth)?;
    let mut u = fields.pop().expect("depth >= 1");
    u.set_name("balayage");
    Ok(u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityDiagnostics {
    pub dim: usize,
    pub nx: usize,
    pub ny: Option<usize>,
    pub nt: usize,
    pub h: f64,
    pub dt: f64,
    pub m: f64,
    pub depth: usize,
    pub cells_in_k: usize,
    /// Riesz mass on the one-cell ring around `K`.
    pub ring_mass: f64,
    /// Total variation of the Riesz measure outside `K` plus its ring.
    pub mass_outside: f64,
    pub total_variation: f64,
    /// `sup` of the extremal field.
    pub extremal_max: f64,
    /// `min` of the extremal field over `K`.
    pub extremal_min_on_k: f64,
    /// `Σ u h^d` at the final level: mass still in the domain when the grid ends.
    pub final_level_mass: f64,
}

#[derive(Debug, Clone)]
pub struct CapacityResult<T> {
    pub value: T,
    pub extremal: Field<T>,
    pub extremal_measure: DiscreteMeasure<T>,
    pub diagnostics: CapacityDiagnostics,
}

/// JSON-friendly view of a capacity computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacitySummary {
    pub value: f64,
    pub error_bar: f64,
    pub diagnostics: CapacityDiagnostics,
}

impl<T: Real> CapacityResult<T> {
    pub fn summary(&self) -> CapacitySummary {
        CapacitySummary {
            value: self.value.f64(),
            error_bar: self.diagnostics.ring_mass.abs() + self.diagnostics.mass_outside,
            diagnostics: self.diagnostics.clone(),
        }
    }
}

/// `cap(K) = μ_{R̂_K}(K ∪ ring)`.
pub fn capacity_of_compact<T: Real>(
    k: &CompactSet<T>,
    m: T,
    depth: usize,
) -> Result<CapacityResult<T>> {
    let g = *k.grid();
    let extremal = balayage(k, m, depth)?;
    let mu = extract_riesz(&extremal, m)?;
    let ring = k.ring(1);
    let near = k.cells().union(&ring)?;
    // `+ 0` turns an empty sum's -0 into 0
    let value = measure_of_set(&mu, &near)? + T::zero();
    let ring_mass = measure_of_set(&mu, &ring)?;
    let outside: T = (0..g.n_points())
        .filter(|&i| !near.contains(i))
        .map(|i| mu.weight(i).abs())
        .sum();
    let on_k = k
        .iter()
        .map(|i| extremal.values()[i])
        .fold(T::infinity(), |a, v| a.min(v));
    let final_mass: T = extremal.level(g.nt() - 1).iter().copied().sum::<T>() * g.cell_area();
    let diagnostics = CapacityDiagnostics {
        dim: g.dim(),
        nx: g.nx(),
        ny: g.ny(),
        nt: g.nt(),
        h: g.h().f64(),
        dt: g.dt().f64(),
        m: m.f64(),
        depth,
        cells_in_k: k.len(),
        ring_mass: ring_mass.f64(),
        mass_outside: outside.f64(),
        total_variation: mu.total_variation().f64(),
        extremal_max: extremal.max_value().f64(),
        extremal_min_on_k: if k.is_empty() { 0.0 } else { on_k.f64() },
        final_level_mass: final_mass.f64(),
    };
    Ok(CapacityResult {
        value,
        extremal,
        extremal_measure: mu,
        diagnostics,
    })
}

/// Budget and stopping rules of the brute-force oracle.
#[derive(Debug, Clone, Copy)]
pub struct BruteForceOptions {
    /// Stop when a cycle improves the total by less than this fraction.
    pub rel_improvement: f64,
    /// Admissible excess of `max u` over 1.
    pub feasibility_tol: f64,
    pub max_cycles: usize,
    pub bisection_steps: usize,
}

impl Default for BruteForceOptions {
    fn default() -> Self {
        Self {
            rel_improvement: 1e-4,
            feasibility_tol: 1e-6,
            max_cycles: 400,
            bisection_steps: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForceResult {
    pub value: f64,
    pub cycles: usize,
    pub solves: usize,
    pub budget_exceeded: bool,
    /// `max u_μ` of the returned measure.
    pub max_u: f64,
    /// Total masses of every feasible trial measure met during the search.
    pub feasible_totals: Vec<f64>,
    /// Final weight per cell of `K`, in `K`'s index order.
    pub weights: Vec<f64>,
}

/// Capacity oracle: maximizes `μ(Ω)` over measures on the cells of `K` with
/// `u_μ <= 1`, by cyclic coordinate search. Each cell's weight is set by
/// bisection so that `u_μ = 1` at the cell's node, or to zero when the other
/// weights already push that node above 1. The iteration stops once a full
/// cycle changes the total by less than `1e-4` of it and the measure is feasible.
pub fn brute_force_capacity<T: Real>(k: &CompactSet<T>, m: T) -> Result<BruteForceResult> {
    brute_force_capacity_with(k, m, &BruteForceOptions::default(), None)
}

/// As `brute_force_capacity`, optionally starting from given weights (one per cell of `K`).
pub fn brute_force_capacity_with<T: Real>(
    k: &CompactSet<T>,
    m: T,
    opts: &BruteForceOptions,
    start: Option<&[f64]>,
) -> Result<BruteForceResult> {
    let g = *k.grid();
    let cells: Vec<usize> = k.iter().collect();
    let mut result = BruteForceResult {
        value: 0.0,
        cycles: 0,
        solves: 0,
        budget_exceeded: false,
        max_u: 0.0,
        feasible_totals: Vec::new(),
        weights: vec![0.0; cells.len()],
    };
    if cells.is_empty() {
        return Ok(result);
    }
    if let Some(s) = start {
        if s.len() != cells.len() || s.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidSet {
                op: "brute_force_capacity",
                reason: "start weights must be one nonnegative value per cell of K".into(),
            });
        }
        result.weights.copy_from_slice(s);
    }
    let vol = (g.cell_area() * g.dt()).f64();
    let solve = |w: &[f64], result: &mut BruteForceResult| -> Result<Field<T>> {
        let mu = DiscreteMeasure::from_cells(g, cells.iter().zip(w).map(|(&c, &x)| (c, T::of(x))))?;
        result.solves += 1;
        let u = solve_measure_data(&g, m, &mu)?;
        let max_u = u.max_value().f64();
        if max_u <= 1.0 + opts.feasibility_tol {
            result.feasible_totals.push(w.iter().sum());
        }
        Ok(u)
    };
    let mut weights = result.weights.clone();
    let mut total_prev = f64::NAN;
    let max_u = loop {
        for (slot, &cell) in cells.iter().enumerate() {
            weights[slot] = 0.0;
            let at_zero = solve(&weights, &mut result)?.values()[cell].f64();
            if at_zero >= 1.0 {
                continue;
            }
            let mut lo = 0.0;
            let mut hi = vol / g.dt().f64();
            loop {
                weights[slot] = hi;
                if solve(&weights, &mut result)?.values()[cell].f64() >= 1.0 {
                    break;
                }
                lo = hi;
                hi *= 2.0;
            }
            for _ in 0..opts.bisection_steps {
                let mid = 0.5 * (lo + hi);
                weights[slot] = mid;
                if solve(&weights, &mut result)?.values()[cell].f64() > 1.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if hi - lo <= 1e-13 * hi {
                    break;
                }
            }
            weights[slot] = lo;
        }
        result.cycles += 1;
        let u = solve(&weights, &mut result)?;
        let max_u = u.max_value().f64();
        let total: f64 = weights.iter().sum();
        let settled = (total - total_prev).abs() < opts.rel_improvement * total;
        total_prev = total;
        if settled && max_u <= 1.0 + opts.feasibility_tol {
            break max_u;
        }
        if result.cycles >= opts.max_cycles {
            result.budget_exceeded = true;
            break max_u;
        }
    };
    result.value = weights.iter().sum();
    result.max_u = max_u;
    result.weights = weights;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenCapacity {
    pub value: f64,
    /// Last increment of the exhaustion.
    pub error_bar: f64,
    /// Capacities of the exhausting compacts, innermost first.
    pub compacts: Vec<f64>,
}

/// Capacity of an open cell set, as the limit of capacities of the compacts
/// `K_j = {cells of U at distance > J - j from the complement}`.
pub fn capacity_of_open<T: Real>(u: &CellSet<T>, m: T, depth: usize) -> Result<OpenCapacity> {
    let g = *u.grid();
    if u.is_empty() {
        return Ok(OpenCapacity {
            value: 0.0,
            error_bar: 0.0,
            compacts: Vec::new(),
        });
    }
    CompactSet::new(u.clone()).map_err(|_| Error::InvalidSet {
        op: "capacity_of_open",
        reason: "the closure of U must stay a cell away from the parabolic boundary".into(),
    })?;
    let complement = CellSet::all(g).difference(u)?;
    let cap = g.nx().max(g.nt()).max(g.ny().unwrap_or(0));
    // Level 0 and the spatial boundary count as complement too.
    let to_complement = complement.distance_capped(cap);
    let dist: Vec<usize> = (0..g.n_points())
        .map(|i| to_complement[i].min(distance_to_noncell(&g, i)))
        .collect();
    let reach = u.iter().map(|i| dist[i]).max().unwrap_or(1);
    let compacts: Vec<CompactSet<T>> = (1..=reach)
        .map(|j| {
            let cells = u.iter().filter(|&i| dist[i] > reach - j);
            CompactSet::new(CellSet::from_indices(g, cells)?)
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = compacts
        .par_iter()
        .map(|k| capacity_of_compact(k, m, depth).map(|r| r.value.f64()))
        .collect::<Result<_>>()?;
    let n = values.len();
    let error_bar = if n >= 2 {
        (values[n - 1] - values[n - 2]).abs()
    } else {
        0.0
    };
    Ok(OpenCapacity {
        value: values[n - 1],
        error_bar,
        compacts: values,
    })
}

fn distance_to_noncell<T: Real>(g: &Grid<T>, index: usize) -> usize {
    let [n, ix, iy] = g.lattice(index);
    let (px, py) = g.nodes_per_axis();
    let mut d = n.min(ix).min(px - 1 - ix);
    if g.dim() == 2 {
        d = d.min(iy).min(py - 1 - iy);
    }
    d
}

/// One structural check of the capacity.
#[derive(Debug, Clone)]
pub enum PropertyInstance<T> {
    /// `cap(E1 ∪ E2) <= cap(E1) + cap(E2)`.
    Subadditivity {
        e1: CompactSet<T>,
        e2: CompactSet<T>,
    },
    /// `cap(small) <= cap(large)` for `small ⊂ large`.
    Monotonicity {
        small: CompactSet<T>,
        large: CompactSet<T>,
    },
    /// `cap(K_i)` nonincreasing along a decreasing family and close to `cap(limit)`.
    DecreasingCompacts {
        family: Vec<CompactSet<T>>,
        limit: CompactSet<T>,
    },
    /// `cap(U)` equals the supremum over the inscribed compacts of the exhaustion.
    InnerRegularity { open: CellSet<T> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyOutcome {
    pub property: String,
    pub pass: bool,
    pub values: Vec<f64>,
    /// Relative defect of the inequality (`<= 0` means exact).
    pub defect: f64,
}

/// Relative tolerance of the property suite.
pub const PROPERTY_REL_TOL: f64 = 0.10;
/// Tolerance for the monotonicity checks, relative to the larger capacity.
pub const MONOTONE_REL_TOL: f64 = 1e-6;

pub fn check_property<T: Real>(
    instance: &PropertyInstance<T>,
    m: T,
    depth: usize,
) -> Result<PropertyOutcome> {
    let cap = |k: &CompactSet<T>| capacity_of_compact(k, m, depth).map(|r| r.value.f64());
    Ok(match instance {
        PropertyInstance::Subadditivity { e1, e2 } => {
            let both = e1.union(e2)?;
            let (a, b, c) = (cap(e1)?, cap(e2)?, cap(&both)?);
            let defect = (c - (a + b)) / (a + b).max(f64::MIN_POSITIVE);
            PropertyOutcome {
                property: "subadditivity".into(),
                pass: defect <= PROPERTY_REL_TOL,
                values: vec![a, b, c],
                defect,
            }
        }
        PropertyInstance::Monotonicity { small, large } => {
            if !small.is_subset(large) {
                return Err(Error::InvalidSet {
                    op: "capacity_property_suite",
                    reason: "monotonicity instance is not nested".into(),
                });
            }
            let (a, b) = (cap(small)?, cap(large)?);
            let defect = (a - b) / b.max(f64::MIN_POSITIVE);
            PropertyOutcome {
                property: "monotonicity".into(),
                pass: defect <= MONOTONE_REL_TOL,
                values: vec![a, b],
                defect,
            }
        }
        PropertyInstance::DecreasingCompacts { family, limit } => {
            let mut values: Vec<f64> = family.iter().map(&cap).collect::<Result<_>>()?;
            let lim = cap(limit)?;
            let mut monotone_defect: f64 = 0.0;
            for w in values.windows(2) {
                monotone_defect = monotone_defect.max((w[1] - w[0]) / w[0].max(f64::MIN_POSITIVE));
            }
            let last = *values.last().unwrap_or(&lim);
            let limit_defect = (last - lim).abs() / lim.max(f64::MIN_POSITIVE);
            values.push(lim);
            PropertyOutcome {
                property: "decreasing_compacts".into(),
                pass: monotone_defect <= MONOTONE_REL_TOL && limit_defect <= PROPERTY_REL_TOL,
                values,
                defect: limit_defect.max(monotone_defect),
            }
        }
        PropertyInstance::InnerRegularity { open } => {
            let res = capacity_of_open(open, m, depth)?;
            let sup = res.compacts.iter().copied().fold(0.0, f64::max);
            let defect = (res.value - sup).abs() / res.value.max(f64::MIN_POSITIVE);
            let mut values = res.compacts.clone();
            values.push(res.value);
            PropertyOutcome {
                property: "inner_regularity".into(),
                pass: defect <= PROPERTY_REL_TOL,
                values,
                defect,
            }
        }
    })
}

/// Runs every instance (in parallel, results in input order).
pub fn capacity_property_suite<T: Real>(
    instances: &[(PropertyInstance<T>, T)],
    depth: usize,
) -> Result<Vec<PropertyOutcome>> {
    instances
        .par_iter()
        .map(|(inst, m)| check_property(inst, *m, depth))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid<f64> {
        Grid::<f64>::new_1d(16, 1.0, 12, 1.0 / 16.0).unwrap()
    }

    #[test]
    fn empty_set_has_zero_capacity() {
        let g = grid();
        let k = CompactSet::empty(g);
        assert_eq!(balayage(&k, 2.0, 5).unwrap().sup_norm(), 0.0);
        assert_eq!(capacity_of_compact(&k, 2.0, 5).unwrap().value, 0.0);
        assert_eq!(brute_force_capacity(&k, 2.0).unwrap().value, 0.0);
        assert_eq!(
            capacity_of_open(&CellSet::empty(g), 2.0, 5).unwrap().value,
            0.0
        );
    }

    #[test]
    fn obstacle_family_decreases() {
        let g = grid();
        let k = CompactSet::from_lattice(g, [(5, 8, 0), (5, 9, 0)]).unwrap();
        let obs = balayage_obstacles(&k, 2.0, 5).unwrap();
        for w in obs.windows(2) {
            assert!(w[1]
                .psi()
                .max_excess(w[0].psi(), None)
                .is_none_or(|(e, _)| e <= 0.0));
        }
        let last = obs[4].psi();
        for i in 0..g.n_points() {
            let expected = if k.contains(i) { 1.0 + 1.0 / 32.0 } else { 0.0 };
            assert_eq!(last.values()[i], expected);
        }
    }

    #[test]
    fn extremal_bounds_and_support() {
        let g = grid();
        let k = CompactSet::from_lattice(g, [(4, 7, 0), (4, 8, 0), (5, 8, 0)]).unwrap();
        let res = capacity_of_compact(&k, 2.0, 5).unwrap();
        let d = &res.diagnostics;
        assert!(d.extremal_max <= 1.0 + 1.0 / 32.0 + 1e-12);
        assert!(d.extremal_min_on_k >= 1.0 - 1e-7);
        assert!(res.extremal.min_value() >= 0.0);
        assert!(d.mass_outside <= 0.01 * d.total_variation);
        assert!(res.value > 0.0);
    }

    #[test]
    fn nested_sets_are_ordered() {
        let g = grid();
        let k = CompactSet::from_lattice(g, [(5, 8, 0)]).unwrap();
        let k2 = CompactSet::from_lattice(g, [(5, 8, 0), (5, 9, 0), (6, 8, 0)]).unwrap();
        let a = balayage(&k, 2.0, 5).unwrap();
        let b = balayage(&k2, 2.0, 5).unwrap();
        assert!(a.max_excess(&b, None).is_none_or(|(e, _)| e <= 1e-8));
        let ca = capacity_of_compact(&k, 2.0, 5).unwrap().value;
        let cb = capacity_of_compact(&k2, 2.0, 5).unwrap().value;
        assert!(ca <= cb * (1.0 + 1e-6));
    }

    #[test]
    fn single_cell_oracle_is_restart_independent() {
        let g = grid();
        let k = CompactSet::from_lattice(g, [(5, 8, 0)]).unwrap();
        let a = brute_force_capacity(&k, 2.0).unwrap();
        let b = brute_force_capacity_with(&k, 2.0, &BruteForceOptions::default(), Some(&[10.0]))
            .unwrap();
        assert!(!a.budget_exceeded && !b.budget_exceeded);
        assert!((a.value - b.value).abs() <= 1e-4 * a.value);
    }

    #[test]
    fn open_single_cell_matches_compact() {
        let g = grid();
        let k = CompactSet::from_lattice(g, [(5, 8, 0)]).unwrap();
        let open = capacity_of_open(k.cells(), 2.0, 5).unwrap();
        let closed = capacity_of_compact(&k, 2.0, 5).unwrap().value;
        assert_eq!(open.compacts.len(), 1);
        assert!((open.value - closed).abs() <= 1e-12 * closed);
    }
}
