//! Obstacle problems for the PME.
//!
//! Two backends compute the smallest discrete supersolution above an obstacle `ψ`:
//!
//! * penalization: the PME with source `η_δ(ψ^m - u^m) Ψ_+`, `Ψ = ∂_t ψ - Δ_h ψ^m`,
//!   solved for a decreasing sequence of `δ`;
//! * projection: per level, the complementarity system `min(U - ψ, F(U)) = 0`
//!   solved by semismooth Newton with an active set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{CellSet, Field, Grid};
use crate::solver::{
    level_error, spow, LevelFailure, LevelSystem, NewtonOptions, Penalty, SolverReport,
    DEFAULT_REG_FLOOR,
};
use crate::{Error, Real, Result};

/// Finiteness checks and the size of the obstacle's own PME residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Admissibility {
    /// `max |∂_t ψ - Δ_h ψ^m|` over interior nodes of levels `1..nt`.
    pub psi_rate_sup: f64,
    pub finite: bool,
}

#[derive(Debug, Clone)]
pub struct ObstacleSpec<T> {
    psi: Field<T>,
    m: T,
    admissibility: Admissibility,
    /// Set by `smooth_obstacle_eps`: the obstacle is bounded away from zero and
    /// the compact-support rule is waived.
    positive_everywhere: bool,
}

impl<T: Real> ObstacleSpec<T> {
    /// Validates `ψ >= 0`, finiteness and compact support: `ψ` vanishes on the
    /// initial level, on the lateral boundary and on the spatial nodes next to it.
    pub fn new(psi: Field<T>, m: T) -> Result<Self> {
        if !(m > T::one()) {
            return Err(Error::Inadmissible(format!(
                "exponent m = {m} must exceed 1"
            )));
        }
        if !psi.is_finite() {
            return Err(Error::Inadmissible("obstacle has non-finite values".into()));
        }
        if psi.min_value() < T::zero() {
            return Err(Error::Inadmissible(format!(
                "obstacle has negative value {}",
                psi.min_value()
            )));
        }
        let g = *psi.grid();
        for i in 0..g.n_points() {
            if psi.values()[i] != T::zero() && in_margin(&g, i) {
                let (n, j) = g.split(i);
                return Err(Error::Inadmissible(format!(
                    "obstacle is not compactly supported: value {} at level {n}, node {j}",
                    psi.values()[i]
                )));
            }
        }
        Self::build(psi, m, false)
    }

    fn build(mut psi: Field<T>, m: T, positive_everywhere: bool) -> Result<Self> {
        psi.set_name("psi");
        psi.mark_nonnegative()?;
        let rate = obstacle_rate(&psi, m);
        let sup = rate.iter().fold(0.0f64, |a, v| a.max(v.abs().f64()));
        let admissibility = Admissibility {
            psi_rate_sup: sup,
            finite: sup.is_finite(),
        };
        if !admissibility.finite {
            return Err(Error::Inadmissible("obstacle rate is not finite".into()));
        }
        Ok(Self {
            psi,
            m,
            admissibility,
            positive_everywhere,
        })
    }

    pub fn psi(&self) -> &Field<T> {
        &self.psi
    }
    pub fn m(&self) -> T {
        self.m
    }
    pub fn grid(&self) -> &Grid<T> {
        self.psi.grid()
    }
    pub fn admissibility(&self) -> Admissibility {
        self.admissibility
    }
    pub fn positive_everywhere(&self) -> bool {
        self.positive_everywhere
    }

    /// `max(1, ‖ψ‖_∞)`.
    pub fn scale(&self) -> T {
        T::one().max(self.psi.max_value())
    }

    /// `1e-7 scale`.
    pub fn contact_tol(&self) -> T {
        T::of(1e-7) * self.scale()
    }
}

fn in_margin<T: Real>(g: &Grid<T>, index: usize) -> bool {
    let [n, ix, iy] = g.lattice(index);
    let (px, py) = g.nodes_per_axis();
    let near = |i: usize, p: usize| i <= 1 || i + 2 >= p;
    n == 0 || near(ix, px) || (g.dim() == 2 && near(iy, py))
}

/// `∂_t ψ - Δ_h ψ^m` with backward time differences, zero on non-cells.
pub fn obstacle_rate<T: Real>(psi: &Field<T>, m: T) -> Vec<T> {
    let g = *psi.grid();
    let mut out = vec![T::zero(); g.n_points()];
    let interior = g.interior_nodes();
    let inv_dt = T::one() / g.dt();
    for n in 1..g.nt() {
        let pw: Vec<T> = psi.level(n).iter().map(|&v| spow(v, m)).collect();
        let prev = psi.level(n - 1);
        let cur = psi.level(n);
        for &j in &interior {
            out[g.index(n, j)] =
                (cur[j] - prev[j]) * inv_dt - crate::grid::laplacian_node(&g, &pw, j);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Penalized,
    Projected,
}

#[derive(Debug, Clone)]
pub struct ObstacleSolution<T> {
    pub u: Field<T>,
    pub backend: Backend,
    /// Cells where `|u - ψ| <= contact_tol` and `ψ > 0`.
    pub contact_set: CellSet<T>,
    /// Final penalization parameter (penalized backend only).
    pub delta: Option<T>,
    /// Every penalization parameter used, in order.
    pub deltas: Vec<T>,
    /// Sup-norm change between the last two penalized iterates.
    pub last_change: Option<T>,
    pub report: SolverReport,
}

/// Boundary data of the obstacle problem: `ψ` on the parabolic boundary.
fn initial_guess<T: Real>(spec: &ObstacleSpec<T>) -> Field<T> {
    let g = *spec.grid();
    let mut u = Field::zeros(g, "u");
    u.level_mut(0).copy_from_slice(spec.psi.level(0));
    for n in 1..g.nt() {
        for j in 0..g.n_nodes() {
            if g.is_boundary_node(j) {
                u.set(n, j, spec.psi.at(n, j));
            }
        }
    }
    u
}

fn contact_set<T: Real>(spec: &ObstacleSpec<T>, u: &Field<T>) -> CellSet<T> {
    let g = *spec.grid();
    let tol = spec.contact_tol();
    let mask = (0..g.n_points())
        .map(|i| {
            let p = spec.psi.values()[i];
            g.is_cell(i) && p > T::zero() && (u.values()[i] - p).abs() <= tol
        })
        .collect();
    CellSet::from_mask(g, mask).expect("mask holds cells only")
}

/// Default penalization parameters `(1/4)^k`, `k = 1..6`.
pub fn default_deltas<T: Real>() -> Vec<T> {
    (1..=6).map(|k| T::of(0.25f64.powi(k))).collect()
}

/// Upper limit on automatic `δ / 4` refinements past the supplied sequence.
pub const MAX_DELTA_EXTENSIONS: usize = 20;

/// Sup-norm tolerance between successive penalized iterates, relative to `scale`.
pub const PENALTY_STOP_REL: f64 = 1e-6;

fn march_penalized<T: Real>(
    spec: &ObstacleSpec<T>,
    rate: &[T],
    delta: T,
    start: &Field<T>,
) -> Result<(Field<T>, SolverReport)> {
    let g = *spec.grid();
    let nn = g.n_nodes();
    let m = spec.m;
    let psi_pow: Vec<T> = spec.psi.values().iter().map(|&v| spow(v, m)).collect();
    let free: Vec<bool> = (0..nn).map(|j| !g.is_boundary_node(j)).collect();
    let opts = NewtonOptions::default();
    let mut u = initial_guess(spec);
    let mut report = SolverReport {
        converged: true,
        ..Default::default()
    };
    for n in 1..g.nt() {
        let range = n * nn..(n + 1) * nn;
        let prev = u.level(n - 1).to_vec();
        let sys = LevelSystem {
            grid: &g,
            m,
            prev: &prev,
            forcing: None,
            free: &free,
            penalty: Some(Penalty {
                psi_pow: &psi_pow[range.clone()],
                rate: &rate[range.clone()],
                delta,
            }),
            obstacle: None,
            reg: T::of(DEFAULT_REG_FLOOR),
        };
        let mut cur = u.level(n).to_vec();
        for j in 0..nn {
            if free[j] {
                cur[j] = start.at(n, j);
            }
        }
        let stats = sys
            .solve(&mut cur, &opts, opts.max_iter)
            .map_err(|e| level_error("solve_penalized", n, e))?;
        report.push(&stats);
        u.level_mut(n).copy_from_slice(&cur);
    }
    Ok((u, report))
}

/// Penalized obstacle solve over `deltas`, refined by `δ / 4` while successive
/// iterates still differ by more than `1e-6 scale`.
pub fn solve_penalized<T: Real>(
    spec: &ObstacleSpec<T>,
    deltas: &[T],
) -> Result<ObstacleSolution<T>> {
    if deltas.is_empty() || deltas.iter().any(|d| !(*d > T::zero())) {
        return Err(Error::Inadmissible(
            "penalization needs a nonempty list of positive deltas".into(),
        ));
    }
    let start = std::time::Instant::now();
    let rate: Vec<T> = obstacle_rate(&spec.psi, spec.m)
        .into_iter()
        .map(|r| r.max(T::zero()))
        .collect();
    let tol = T::of(PENALTY_STOP_REL) * spec.scale();
    let mut used = Vec::new();
    let mut report = SolverReport {
        converged: true,
        ..Default::default()
    };
    let mut current: Option<Field<T>> = None;
    let mut last_change = None;
    let mut delta = deltas[0];
    let mut k = 0;
    loop {
        let warm = current.clone().unwrap_or_else(|| initial_guess(spec));
        let (u, rep) = march_penalized(spec, &rate, delta, &warm)?;
        report.merge(&rep);
        used.push(delta);
        if let Some(prev) = &current {
            last_change = Some(u.max_abs_diff(prev));
        }
        current = Some(u);
        k += 1;
        let settled = last_change.is_some_and(|c| c <= tol);
        if k < deltas.len() {
            delta = deltas[k];
            continue;
        }
        if settled {
            break;
        }
        if k >= deltas.len() + MAX_DELTA_EXTENSIONS {
            return Err(Error::PenaltyNonConvergence {
                last_change: last_change.map_or(f64::INFINITY, |c| c.f64()),
                tolerance: tol.f64(),
                delta: delta.f64(),
            });
        }
        delta = delta / T::of(4.0);
    }
    let mut u = current.expect("at least one delta");
    u.set_name("u");
    u.set_nonnegative_flag(true);
    report.wall_time = start.elapsed().as_secs_f64();
    let contact_set = contact_set(spec, &u);
    Ok(ObstacleSolution {
        u,
        backend: Backend::Penalized,
        contact_set,
        delta: Some(delta),
        deltas: used,
        last_change,
        report,
    })
}

/// Iteration cap of the active-set Newton method per level.
pub const MAX_ACTIVE_SET_ITERATIONS: usize = 200;

/// Projected (complementarity) obstacle solve.
pub fn solve_projected<T: Real>(spec: &ObstacleSpec<T>) -> Result<ObstacleSolution<T>> {
    let start = std::time::Instant::now();
    let g = *spec.grid();
    let nn = g.n_nodes();
    let free: Vec<bool> = (0..nn).map(|j| !g.is_boundary_node(j)).collect();
    let opts = NewtonOptions::default();
    let mut u = initial_guess(spec);
    let mut report = SolverReport {
        converged: true,
        ..Default::default()
    };
    for n in 1..g.nt() {
        let prev = u.level(n - 1).to_vec();
        let psi = spec.psi.level(n);
        let sys = LevelSystem {
            grid: &g,
            m: spec.m,
            prev: &prev,
            forcing: None,
            free: &free,
            penalty: None,
            obstacle: Some(psi),
            reg: T::of(DEFAULT_REG_FLOOR),
        };
        let mut cur = u.level(n).to_vec();
        for j in 0..nn {
            if free[j] {
                cur[j] = prev[j].max(psi[j]);
            }
        }
        let stats = sys
            .solve(&mut cur, &opts, MAX_ACTIVE_SET_ITERATIONS)
            .map_err(|e| match e {
                LevelFailure::Newton {
                    iterations,
                    residual,
                } => Error::ActiveSetCycling {
                    level: n,
                    iterations,
                    residual: residual.f64(),
                },
                other => level_error("solve_projected", n, other),
            })?;
        report.push(&stats);
        u.level_mut(n).copy_from_slice(&cur);
    }
    u.set_nonnegative_flag(true);
    report.wall_time = start.elapsed().as_secs_f64();
    let contact_set = contact_set(spec, &u);
    Ok(ObstacleSolution {
        u,
        backend: Backend::Projected,
        contact_set,
        delta: None,
        deltas: Vec::new(),
        last_change: None,
        report,
    })
}

/// `max |min(U - ψ, F(U))|` over interior nodes of every level, the residual of
/// the discrete complementarity system.
pub fn complementarity_residual<T: Real>(spec: &ObstacleSpec<T>, u: &Field<T>) -> Result<T> {
    let g = *spec.grid();
    g.ensure_same(u.grid(), "complementarity_residual")?;
    let r = crate::solver::discrete_residual(u, spec.m);
    let mut worst = T::zero();
    for i in 0..g.n_points() {
        if g.is_cell(i) {
            let v = (u.values()[i] - spec.psi.values()[i]).min(r.values()[i]);
            worst = worst.max(v.abs());
        }
    }
    Ok(worst)
}

/// `ψ_ε = (ψ^m + ε^m)^{1/m}`. The result is positive everywhere, so the
/// compact-support rule is waived and the boundary data of the obstacle
/// problem become `ψ_ε` there.
pub fn smooth_obstacle_eps<T: Real>(spec: &ObstacleSpec<T>, eps: T) -> Result<ObstacleSpec<T>> {
    if !(eps > T::zero() && eps <= T::one()) {
        return Err(Error::Inadmissible(format!(
            "eps = {eps} must lie in (0, 1]"
        )));
    }
    let m = spec.m;
    let em = eps.powf(m);
    let psi = spec
        .psi
        .map("psi_eps", |p| (p.powf(m) + em).powf(T::one() / m));
    ObstacleSpec::build(psi, m, true)
}

/// Minimum number of smoothing passes in `increasing_obstacle_sequence`.
pub const SMOOTHING_PASSES: usize = 3;

/// Obstacles `φ_j = f_j²`, `j = 1..=count`, with `f_j` a smoothed function in the
/// band `h_j <= f_j <= h_{j+1}`, `h_j = (√ψ - 1/√j)_+`. Smoothing is repeated
/// 3-point averaging along each axis, clamped back into the band after each pass.
pub fn increasing_obstacle_sequence<T: Real>(
    psi: &Field<T>,
    m: T,
    count: usize,
) -> Result<Vec<ObstacleSpec<T>>> {
    ObstacleSpec::new(psi.clone(), m)?;
    let g = *psi.grid();
    let root: Vec<T> = psi.values().iter().map(|v| v.sqrt()).collect();
    let band = |j: usize| -> Vec<T> {
        let c = T::one() / T::of_usize(j).sqrt();
        root.iter().map(|&r| (r - c).max(T::zero())).collect()
    };
    let mut out = Vec::with_capacity(count);
    for j in 1..=count {
        let lo = band(j);
        let hi = band(j + 1);
        let bad = lo.iter().zip(&hi).filter(|(l, h)| *l > *h).count();
        if bad > 0 {
            return Err(Error::EmptyBand { j, count: bad });
        }
        let mut f: Vec<T> = lo
            .iter()
            .zip(&hi)
            .map(|(&l, &h)| (l + h) / T::of(2.0))
            .collect();
        for _ in 0..SMOOTHING_PASSES {
            for axis in 0..g.dim() + 1 {
                f = average_along(&g, &f, axis);
                for i in 0..f.len() {
                    f[i] = f[i].max(lo[i]).min(hi[i]);
                }
            }
        }
        let phi = Field::from_values(g, f.iter().map(|&v| v * v).collect(), format!("phi_{j}"))?;
        out.push(ObstacleSpec::new(phi, m)?);
    }
    Ok(out)
}

/// 3-point average along one axis (0 = x, 1 = y in 2-D, last = time) at nodes
/// with both neighbours; other nodes keep their value.
fn average_along<T: Real>(g: &Grid<T>, f: &[T], axis: usize) -> Vec<T> {
    let (px, py) = g.nodes_per_axis();
    let nn = g.n_nodes();
    let third = T::one() / T::of(3.0);
    let mut out = f.to_vec();
    for i in 0..f.len() {
        let [n, ix, iy] = g.lattice(i);
        let (a, b) = if axis == g.dim() {
            if n == 0 || n + 1 >= g.nt() {
                continue;
            }
            (i - nn, i + nn)
        } else if axis == 0 {
            if ix == 0 || ix + 1 >= px {
                continue;
            }
            (i - 1, i + 1)
        } else {
            if iy == 0 || iy + 1 >= py {
                continue;
            }
            (i - px, i + px)
        };
        out[i] = (f[a] + f[i] + f[b]) * third;
    }
    out
}

/// Obstacle solutions `w_j` for the increasing family and the checks made on them.
#[derive(Debug, Clone)]
pub struct ReduiteSequence<T> {
    pub solutions: Vec<Field<T>>,
    /// `‖w_{j+1} - w_j‖_∞` for consecutive members.
    pub increments: Vec<T>,
    /// Largest `w_j - w_{j+1}` seen (negative or tiny when the sequence increases).
    pub worst_decrease: T,
}

/// Solves the obstacle problem for each member of the increasing family with the
/// penalized backend and checks `w_j <= w_{j+1} + 1e-8 scale`.
pub fn reduite_sequence<T: Real>(psi: &Field<T>, m: T, count: usize) -> Result<ReduiteSequence<T>> {
    let specs = increasing_obstacle_sequence(psi, m, count)?;
    let deltas = default_deltas::<T>();
    let solutions: Vec<Field<T>> = specs
        .par_iter()
        .map(|s| solve_penalized(s, &deltas).map(|sol| sol.u))
        .collect::<Result<_>>()?;
    let scale = T::one().max(psi.max_value());
    let tol = T::of(1e-8) * scale;
    let mut increments = Vec::new();
    let mut worst = T::neg_infinity();
    for w in solutions.windows(2) {
        increments.push(w[1].max_abs_diff(&w[0]));
        if let Some((excess, index)) = w[0].max_excess(&w[1], None) {
            worst = worst.max(excess);
            if excess > tol {
                return Err(Error::Monotonicity {
                    op: "reduite_via_increasing_obstacles",
                    violation: excess.f64(),
                    tolerance: tol.f64(),
                    index,
                });
            }
        }
    }
    Ok(ReduiteSequence {
        solutions,
        increments,
        worst_decrease: worst,
    })
}

/// Réduite approximation: the last member of `reduite_sequence`.
pub fn reduite_via_increasing_obstacles<T: Real>(
    psi: &Field<T>,
    m: T,
    count: usize,
) -> Result<Field<T>> {
    let mut seq = reduite_sequence(psi, m, count)?;
    let mut w = seq
        .solutions
        .pop()
        .unwrap_or_else(|| Field::zeros(*psi.grid(), "reduite"));
    w.set_name("reduite");
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::extract_riesz;

    fn hat(g: &Grid<f64>, height: f64) -> Field<f64> {
        Field::from_fn(*g, "psi", |x, t| {
            if t <= 0.0 {
                return 0.0;
            }
            (height * (1.0 - (x[0] - 0.5).abs() / 0.25)).max(0.0)
        })
    }

    #[test]
    fn rejects_inadmissible() {
        let g = Grid::<f64>::new_1d(8, 1.0, 6, 0.05).unwrap();
        assert!(ObstacleSpec::new(Field::constant(g, 0.3, "c"), 2.0).is_err());
        assert!(ObstacleSpec::new(Field::constant(g, -0.0, "c"), 2.0).is_ok());
        let mut neg = Field::zeros(g, "n");
        neg.set(2, 4, -0.1);
        assert!(ObstacleSpec::new(neg, 2.0).is_err());
    }

    #[test]
    fn zero_obstacle_gives_zero() {
        let g = Grid::<f64>::new_1d(8, 1.0, 6, 0.05).unwrap();
        let spec = ObstacleSpec::new(Field::zeros(g, "psi"), 2.0).unwrap();
        assert!(
            solve_penalized(&spec, &default_deltas())
                .unwrap()
                .u
                .sup_norm()
                == 0.0
        );
        assert!(solve_projected(&spec).unwrap().u.sup_norm() == 0.0);
    }

    #[test]
    fn tiny_backends_agree() {
        let g = Grid::<f64>::new_1d(8, 1.0, 6, 0.05).unwrap();
        let spec = ObstacleSpec::new(hat(&g, 0.8), 2.0).unwrap();
        let pen = solve_penalized(&spec, &default_deltas()).unwrap();
        let proj = solve_projected(&spec).unwrap();
        assert!(pen.u.max_abs_diff(&proj.u) <= 5e-4);
        assert!(complementarity_residual(&spec, &proj.u).unwrap() <= 1e-9);
        for i in 0..g.n_points() {
            assert!(pen.u.values()[i] >= spec.psi().values()[i] - spec.contact_tol());
        }
        let mu = extract_riesz(&pen.u, 2.0).unwrap();
        assert!(mu.min_weight().is_none_or(|(w, _)| w >= -1e-8));
    }

    #[test]
    fn smoothing_formula() {
        let g = Grid::<f64>::new_1d(8, 1.0, 4, 0.05).unwrap();
        let zero = ObstacleSpec::new(Field::zeros(g, "psi"), 2.0).unwrap();
        let s = smooth_obstacle_eps(&zero, 0.3).unwrap();
        assert!(s.positive_everywhere());
        assert!(s.psi().values().iter().all(|v| (v - 0.3).abs() < 1e-15));
        let mut psi = Field::zeros(g, "psi");
        psi.set(2, 4, 3.0);
        let spec = ObstacleSpec::new(psi, 2.0).unwrap();
        assert!(smooth_obstacle_eps(&spec, 1.5).is_err());
        let s = smooth_obstacle_eps(&spec, 1.0).unwrap();
        assert!((s.psi().at(2, 4) - 10f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn three_four_five() {
        // ε > 1 is outside the accepted range, so scale: ψ = 0.3, ε = 0.4 → 0.5.
        let g = Grid::<f64>::new_1d(8, 1.0, 4, 0.05).unwrap();
        let mut psi = Field::zeros(g, "psi");
        psi.set(2, 4, 0.3);
        let spec = ObstacleSpec::new(psi, 2.0).unwrap();
        let s = smooth_obstacle_eps(&spec, 0.4).unwrap();
        assert!((s.psi().at(2, 4) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn plateau_band() {
        let g = Grid::<f64>::new_1d(32, 1.0, 12, 0.05).unwrap();
        let psi = Field::from_fn(g, "psi", |x, t| {
            if t > 0.0 && (0.25..=0.75).contains(&x[0]) {
                1.0
            } else {
                0.0
            }
        });
        let seq = increasing_obstacle_sequence(&psi, 2.0, 6).unwrap();
        let j = 4;
        let phi = seq[j - 1].psi();
        let lo = (1.0 - 1.0 / (j as f64).sqrt()).powi(2);
        let hi = (1.0 - 1.0 / (j as f64 + 1.0).sqrt()).powi(2);
        let v = phi.at(6, g.node_at(16, 0));
        assert!(
            v >= lo - 1e-15 && v <= hi + 1e-15,
            "{v} not in [{lo}, {hi}]"
        );
        assert!((lo - 0.25).abs() < 1e-15);
    }
}
