//! Backward-Euler time stepping for `u_t - Δ(u^m) = S` with Dirichlet data.
//!
//! Each level solves `U - dt Δ_h(U^m) = u_prev + dt S` on the free nodes by damped
//! Newton iteration in `U`. The Jacobian `I - dt Δ_h diag(m (U + δ_reg)^{m-1})` is
//! right-scaled by `diag(D)^{-1}` into the symmetric positive definite matrix
//! `diag(D)^{-1} - dt Δ_h`, which is solved directly (1-D) or by CG (2-D).
//!
//! The same level solver carries the penalty term of the penalized obstacle
//! problem and the active-set rows of the projected obstacle problem.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::grid::{laplacian_node, CompactSet, Field, Grid, SpaceTimeUnion};
use crate::linalg::solve_spd;
use crate::measure::DiscreteMeasure;
use crate::{Error, Real, Result};

/// Newton controls shared by every level solve.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions<T> {
    /// Residual tolerance relative to `max(1, ‖u_prev‖_∞)`.
    pub rel_tol: T,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl<T: Real> Default for NewtonOptions<T> {
    fn default() -> Self {
        Self {
            rel_tol: T::of(1e-10),
            max_iter: 50,
            max_halvings: 30,
        }
    }
}

/// Default Jacobian regularization `δ_reg`.
pub const DEFAULT_REG_FLOOR: f64 = 1e-10;

/// A Cauchy–Dirichlet problem for the PME on a grid.
#[derive(Debug, Clone)]
pub struct PmeProblem<T> {
    grid: Grid<T>,
    m: T,
    /// Level 0 holds the initial data; boundary nodes of later levels hold the
    /// lateral data. Interior values of later levels are ignored.
    data: Field<T>,
    /// Source rate `S` per space-time node (only cells are used).
    source: Option<Vec<T>>,
    reg_floor: T,
    newton: NewtonOptions<T>,
}

impl<T: Real> PmeProblem<T> {
    /// Zero initial and lateral data, no source.
    pub fn new(grid: Grid<T>, m: T) -> Result<Self> {
        if !(m > T::one()) || !m.is_finite() {
            return Err(Error::InvalidProblem(format!(
                "exponent m = {m} must exceed 1"
            )));
        }
        Ok(Self {
            grid,
            m,
            data: Field::zeros(grid, "data"),
            source: None,
            reg_floor: T::of(DEFAULT_REG_FLOOR),
            newton: NewtonOptions::default(),
        })
    }

    pub fn with_initial(mut self, f: impl Fn([T; 2]) -> T) -> Result<Self> {
        let g = self.grid;
        for j in 0..g.n_nodes() {
            self.data.set(0, j, f(g.coords(j)));
        }
        self.validated()
    }

    pub fn with_lateral(mut self, f: impl Fn([T; 2], T) -> T) -> Result<Self> {
        let g = self.grid;
        for n in 1..g.nt() {
            for j in (0..g.n_nodes()).filter(|&j| g.is_boundary_node(j)) {
                self.data.set(n, j, f(g.coords(j), g.time(n)));
            }
        }
        self.validated()
    }

    /// Takes initial data from level 0 and lateral data from the boundary nodes of `data`.
    pub fn with_data(mut self, data: &Field<T>) -> Result<Self> {
        self.grid
            .ensure_same(data.grid(), "PmeProblem::with_data")?;
        self.data = data.clone();
        self.data.set_name("data");
        self.validated()
    }

    /// Source rate `S` per space-time node.
    pub fn with_source_rate(mut self, rate: &Field<T>) -> Result<Self> {
        self.grid
            .ensure_same(rate.grid(), "PmeProblem::with_source_rate")?;
        if !rate.is_finite() {
            return Err(Error::InvalidProblem("source rate is not finite".into()));
        }
        self.source = Some(rate.values().to_vec());
        Ok(self)
    }

    /// Measure source: `S = μ(cell) / (h^d dt)`. Negative weights are rejected.
    pub fn with_source_measure(mut self, mu: &DiscreteMeasure<T>) -> Result<Self> {
        self.grid
            .ensure_same(mu.grid(), "PmeProblem::with_source_measure")?;
        mu.ensure_nonnegative("solve_measure_data")?;
        let vol = self.grid.cell_area() * self.grid.dt();
        self.source = Some(
            mu.weights()
                .iter()
                .map(|&w| w.max(T::zero()) / vol)
                .collect(),
        );
        Ok(self)
    }

    pub fn with_reg_floor(mut self, reg: T) -> Result<Self> {
        self.reg_floor = reg;
        self.validated()
    }

    pub fn with_newton(mut self, newton: NewtonOptions<T>) -> Self {
        self.newton = newton;
        self
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }
    pub fn m(&self) -> T {
        self.m
    }
    pub fn data(&self) -> &Field<T> {
        &self.data
    }
    pub fn reg_floor(&self) -> T {
        self.reg_floor
    }
    pub fn newton(&self) -> NewtonOptions<T> {
        self.newton
    }

    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if !(self.reg_floor > T::zero() && self.reg_floor <= T::of(1e-6)) {
            return Err(Error::InvalidProblem(format!(
                "reg_floor = {} must lie in (0, 1e-6]",
                self.reg_floor
            )));
        }
        for n in 0..g.nt() {
            for j in 0..g.n_nodes() {
                if n == 0 || g.is_boundary_node(j) {
                    let v = self.data.at(n, j);
                    if !v.is_finite() || v < T::zero() {
                        return Err(Error::InvalidProblem(format!(
                            "initial/lateral value {v} at level {n}, node {j} must be finite and >= 0"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn forcing_level(&self, level: usize) -> Option<Vec<T>> {
        self.source.as_ref().map(|s| {
            let nn = self.grid.n_nodes();
            let dt = self.grid.dt();
            s[level * nn..(level + 1) * nn]
                .iter()
                .map(|&r| r * dt)
                .collect()
        })
    }
}

/// Per-solve diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub newton_iterations: Vec<usize>,
    pub max_residual: Vec<f64>,
    pub converged: bool,
    pub wall_time: f64,
    /// Largest negative excursion removed by the final clamp to `U >= 0`.
    pub max_clamp: f64,
    /// Levels whose residual stalled at roundoff above the Newton tolerance.
    pub roundoff_limited_steps: usize,
}

impl SolverReport {
    pub(crate) fn push<T: Real>(&mut self, stats: &StepStats<T>) {
        self.roundoff_limited_steps += stats.roundoff_limited as usize;
        self.newton_iterations.push(stats.iterations);
        self.max_residual.push(stats.residual.f64());
        self.max_clamp = self.max_clamp.max(stats.clamp.f64());
    }

    pub(crate) fn merge(&mut self, other: &SolverReport) {
        self.newton_iterations.extend(&other.newton_iterations);
        self.max_residual.extend(&other.max_residual);
        self.converged &= other.converged;
        self.wall_time += other.wall_time;
        self.max_clamp = self.max_clamp.max(other.max_clamp);
        self.roundoff_limited_steps += other.roundoff_limited_steps;
    }
}

/// Diagnostics of one level solve.
#[derive(Debug, Clone, Copy)]
pub struct StepStats<T> {
    pub iterations: usize,
    pub residual: T,
    pub tolerance: T,
    pub clamp: T,
    /// Newton stopped above `tolerance` because its step fell below roundoff.
    pub roundoff_limited: bool,
    /// Nonlinear Gauss–Seidel sweeps used to move Newton off a kink.
    pub relaxation_sweeps: usize,
}

/// Signed power `|u|^{m-1} u`, the monotone extension of `u^m` to `u < 0`.
#[inline]
pub(crate) fn spow<T: Real>(u: T, m: T) -> T {
    if u >= T::zero() {
        u.powf(m)
    } else {
        -(-u).powf(m)
    }
}

/// `η_δ(s)`: 0 for `s <= -δ`, 1 for `s >= 0`, linear in between.
#[inline]
pub(crate) fn eta<T: Real>(s: T, delta: T) -> T {
    if s >= T::zero() {
        T::one()
    } else if s <= -delta {
        T::zero()
    } else {
        T::one() + s / delta
    }
}

#[inline]
fn eta_slope<T: Real>(s: T, delta: T) -> T {
    if s < T::zero() && s > -delta {
        T::one() / delta
    } else {
        T::zero()
    }
}

/// Penalty `dt η_δ(ψ^m - U^m) Ψ_+` of the penalized obstacle problem at one level.
pub(crate) struct Penalty<'a, T> {
    pub psi_pow: &'a [T],
    pub rate: &'a [T],
    pub delta: T,
}

/// One implicit level: unknowns are the `free` nodes of `u`, all other entries of
/// `u` are Dirichlet values.
pub(crate) struct LevelSystem<'a, T> {
    pub grid: &'a Grid<T>,
    pub m: T,
    pub prev: &'a [T],
    pub forcing: Option<&'a [T]>,
    pub free: &'a [bool],
    pub penalty: Option<Penalty<'a, T>>,
    /// Projected complementarity `min(U - ψ, F(U)) = 0` against this obstacle.
    pub obstacle: Option<&'a [T]>,
    pub reg: T,
}

pub(crate) enum LevelFailure<T> {
    Newton { iterations: usize, residual: T },
    Linear(String),
}

impl<'a, T: Real> LevelSystem<'a, T> {
    fn coef(&self) -> T {
        self.grid.dt() / (self.grid.h() * self.grid.h())
    }

    /// `F(U)` on free nodes (zero elsewhere), in units of `u`.
    pub fn residual(&self, u: &[T], out: &mut [T]) {
        let g = self.grid;
        let pw: Vec<T> = u.iter().map(|&v| spow(v, self.m)).collect();
        let dt = g.dt();
        for i in 0..u.len() {
            if !self.free[i] {
                out[i] = T::zero();
                continue;
            }
            let lap = laplacian_node(g, &pw, i);
            let mut r = u[i] - dt * lap - self.prev[i];
            if let Some(f) = self.forcing {
                r = r - f[i];
            }
            if let Some(p) = &self.penalty {
                r = r - dt * eta(p.psi_pow[i] - pw[i], p.delta) * p.rate[i];
            }
            out[i] = r;
        }
    }

    /// Derivative of the penalty term with respect to `U_i`, in units of `u`.
    fn penalty_slope(&self, i: usize, ui: T, d: T) -> T {
        match &self.penalty {
            Some(pen) => {
                let s = pen.psi_pow[i] - spow(ui, self.m);
                self.grid.dt() * eta_slope(s, pen.delta) * d * pen.rate[i]
            }
            None => T::zero(),
        }
    }

    fn jacobian_scale(&self, ui: T) -> T {
        self.m * (ui.abs() + self.reg).powf(self.m - T::one())
    }

    /// Sup norm of the residual. Penalized rows are divided by `1 + p_i`, the
    /// penalty's share of the Jacobian diagonal: inside the band of `η_δ` the raw
    /// residual is amplified by `O(dt Ψ_+ / δ)` and carries roundoff of that size.
    fn merit(&self, u: &[T], f: &[T]) -> T {
        let mut worst = T::zero();
        for i in 0..u.len() {
            if !self.free[i] {
                continue;
            }
            let v = match self.obstacle {
                Some(psi) => (u[i] - psi[i]).min(f[i]),
                None if self.penalty.is_some() => {
                    f[i] / (T::one() + self.penalty_slope(i, u[i], self.jacobian_scale(u[i])))
                }
                None => f[i],
            };
            worst = worst.max(v.abs());
        }
        worst
    }

    /// Right-hand side with no unknowns: the minimum of `u_prev + dt S` over free nodes.
    fn min_data(&self) -> T {
        let mut lo = T::infinity();
        for i in 0..self.prev.len() {
            if self.free[i] {
                let b = self.prev[i] + self.forcing.map_or(T::zero(), |f| f[i]);
                lo = lo.min(b);
            }
        }
        lo
    }

    fn newton_direction(&self, u: &[T], f: &[T]) -> std::result::Result<Vec<T>, LevelFailure<T>> {
        let g = self.grid;
        let n = u.len();
        let m = self.m;
        let coef = self.coef();
        let tiny = T::min_positive_value().sqrt();
        let d: Vec<T> = u
            .iter()
            .map(|&v| (m * (v.abs() + self.reg).powf(m - T::one())).max(tiny))
            .collect();
        let mut active = vec![false; n];
        let mut step = vec![T::zero(); n];
        if let Some(psi) = self.obstacle {
            for i in 0..n {
                if self.free[i] && u[i] - psi[i] <= f[i] {
                    active[i] = true;
                    step[i] = psi[i] - u[i];
                }
            }
        }
        let inactive: Vec<bool> = (0..n).map(|i| self.free[i] && !active[i]).collect();
        let mut diag = vec![T::one(); n];
        let mut rhs = vec![T::zero(); n];
        for i in 0..n {
            if !inactive[i] {
                continue;
            }
            let p = self.penalty_slope(i, u[i], d[i]);
            diag[i] = (T::one() + p) / d[i];
            let mut r = -f[i];
            for j in g.neighbors(i) {
                if active[j] {
                    r = r + coef * d[j] * step[j];
                }
            }
            rhs[i] = r;
        }
        let y =
            solve_spd(g, &inactive, &diag, coef, &rhs).map_err(|e| LevelFailure::Linear(e.0))?;
        for i in 0..n {
            if inactive[i] {
                step[i] = y[i] / d[i];
            }
        }
        Ok(step)
    }

    /// Damped Newton from the initial guess in `u`; free entries are overwritten.
    pub fn solve(
        &self,
        u: &mut [T],
        opts: &NewtonOptions<T>,
        max_iter: usize,
    ) -> std::result::Result<StepStats<T>, LevelFailure<T>> {
        let n = u.len();
        let scale = T::one().max(self.prev.iter().fold(T::zero(), |a, v| a.max(v.abs())));
        let tol = opts.rel_tol.max(T::tol_floor()) * scale;
        let polish_floor = T::epsilon() * T::of(16.0) * scale;
        for i in 0..n {
            if self.free[i] && u[i] < T::zero() {
                u[i] = T::zero();
            }
        }
        let mut f = vec![T::zero(); n];
        self.residual(u, &mut f);
        let mut merit = self.merit(u, &f);
        let mut iterations = 0;
        let mut polish = 0;
        let mut roundoff_limited = false;
        let mut relax_rounds = 0;
        let mut sweeps = 0;
        let mut trial = vec![T::zero(); n];
        let mut f_trial = vec![T::zero(); n];
        loop {
            if merit <= tol {
                if polish >= 2 || merit <= polish_floor {
                    break;
                }
                polish += 1;
            } else if iterations >= max_iter {
                return Err(LevelFailure::Newton {
                    iterations,
                    residual: merit,
                });
            }
            let step = self.newton_direction(u, &f)?;
            iterations += 1;
            let mut lambda = T::one();
            let mut accepted = false;
            for _ in 0..=opts.max_halvings {
                for i in 0..n {
                    trial[i] = if self.free[i] {
                        (u[i] + lambda * step[i]).max(T::zero())
                    } else {
                        u[i]
                    };
                }
                self.residual(&trial, &mut f_trial);
                let m_trial = self.merit(&trial, &f_trial);
                let enough = m_trial <= (T::one() - T::of(1e-4) * lambda) * merit;
                if enough || (merit > tol && m_trial <= tol) {
                    u.copy_from_slice(&trial);
                    std::mem::swap(&mut f, &mut f_trial);
                    merit = m_trial;
                    accepted = true;
                    break;
                }
                lambda = lambda / T::of(2.0);
            }
            let creeping = !accepted || lambda < T::of(RELAX_TRIGGER);
            if creeping && merit > tol && relax_rounds < MAX_RELAX_ROUNDS {
                relax_rounds += 1;
                for _ in 0..RELAX_SWEEPS {
                    self.relax_sweep(u);
                }
                sweeps += RELAX_SWEEPS;
                self.residual(u, &mut f);
                merit = self.merit(u, &f);
                continue;
            }
            if !accepted {
                if merit <= tol {
                    break;
                }
                // A Newton step below roundoff cannot reduce the residual further:
                // the residual is as small as the arithmetic allows.
                let u_scale = T::one().max(u.iter().fold(T::zero(), |a, v| a.max(v.abs())));
                let step_max = (0..n)
                    .filter(|&i| self.free[i])
                    .fold(T::zero(), |a, i| a.max(step[i].abs()));
                if step_max <= T::of(64.0) * T::epsilon() * u_scale {
                    roundoff_limited = true;
                    break;
                }
                return Err(LevelFailure::Newton {
                    iterations,
                    residual: merit,
                });
            }
        }
        let mut clamp = T::zero();
        for v in u.iter_mut() {
            if *v < T::zero() {
                clamp = clamp.max(-*v);
                *v = T::zero();
            }
        }
        Ok(StepStats {
            iterations,
            residual: merit,
            tolerance: tol,
            clamp,
            roundoff_limited,
            relaxation_sweeps: sweeps,
        })
    }

    /// Residual of row `i` as a function of `U_i` alone.
    fn row_residual(&self, i: usize, x: T, neighbours: T) -> T {
        let g = self.grid;
        let coef = self.coef();
        let deg = T::of_usize(2 * g.dim());
        let w = spow(x, self.m);
        let mut r = x + coef * deg * w - coef * neighbours - self.prev[i];
        if let Some(f) = self.forcing {
            r = r - f[i];
        }
        if let Some(p) = &self.penalty {
            r = r - g.dt() * eta(p.psi_pow[i] - w, p.delta) * p.rate[i];
        }
        r
    }

    /// One nonlinear Gauss–Seidel sweep: each free node solves its own row
    /// (strictly increasing in `U_i`) by bisection, then is projected onto the
    /// obstacle if there is one.
    fn relax_sweep(&self, u: &mut [T]) {
        for i in 0..u.len() {
            if !self.free[i] {
                continue;
            }
            let nb = self
                .grid
                .neighbors(i)
                .fold(T::zero(), |a, j| a + spow(u[j], self.m));
            let mut x = if self.row_residual(i, T::zero(), nb) >= T::zero() {
                T::zero()
            } else {
                let mut lo = T::zero();
                let mut hi = T::one().max(u[i]);
                while self.row_residual(i, hi, nb) < T::zero() {
                    lo = hi;
                    hi = hi * T::of(2.0);
                }
                for _ in 0..200 {
                    let mid = (lo + hi) / T::of(2.0);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if self.row_residual(i, mid, nb) < T::zero() {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                (lo + hi) / T::of(2.0)
            };
            if let Some(psi) = self.obstacle {
                x = x.max(psi[i]);
            }
            u[i] = x;
        }
    }
}

/// Damping factor below which Newton is considered stuck at a kink.
const RELAX_TRIGGER: f64 = 1.0 / 1024.0;
const RELAX_SWEEPS: usize = 50;
const MAX_RELAX_ROUNDS: usize = 40;

pub(crate) fn level_error<T: Real>(op: &'static str, level: usize, e: LevelFailure<T>) -> Error {
    match e {
        LevelFailure::Newton {
            iterations,
            residual,
        } => Error::NewtonFailure {
            op,
            level,
            iterations,
            residual: residual.f64(),
        },
        LevelFailure::Linear(reason) => Error::LinearSolve { op, level, reason },
    }
}

fn interior_free<T: Real>(grid: &Grid<T>) -> Vec<bool> {
    (0..grid.n_nodes())
        .map(|j| !grid.is_boundary_node(j))
        .collect()
}

/// One backward-Euler step from `u_prev` (all spatial nodes, level `level - 1`)
/// to level `level`. Boundary values come from the problem's lateral data.
pub fn step_implicit<T: Real>(
    u_prev: &[T],
    problem: &PmeProblem<T>,
    level: usize,
) -> Result<(Vec<T>, StepStats<T>)> {
    let g = problem.grid;
    if level == 0 || level >= g.nt() {
        return Err(Error::LevelOutOfRange {
            op: "step_implicit",
            level,
            nt: g.nt(),
        });
    }
    if u_prev.len() != g.n_nodes() {
        return Err(Error::InvalidProblem(format!(
            "u_prev has {} values, expected {}",
            u_prev.len(),
            g.n_nodes()
        )));
    }
    if let Some((j, &v)) = u_prev.iter().enumerate().find(|(_, v)| !(**v >= T::zero())) {
        return Err(Error::InvalidProblem(format!(
            "u_prev[{j}] = {v} is negative"
        )));
    }
    let free = interior_free(&g);
    let forcing = problem.forcing_level(level);
    let sys = LevelSystem {
        grid: &g,
        m: problem.m,
        prev: u_prev,
        forcing: forcing.as_deref(),
        free: &free,
        penalty: None,
        obstacle: None,
        reg: problem.reg_floor,
    };
    let scale = T::one().max(u_prev.iter().fold(T::zero(), |a, v| a.max(*v)));
    let min_rhs = sys.min_data();
    if min_rhs < -problem.newton.rel_tol.max(T::tol_floor()) * scale {
        return Err(Error::InfeasibleSource {
            level,
            min_rhs: min_rhs.f64(),
        });
    }
    let mut u: Vec<T> = (0..g.n_nodes())
        .map(|j| {
            if free[j] {
                u_prev[j]
            } else {
                problem.data.at(level, j)
            }
        })
        .collect();
    let stats = sys
        .solve(&mut u, &problem.newton, problem.newton.max_iter)
        .map_err(|e| level_error("step_implicit", level, e))?;
    Ok((u, stats))
}

/// Marches all levels from the initial data.
pub fn solve_cauchy_dirichlet<T: Real>(
    problem: &PmeProblem<T>,
) -> Result<(Field<T>, SolverReport)> {
    problem.validate()?;
    let start = Instant::now();
    let g = problem.grid;
    let mut field = Field::zeros(g, "u");
    field.level_mut(0).copy_from_slice(problem.data.level(0));
    let mut report = SolverReport {
        converged: true,
        ..Default::default()
    };
    for level in 1..g.nt() {
        let prev = field.level(level - 1).to_vec();
        let (next, stats) = step_implicit(&prev, problem, level)?;
        report.push(&stats);
        field.level_mut(level).copy_from_slice(&next);
    }
    report.wall_time = start.elapsed().as_secs_f64();
    field.set_nonnegative_flag(true);
    Ok((field, report))
}

/// Zero-data problem driven by a nonnegative discrete measure.
pub fn solve_measure_data<T: Real>(
    grid: &Grid<T>,
    m: T,
    mu: &DiscreteMeasure<T>,
) -> Result<Field<T>> {
    Ok(solve_measure_data_report(grid, m, mu)?.0)
}

pub fn solve_measure_data_report<T: Real>(
    grid: &Grid<T>,
    m: T,
    mu: &DiscreteMeasure<T>,
) -> Result<(Field<T>, SolverReport)> {
    let problem = PmeProblem::new(*grid, m)?.with_source_measure(mu)?;
    let (mut u, rep) = solve_cauchy_dirichlet(&problem)?;
    u.set_name("u_mu");
    Ok((u, rep))
}

/// Solves the PME in the interior of a union of boxes. Every node that is not
/// interior to the union keeps its value from `data`.
pub fn solve_in_union<T: Real>(
    union: &SpaceTimeUnion<T>,
    m: T,
    data: &Field<T>,
) -> Result<(Field<T>, SolverReport)> {
    let g = *union.grid();
    g.ensure_same(data.grid(), "solve_in_union")?;
    if !(m > T::one()) {
        return Err(Error::InvalidProblem(format!(
            "exponent m = {m} must exceed 1"
        )));
    }
    if data.min_value() < T::zero() || !data.is_finite() {
        return Err(Error::InvalidProblem(
            "boundary data must be finite and >= 0".into(),
        ));
    }
    let start = Instant::now();
    let interior = union.interior_mask();
    let nn = g.n_nodes();
    let mut u = data.clone();
    u.set_name("u");
    let mut report = SolverReport {
        converged: true,
        ..Default::default()
    };
    let opts = NewtonOptions::default();
    for level in 1..g.nt() {
        let free: Vec<bool> = interior[level * nn..(level + 1) * nn].to_vec();
        if !free.iter().any(|&b| b) {
            continue;
        }
        let prev = u.level(level - 1).to_vec();
        let sys = LevelSystem {
            grid: &g,
            m,
            prev: &prev,
            forcing: None,
            free: &free,
            penalty: None,
            obstacle: None,
            reg: T::of(DEFAULT_REG_FLOOR),
        };
        let mut cur = u.level(level).to_vec();
        for (c, (&f, &p)) in cur.iter_mut().zip(free.iter().zip(&prev)) {
            if f {
                *c = p;
            }
        }
        let stats = sys
            .solve(&mut cur, &opts, opts.max_iter)
            .map_err(|e| level_error("solve_in_union", level, e))?;
        report.push(&stats);
        u.level_mut(level).copy_from_slice(&cur);
    }
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((u, report))
}

/// Time after which `c (t - t_K)^{-1/(m-1)} <= tol`, i.e. `(c / tol)^{m-1}`.
pub fn decay_time<T: Real>(m: T, c: T, tol: T) -> T {
    if tol.is_infinite() {
        return T::zero();
    }
    (c / tol).powf(m - T::one())
}

/// First level at which the universal bound `c (t - t_K)^{-1/(m-1)}` drops to `tol`,
/// with `t_K` the time of the last level of `k`. `c` is the bound constant itself
/// (callers inflate an empirical constant before passing it in).
pub fn truncation_horizon<T: Real>(
    grid: &Grid<T>,
    m: T,
    k: &CompactSet<T>,
    tol: T,
    c: T,
) -> Result<usize> {
    grid.ensure_same(k.grid(), "truncation_horizon")?;
    if !(tol > T::zero()) || !(c > T::zero()) || !(m > T::one()) {
        return Err(Error::InvalidProblem(format!(
            "truncation_horizon needs tol > 0, c > 0, m > 1 (got {tol}, {c}, {m})"
        )));
    }
    let last = k.last_level().unwrap_or(0);
    let needed = last + horizon_levels(decay_time(m, c, tol), grid.dt());
    if needed > grid.nt() - 1 {
        return Err(Error::HorizonExceedsGrid {
            needed,
            available: grid.nt() - 1,
        });
    }
    Ok(needed)
}

/// Number of time steps covering a duration, at least one.
pub fn horizon_levels<T: Real>(duration: T, dt: T) -> usize {
    let steps = duration / dt;
    // ceil without tripping on representation error of exact multiples
    let steps = (steps - steps.abs() * T::of(1e-9)).ceil();
    steps.to_usize().unwrap_or(usize::MAX).max(1)
}

/// Discrete residual `u^n - u^{n-1} - dt Δ_h (u^n)^m` at every cell (zero elsewhere),
/// in units of `u`.
pub fn discrete_residual<T: Real>(u: &Field<T>, m: T) -> Field<T> {
    let g = *u.grid();
    let mut out = Field::zeros(g, "residual");
    let dt = g.dt();
    let interior = g.interior_nodes();
    for n in 1..g.nt() {
        let pw: Vec<T> = u.level(n).iter().map(|&v| spow(v, m)).collect();
        let prev = u.level(n - 1);
        let cur = u.level(n);
        let row = out.level_mut(n);
        for &j in &interior {
            row[j] = cur[j] - prev[j] - dt * laplacian_node(&g, &pw, j);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::Barenblatt;

    #[test]
    fn constants_are_preserved() {
        let g = Grid::<f64>::new_1d(16, 1.0, 6, 0.05).unwrap();
        let p = PmeProblem::new(g, 2.0)
            .unwrap()
            .with_initial(|_| 0.7)
            .unwrap()
            .with_lateral(|_, _| 0.7)
            .unwrap();
        let (u, rep) = solve_cauchy_dirichlet(&p).unwrap();
        assert!(rep.converged);
        assert!(u.values().iter().all(|v| (v - 0.7).abs() < 1e-13));
    }

    #[test]
    fn zero_stays_zero() {
        let g = Grid::<f64>::new_2d(6, 6, 1.0, 1.0, 4, 0.1).unwrap();
        let p = PmeProblem::new(g, 3.0).unwrap();
        let (u, _) = solve_cauchy_dirichlet(&p).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_invalid_problems() {
        let g = Grid::<f64>::new_1d(8, 1.0, 3, 0.1).unwrap();
        assert!(PmeProblem::new(g, 1.0).is_err());
        assert!(PmeProblem::new(g, 2.0)
            .unwrap()
            .with_initial(|_| -1.0)
            .is_err());
        assert!(PmeProblem::new(g, 2.0)
            .unwrap()
            .with_reg_floor(1e-3)
            .is_err());
        assert!(PmeProblem::new(g, 2.0)
            .unwrap()
            .with_reg_floor(0.0)
            .is_err());
    }

    #[test]
    fn negative_source_is_infeasible() {
        let g = Grid::<f64>::new_1d(8, 1.0, 3, 0.1).unwrap();
        let rate = Field::constant(g, -5.0, "s");
        let p = PmeProblem::new(g, 2.0)
            .unwrap()
            .with_source_rate(&rate)
            .unwrap();
        assert!(matches!(
            solve_cauchy_dirichlet(&p),
            Err(Error::InfeasibleSource { level: 1, .. })
        ));
    }

    #[test]
    fn step_level_out_of_range() {
        let g = Grid::<f64>::new_1d(8, 1.0, 3, 0.1).unwrap();
        let p = PmeProblem::new(g, 2.0).unwrap();
        assert!(step_implicit(&[0.0; 9], &p, 3).is_err());
        assert!(step_implicit(&[0.0; 9], &p, 0).is_err());
    }

    #[test]
    fn one_step_tracks_barenblatt() {
        // B(x - 0.5, 0.1) on (0, 1), support radius 0.2, one step of dt = 1e-4 at h = 1/400.
        let g = Grid::<f64>::new_1d(400, 1.0, 2, 1e-4).unwrap();
        let b = Barenblatt::<f64>::with_support_radius(2.0, 1, 0.2, [0.5, 0.0], 0.1).unwrap();
        let p = PmeProblem::new(g, 2.0)
            .unwrap()
            .with_initial(|x| b.eval(x, 0.0))
            .unwrap();
        let prev = p.data().level(0).to_vec();
        let (u, stats) = step_implicit(&prev, &p, 1).unwrap();
        assert!(stats.residual <= stats.tolerance);
        let peak = prev.iter().fold(0.0f64, |a, &v| a.max(v));
        let err = (0..g.n_nodes())
            .map(|j| (u[j] - b.eval(g.coords(j), g.dt())).abs())
            .fold(0.0, f64::max);
        assert!(err <= 5e-3 * peak, "error {err}, peak {peak}");
    }

    #[test]
    fn scheme_satisfies_maximum_principle_and_mass_decay() {
        let g = Grid::<f64>::new_1d(40, 1.0, 30, 0.01).unwrap();
        let p = PmeProblem::new(g, 2.0)
            .unwrap()
            .with_initial(|x| {
                if (0.3..0.6).contains(&x[0]) {
                    1.0 + x[0]
                } else {
                    0.0
                }
            })
            .unwrap();
        let (u, _) = solve_cauchy_dirichlet(&p).unwrap();
        let init_max = p.data().level(0).iter().fold(0.0f64, |a, &v| a.max(v));
        assert!(u.max_value() <= init_max + 1e-12);
        let mass = |n: usize| u.level(n).iter().sum::<f64>() * g.h();
        for n in 1..g.nt() {
            assert!(mass(n) <= mass(n - 1) + 1e-12);
        }
    }

    #[test]
    fn solves_in_2d() {
        let g = Grid::<f64>::new_2d(12, 12, 1.0, 1.0, 6, 0.02).unwrap();
        let p = PmeProblem::new(g, 2.0)
            .unwrap()
            .with_initial(|x| ((x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2) < 0.04) as u8 as f64)
            .unwrap();
        let (u, rep) = solve_cauchy_dirichlet(&p).unwrap();
        assert!(rep.converged);
        let res = discrete_residual(&u, 2.0);
        assert!(res.sup_norm() < 1e-10);
        // symmetry under x <-> y
        for n in 0..g.nt() {
            for iy in 0..=12 {
                for ix in 0..=12 {
                    let a = u.at(n, g.node_at(ix, iy));
                    let b = u.at(n, g.node_at(iy, ix));
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn single_precision_constant_solve() {
        let g = Grid::<f32>::new_1d(8, 1.0, 4, 0.1).unwrap();
        let p = PmeProblem::new(g, 2.0f32)
            .unwrap()
            .with_initial(|_| 0.5)
            .unwrap()
            .with_lateral(|_, _| 0.5)
            .unwrap();
        let (u, _) = solve_cauchy_dirichlet(&p).unwrap();
        assert!(u.values().iter().all(|v| (v - 0.5).abs() < 1e-5));
    }

    #[test]
    fn horizon_algebra() {
        let g = Grid::<f64>::new_1d(16, 1.0, 16, 0.1).unwrap();
        let k = CompactSet::from_lattice(g, [(5, 8, 0)]).unwrap();
        assert_eq!(
            truncation_horizon(&g, 2.0, &k, f64::INFINITY, 1.0).unwrap(),
            6
        );
        assert!((decay_time(2.0f64, 1.0, 0.01) - 100.0).abs() < 1e-9);
        assert!((decay_time(3.0f64, 1.0, 0.01) - 1e4).abs() < 1e-6);
        assert_eq!(horizon_levels(100.0, 0.1), 1000);
        assert_eq!(horizon_levels(1e4, 0.1), 100_000);
        match truncation_horizon(&g, 2.0, &k, 0.01, 1.0) {
            Err(Error::HorizonExceedsGrid { needed, available }) => {
                assert_eq!(needed, 1005);
                assert_eq!(available, 15);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
