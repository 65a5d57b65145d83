//! Reference objects: the Barenblatt source solution, calibration of the
//! universal decay bound, and the Caccioppoli energy inequality.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::grid::{Field, Grid};
use crate::solver::{solve_cauchy_dirichlet, spow, PmeProblem};
use crate::{Error, Real, Result};

/// Barenblatt profile
/// `B(x, t) = s^{-α} (C - k |x - x0|^2 s^{-2β})_+^{1/(m-1)}` with `s = t + τ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Barenblatt<T> {
    m: T,
    n: usize,
    c: T,
    center: [T; 2],
    tau: T,
    alpha: T,
    beta: T,
    k: T,
}

impl<T: Real> Barenblatt<T> {
    pub fn with_constant(m: T, n: usize, c: T, center: [T; 2], tau: T) -> Result<Self> {
        let op = "Barenblatt";
        if !(m > T::one()) || !(n == 1 || n == 2) {
            return Err(Error::Reference {
                op,
                reason: format!("need m > 1 and n in {{1, 2}} (got m = {m}, n = {n})"),
            });
        }
        if !(tau > T::zero()) || !(c > T::zero()) {
            return Err(Error::Reference {
                op,
                reason: format!("need tau > 0 and C > 0 (got tau = {tau}, C = {c})"),
            });
        }
        let nn = T::of_usize(n);
        let alpha = nn / (nn * (m - T::one()) + T::of(2.0));
        let beta = alpha / nn;
        let k = alpha * (m - T::one()) / (T::of(2.0) * m * nn);
        Ok(Self {
            m,
            n,
            c,
            center,
            tau,
            alpha,
            beta,
            k,
        })
    }

    /// Chooses `C` so that the spatial integral equals `mass`.
    pub fn from_mass(m: T, n: usize, mass: T, center: [T; 2], tau: T) -> Result<Self> {
        if !(mass > T::zero()) {
            return Err(Error::Reference {
                op: "Barenblatt::from_mass",
                reason: format!("mass must be positive (got {mass})"),
            });
        }
        let unit = Self::with_constant(m, n, T::one(), center, tau)?;
        let exponent = unit.power() + T::of_usize(n) / T::of(2.0);
        let c = (mass / unit.mass()).powf(T::one() / exponent);
        Self::with_constant(m, n, c, center, tau)
    }

    /// Chooses `C` so that the support at `t = 0` has the given radius.
    pub fn with_support_radius(m: T, n: usize, radius: T, center: [T; 2], tau: T) -> Result<Self> {
        let unit = Self::with_constant(m, n, T::one(), center, tau)?;
        let c = unit.k * radius * radius * tau.powf(-T::of(2.0) * unit.beta);
        Self::with_constant(m, n, c, center, tau)
    }

    fn power(&self) -> T {
        T::one() / (self.m - T::one())
    }

    pub fn m(&self) -> T {
        self.m
    }
    pub fn dim(&self) -> usize {
        self.n
    }
    pub fn constant(&self) -> T {
        self.c
    }
    pub fn center(&self) -> [T; 2] {
        self.center
    }
    pub fn tau(&self) -> T {
        self.tau
    }
    pub fn alpha(&self) -> T {
        self.alpha
    }
    pub fn beta(&self) -> T {
        self.beta
    }
    pub fn k(&self) -> T {
        self.k
    }

    /// Total mass `C^{p + n/2} k^{-n/2} π^{n/2} Γ(p+1) / Γ(p+1+n/2)`, `p = 1/(m-1)`.
    pub fn mass(&self) -> T {
        let p = self.power().f64();
        let half_n = self.n as f64 / 2.0;
        let log_ball =
            half_n * std::f64::consts::PI.ln() + ln_gamma(p + 1.0) - ln_gamma(p + 1.0 + half_n);
        let log_mass = (p + half_n) * self.c.f64().ln() - half_n * self.k.f64().ln() + log_ball;
        T::of(log_mass.exp())
    }

    /// Radius of the support at time `t`.
    pub fn support_radius(&self, t: T) -> T {
        let s = t + self.tau;
        (self.c / self.k).sqrt() * s.powf(self.beta)
    }

    pub fn eval(&self, x: [T; 2], t: T) -> T {
        let s = t + self.tau;
        let mut r2 = (x[0] - self.center[0]).powi(2);
        if self.n == 2 {
            r2 = r2 + (x[1] - self.center[1]).powi(2);
        }
        let inner = self.c - self.k * r2 * s.powf(-T::of(2.0) * self.beta);
        if inner <= T::zero() {
            return T::zero();
        }
        s.powf(-self.alpha) * inner.powf(self.power())
    }

    /// Samples the profile at every grid node, using grid times.
    pub fn field(&self, grid: &Grid<T>) -> Result<Field<T>> {
        if grid.dim() != self.n {
            return Err(Error::Reference {
                op: "Barenblatt::field",
                reason: format!(
                    "profile dimension {} differs from grid dimension {}",
                    self.n,
                    grid.dim()
                ),
            });
        }
        let mut f = Field::from_fn(*grid, "barenblatt", |x, t| self.eval(x, t));
        f.mark_nonnegative()?;
        Ok(f)
    }
}

pub fn barenblatt_eval<T: Real>(p: &Barenblatt<T>, x: [T; 2], t: T) -> T {
    p.eval(x, t)
}

/// Outcome of fitting the universal bound `u <= c (t - t0)^{-1/(m-1)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub m: f64,
    pub dim: usize,
    /// Largest `sup_x u (t - t0)^{1/(m-1)}` seen in any late-time window.
    pub c_emp: f64,
    /// Least-squares slope of `log sup u` against `log (t - t0)`, per run.
    pub exponents: Vec<Option<f64>>,
    /// Per-run constants.
    pub constants: Vec<f64>,
    /// First and last level of the window, per run.
    pub windows: Vec<(usize, usize)>,
}

impl Calibration {
    /// The constant consumed by truncation: twice the empirical value.
    pub fn inflated(&self) -> f64 {
        2.0 * self.c_emp
    }

    /// Expected late-time decay exponent `-1/(m-1)`.
    pub fn expected_exponent(&self) -> f64 {
        -1.0 / (self.m - 1.0)
    }
}

/// Window of levels used by the calibration: the last third, at least 10 levels.
pub fn calibration_window(nt: usize) -> Result<(usize, usize)> {
    let last = nt.saturating_sub(1);
    let len = nt / 3;
    if len < 10 {
        return Err(Error::Reference {
            op: "universal_calibrate",
            reason: format!("late-time window has {len} levels, need at least 10"),
        });
    }
    Ok((last + 1 - len, last))
}

/// Fits one computed solution. Returns `(constant, exponent, window)`.
pub fn calibrate_field<T: Real>(u: &Field<T>, m: T) -> Result<(f64, Option<f64>, (usize, usize))> {
    let g = u.grid();
    let (lo, hi) = calibration_window(g.nt())?;
    let p = 1.0 / (m.f64() - 1.0);
    let mut c = 0.0f64;
    let mut pts = Vec::new();
    for n in lo..=hi {
        let s = (g.time(n) - g.t0()).f64();
        let sup = u.level(n).iter().fold(0.0f64, |a, v| a.max(v.f64()));
        c = c.max(sup * s.powf(p));
        if sup > 0.0 {
            pts.push((s.ln(), sup.ln()));
        }
    }
    let exponent = if pts.len() >= 2 {
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    } else {
        None
    };
    Ok((c, exponent, (lo, hi)))
}

/// Solves source-free problems with zero lateral data for every pairing of grid
/// and initial datum and fits the universal bound on each.
pub fn universal_calibrate<T: Real>(
    grids: &[Grid<T>],
    m: T,
    initials: &[&(dyn Fn([T; 2]) -> T + Sync)],
) -> Result<Calibration> {
    let dim = grids.first().map_or(1, |g| g.dim());
    let mut out = Calibration {
        m: m.f64(),
        dim,
        c_emp: 0.0,
        exponents: Vec::new(),
        constants: Vec::new(),
        windows: Vec::new(),
    };
    for g in grids {
        calibration_window(g.nt())?;
        for init in initials {
            let problem = PmeProblem::new(*g, m)?.with_initial(init)?;
            let (u, _) = solve_cauchy_dirichlet(&problem)?;
            let (c, e, w) = calibrate_field(&u, m)?;
            out.c_emp = out.c_emp.max(c);
            out.constants.push(c);
            out.exponents.push(e);
            out.windows.push(w);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaccioppoliReport {
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Compares `ΣΣ η² |∇_h u^m|² h^d dt` with
/// `16 M^{2m} T Σ |∇_h η|² h^d + 6 M^{m+1} Σ η² h^d`.
///
/// Gradients are forward differences on grid edges; `η²` on an edge is the
/// average of its endpoint values. `eta` holds one value per spatial node.
pub fn caccioppoli_check<T: Real>(
    u: &Field<T>,
    m: T,
    bound: T,
    eta: &[T],
) -> Result<CaccioppoliReport> {
    let g = u.grid();
    let op = "caccioppoli_check";
    if eta.len() != g.n_nodes() {
        return Err(Error::Reference {
            op,
            reason: format!("cutoff has {} values, expected {}", eta.len(), g.n_nodes()),
        });
    }
    if eta.iter().any(|&e| !(e >= T::zero() && e <= T::one())) {
        return Err(Error::Reference {
            op,
            reason: "cutoff must take values in [0, 1]".into(),
        });
    }
    if eta
        .iter()
        .enumerate()
        .any(|(j, &e)| g.is_boundary_node(j) && e != T::zero())
    {
        return Err(Error::Reference {
            op,
            reason: "cutoff must vanish on the spatial boundary".into(),
        });
    }
    let sup = u.sup_norm();
    if sup > bound * (T::one() + T::of(1e-12)) {
        return Err(Error::Reference {
            op,
            reason: format!("sup |u| = {sup} exceeds M = {bound}"),
        });
    }
    let h = g.h().f64();
    let vol = g.cell_area().f64();
    let dt = g.dt().f64();
    let edges = spatial_edges(g);
    let eta: Vec<f64> = eta.iter().map(|e| e.f64()).collect();
    let mut lhs = 0.0;
    for n in 1..g.nt() {
        let w: Vec<f64> = u.level(n).iter().map(|&v| spow(v, m).f64()).collect();
        for &(a, b) in &edges {
            let grad = (w[b] - w[a]) / h;
            let e2 = 0.5 * (eta[a] * eta[a] + eta[b] * eta[b]);
            lhs += e2 * grad * grad * vol * dt;
        }
    }
    let grad_eta: f64 = edges
        .iter()
        .map(|&(a, b)| ((eta[b] - eta[a]) / h).powi(2))
        .sum::<f64>()
        * vol;
    let eta_sq: f64 = eta.iter().map(|e| e * e).sum::<f64>() * vol;
    let mm = bound.f64();
    let mexp = m.f64();
    let horizon = (g.final_time() - g.t0()).f64();
    let rhs = 16.0 * mm.powf(2.0 * mexp) * horizon * grad_eta + 6.0 * mm.powf(mexp + 1.0) * eta_sq;
    Ok(CaccioppoliReport {
        lhs,
        rhs,
        pass: lhs <= rhs,
    })
}

fn spatial_edges<T: Real>(g: &Grid<T>) -> Vec<(usize, usize)> {
    let (px, py) = g.nodes_per_axis();
    let mut edges = Vec::new();
    for iy in 0..py {
        for ix in 0..px {
            let a = g.node_at(ix, iy);
            if ix + 1 < px {
                edges.push((a, g.node_at(ix + 1, iy)));
            }
            if g.dim() == 2 && iy + 1 < py {
                edges.push((a, g.node_at(ix, iy + 1)));
            }
        }
    }
    edges
}

/// Smooth cutoff `cos²(π r / (2R))` for `r < R` around `center`, zero elsewhere.
pub fn bump_cutoff<T: Real>(grid: &Grid<T>, center: [T; 2], radius: T) -> Vec<T> {
    (0..grid.n_nodes())
        .map(|j| {
            if grid.is_boundary_node(j) {
                return T::zero();
            }
            let x = grid.coords(j);
            let mut r2 = (x[0] - center[0]).powi(2);
            if grid.dim() == 2 {
                r2 = r2 + (x[1] - center[1]).powi(2);
            }
            let r = r2.sqrt();
            if r >= radius {
                T::zero()
            } else {
                let c = (T::of(std::f64::consts::FRAC_PI_2) * r / radius).cos();
                c * c
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponents_match_definitions() {
        let b = Barenblatt::<f64>::with_constant(2.0, 1, 1.0, [0.0; 2], 1.0).unwrap();
        assert!((b.alpha() - 1.0 / 3.0).abs() < 1e-15);
        assert!((b.beta() - 1.0 / 3.0).abs() < 1e-15);
        assert!((b.k() - 1.0 / 12.0).abs() < 1e-15);
        let b = Barenblatt::<f64>::with_constant(3.0, 2, 1.0, [0.0; 2], 1.0).unwrap();
        assert!((b.alpha() - 1.0 / 3.0).abs() < 1e-15);
        assert!((b.beta() - 1.0 / 6.0).abs() < 1e-15);
        assert!((b.k() - 1.0 / 18.0).abs() < 1e-15);
        let b = Barenblatt::<f64>::with_support_radius(2.0, 1, 0.2, [0.5, 0.0], 0.1).unwrap();
        assert!((b.support_radius(0.0) - 0.2).abs() < 1e-14);
    }

    #[test]
    fn center_value_and_cutoff() {
        let b = Barenblatt::<f64>::with_constant(2.0, 1, 0.3, [0.5, 0.0], 0.2).unwrap();
        let t = 0.3;
        let expected = 0.3f64.powf(1.0) * (t + 0.2f64).powf(-1.0 / 3.0);
        assert!((b.eval([0.5, 0.0], t) - expected).abs() < 1e-14);
        let r = b.support_radius(t);
        assert_eq!(b.eval([0.5 + r * 1.0001, 0.0], t), 0.0);
        assert!(b.eval([0.5 + r * 0.999, 0.0], t) > 0.0);
    }

    #[test]
    fn mass_formula_matches_quadrature() {
        // m = 2, n = 1: p = 1, ∫(C - k y²)_+ dy = (4/3) C^{3/2} k^{-1/2}.
        let b = Barenblatt::<f64>::with_constant(2.0, 1, 0.7, [0.0; 2], 1.0).unwrap();
        let exact = 4.0 / 3.0 * 0.7f64.powf(1.5) / b.k().sqrt();
        assert!((b.mass() - exact).abs() < 1e-12 * exact);
        for (m, n) in [(2.0, 2), (3.0, 1), (1.5, 2)] {
            let b = Barenblatt::<f64>::from_mass(m, n, 0.25, [0.0; 2], 0.5).unwrap();
            let r = b.support_radius(0.0);
            let k = 1600;
            let h = 2.0 * r / k as f64;
            let mut q = 0.0;
            if n == 1 {
                for i in 0..k {
                    q += b.eval([-r + (i as f64 + 0.5) * h, 0.0], 0.0) * h;
                }
            } else {
                for i in 0..k {
                    for j in 0..k {
                        let x = [-r + (i as f64 + 0.5) * h, -r + (j as f64 + 0.5) * h];
                        q += b.eval(x, 0.0) * h * h;
                    }
                }
            }
            assert!((q - 0.25).abs() < 2e-3 * 0.25, "m={m} n={n} q={q}");
        }
    }

    #[test]
    fn grid_mass_is_conserved() {
        let g = Grid::<f64>::new_1d(400, 1.0, 40, 0.01).unwrap();
        let b = Barenblatt::<f64>::from_mass(2.0, 1, 0.02, [0.5, 0.0], 0.01).unwrap();
        assert!(b.support_radius(g.final_time()) < 0.5);
        let f = b.field(&g).unwrap();
        let m0: f64 = f.level(0).iter().sum::<f64>() * g.h();
        for n in 0..g.nt() {
            let mn: f64 = f.level(n).iter().sum::<f64>() * g.h();
            assert!((mn - m0).abs() < 1e-3 * m0);
        }
    }

    #[test]
    fn window_rules() {
        assert!(calibration_window(20).is_err());
        assert_eq!(calibration_window(30).unwrap(), (20, 29));
    }

    #[test]
    fn zero_data_calibrates_to_zero() {
        let g = Grid::<f64>::new_1d(16, 1.0, 30, 0.1).unwrap();
        let zero = |_: [f64; 2]| 0.0;
        let c = universal_calibrate(&[g], 2.0, &[&zero]).unwrap();
        assert_eq!(c.c_emp, 0.0);
        assert_eq!(c.exponents, vec![None]);
    }

    #[test]
    fn caccioppoli_trivial_cases() {
        let g = Grid::<f64>::new_1d(20, 1.0, 5, 0.1).unwrap();
        let eta = bump_cutoff(&g, [0.5, 0.0], 0.3);
        let u = Field::constant(g, 0.8, "u");
        let rep = caccioppoli_check(&u, 2.0, 1.0, &eta).unwrap();
        assert_eq!(rep.lhs, 0.0);
        assert!(rep.pass && rep.rhs > 0.0);
        assert!(caccioppoli_check(&u, 2.0, 0.5, &eta).is_err());
    }
}
