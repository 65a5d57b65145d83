//! Executable comparison principles and the bundled instance suites.
//!
//! Each check first tests the hypotheses of the statement it exercises. An
//! instance whose hypotheses fail is `Rejected`, never counted as a failure.

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capacity::balayage;
use crate::grid::{CompactSet, Field, Grid, SpaceTimeBox, SpaceTimeUnion};
use crate::measure::{dominates, extract_riesz, DiscreteMeasure};
use crate::reference::{bump_cutoff, caccioppoli_check, Barenblatt, CaccioppoliReport};
use crate::solver::{
    discrete_residual, solve_cauchy_dirichlet, solve_in_union, solve_measure_data, PmeProblem,
};
use crate::{Error, Real, Result};

/// Conclusion tolerance, relative to `max(1, ‖u‖∞, ‖v‖∞)`.
pub const COMP_TOL_REL: f64 = 1e-6;
/// Residual tolerance (units of `u`) for the solution/supersolution hypotheses.
pub const RESIDUAL_TOL_REL: f64 = 1e-8;
/// Cellwise tolerance of the scaling identity.
pub const SCALING_TOL_REL: f64 = 1e-9;
/// Relative tolerance of the measure round trip.
pub const ROUNDTRIP_TOL_REL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Cylinder,
    Punctured,
    UnionOfBoxes,
    MeasureDomination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub name: String,
    pub holds: bool,
    /// Worst value of the quantity the hypothesis bounds.
    pub worst: f64,
    /// The statement drops this hypothesis for the geometry at hand.
    pub waived: bool,
}

impl Hypothesis {
    fn new(name: &str, worst: f64, holds: bool) -> Self {
        Self {
            name: name.into(),
            holds,
            worst,
            waived: false,
        }
    }
}

/// Location and size of the largest `u - v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub magnitude: f64,
    pub index: usize,
    pub level: usize,
    pub ix: usize,
    pub iy: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub geometry: Geometry,
    pub verdict: Verdict,
    pub hypotheses: Vec<Hypothesis>,
    /// Largest `u - v` over the region of the conclusion (absent if hypotheses failed).
    pub worst: Option<Violation>,
    pub tol: f64,
    pub scale: f64,
}

impl ComparisonReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    /// First hypothesis that failed, if any.
    pub fn failed_hypothesis(&self) -> Option<&str> {
        self.hypotheses
            .iter()
            .find(|h| !h.holds && !h.waived)
            .map(|h| h.name.as_str())
    }
}

fn scale_of<T: Real>(u: &Field<T>, v: &Field<T>) -> f64 {
    1f64.max(u.sup_norm().f64()).max(v.sup_norm().f64())
}

fn violation<T: Real>(u: &Field<T>, v: &Field<T>, mask: &[bool]) -> Option<Violation> {
    let g = u.grid();
    u.max_excess(v, Some(mask)).map(|(d, index)| {
        let [level, ix, iy] = g.lattice(index);
        Violation {
            magnitude: d.f64(),
            index,
            level,
            ix,
            iy,
        }
    })
}

/// `max |r|` (`solution`) or `max(-r)` (`supersolution`) of the discrete residual over `mask`.
fn residual_defect<T: Real>(f: &Field<T>, m: T, mask: &[bool], two_sided: bool) -> f64 {
    let r = discrete_residual(f, m);
    let g = f.grid();
    let mut worst = 0f64;
    for (k, &x) in r.values().iter().enumerate() {
        if mask[k] && g.is_cell(k) {
            let x = x.f64();
            worst = worst.max(if two_sided { x.abs() } else { -x });
        }
    }
    worst
}

fn max_on<T: Real>(u: &Field<T>, v: &Field<T>, mask: &[bool]) -> f64 {
    u.max_excess(v, Some(mask))
        .map_or(f64::NEG_INFINITY, |(d, _)| d.f64())
}

fn conclude<T: Real>(
    geometry: Geometry,
    hypotheses: Vec<Hypothesis>,
    u: &Field<T>,
    v: &Field<T>,
    region: &[bool],
    scale: f64,
) -> ComparisonReport {
    let tol = COMP_TOL_REL * scale;
    let rejected = hypotheses.iter().any(|h| !h.holds && !h.waived);
    let worst = if rejected {
        None
    } else {
        violation(u, v, region)
    };
    let verdict = if rejected {
        Verdict::Rejected
    } else if worst.is_none_or(|w| w.magnitude <= tol) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    ComparisonReport {
        geometry,
        verdict,
        hypotheses,
        worst,
        tol,
        scale,
    }
}

fn ensure_common<T: Real>(u: &Field<T>, v: &Field<T>, op: &'static str) -> Result<()> {
    u.grid().ensure_same(v.grid(), op)
}

/// The whole grid as a cylinder.
pub fn full_cylinder<T: Real>(grid: &Grid<T>) -> SpaceTimeBox {
    let (px, py) = grid.nodes_per_axis();
    SpaceTimeBox {
        x: (0, px - 1),
        y: (grid.dim() == 2).then_some((0, py - 1)),
        t: (0, grid.nt() - 1),
    }
}

/// Closed box, its parabolic boundary and the nodes carrying the scheme's equation.
fn cylinder_masks<T: Real>(
    g: &Grid<T>,
    b: &SpaceTimeBox,
) -> Result<(Vec<bool>, Vec<bool>, Vec<bool>)> {
    let (px, py) = g.nodes_per_axis();
    let fits = |(a, c): (usize, usize), n: usize| a < c && c < n;
    let y_ok = match (g.dim(), b.y) {
        (1, None) => true,
        (2, Some(r)) => fits(r, py),
        _ => false,
    };
    if !(fits(b.x, px) && fits(b.t, g.nt()) && y_ok) {
        return Err(Error::InvalidSet {
            op: "compare_cylinder",
            reason: format!("cylinder {b:?} is degenerate or leaves the grid"),
        });
    }
    let n = g.n_points();
    let (mut closed, mut parabolic, mut inner) = (vec![false; n], vec![false; n], vec![false; n]);
    for k in 0..n {
        let [l, ix, iy] = g.lattice(k);
        let within = |c: usize, (a, e): (usize, usize)| a <= c && c <= e;
        let inside = |c: usize, (a, e): (usize, usize)| a < c && c < e;
        if !(within(l, b.t) && within(ix, b.x) && b.y.is_none_or(|r| within(iy, r))) {
            continue;
        }
        closed[k] = true;
        let spatial_open = inside(ix, b.x) && b.y.is_none_or(|r| inside(iy, r));
        if l == b.t.0 || !spatial_open {
            parabolic[k] = true;
        } else {
            inner[k] = true;
        }
    }
    Ok((closed, parabolic, inner))
}

/// Comparison on a cylinder: `u` a solution and `v` a supersolution inside,
/// `u <= v` on the parabolic boundary; passes iff `u <= v + comp_tol` on the cylinder.
pub fn compare_cylinder<T: Real>(
    u: &Field<T>,
    v: &Field<T>,
    m: T,
    cylinder: &SpaceTimeBox,
) -> Result<ComparisonReport> {
    ensure_common(u, v, "compare_cylinder")?;
    let g = u.grid();
    let (closed, parabolic, inner) = cylinder_masks(g, cylinder)?;
    let scale = scale_of(u, v);
    let rtol = RESIDUAL_TOL_REL * scale;
    let tol = COMP_TOL_REL * scale;
    let ru = residual_defect(u, m, &inner, true);
    let rv = residual_defect(v, m, &inner, false);
    let boundary = max_on(u, v, &parabolic);
    let hypotheses = vec![
        Hypothesis::new("u_solution_inside", ru, ru <= rtol),
        Hypothesis::new("v_supersolution_inside", rv, rv <= rtol),
        Hypothesis::new("u_le_v_on_parabolic_boundary", boundary, boundary <= tol),
    ];
    Ok(conclude(
        Geometry::Cylinder,
        hypotheses,
        u,
        v,
        &closed,
        scale,
    ))
}

/// Comparison in `Ω_T \ K`: `u` solves off `K`, `v` is a supersolution off `K`,
/// `min_K v > 0` and `u <= v` on `K ∪ ∂_pΩ_T`; passes iff `u <= v + comp_tol` everywhere.
pub fn compare_punctured<T: Real>(
    u: &Field<T>,
    v: &Field<T>,
    k: &CompactSet<T>,
    m: T,
) -> Result<ComparisonReport> {
    ensure_common(u, v, "compare_punctured")?;
    u.grid().ensure_same(k.grid(), "compare_punctured")?;
    let g = u.grid();
    let (all, parabolic, _) = cylinder_masks(g, &full_cylinder(g))?;
    let scale = scale_of(u, v);
    let rtol = RESIDUAL_TOL_REL * scale;
    let tol = COMP_TOL_REL * scale;
    let off_k: Vec<bool> = (0..g.n_points()).map(|i| !k.contains(i)).collect();
    let on_k = k.mask();
    let ru = residual_defect(u, m, &off_k, true);
    let rv = residual_defect(v, m, &off_k, false);
    let min_v = k
        .iter()
        .map(|i| v.values()[i].f64())
        .fold(f64::INFINITY, f64::min);
    let on_k_excess = max_on(u, v, on_k);
    let boundary = max_on(u, v, &parabolic);
    let hypotheses = vec![
        Hypothesis::new("u_solution_off_k", ru, ru <= rtol),
        Hypothesis::new("v_supersolution_off_k", rv, rv <= rtol),
        Hypothesis::new("v_positive_on_k", min_v, k.is_empty() || min_v > 0.0),
        Hypothesis::new("u_le_v_on_k", on_k_excess, on_k_excess <= tol),
        Hypothesis::new("u_le_v_on_parabolic_boundary", boundary, boundary <= tol),
    ];
    Ok(conclude(Geometry::Punctured, hypotheses, u, v, &all, scale))
}

/// Comparison in a finite union of boxes `E`: `u` a solution and `v` a
/// supersolution in `E`, `u <= v` on all of `∂E` (lateral, top and bottom).
/// The positivity of `v` on `∂E` is waived, as `∂E` bounds a union of cylinders.
pub fn compare_general_open<T: Real>(
    u: &Field<T>,
    v: &Field<T>,
    e: &SpaceTimeUnion<T>,
    m: T,
) -> Result<ComparisonReport> {
    ensure_common(u, v, "compare_general_open")?;
    u.grid().ensure_same(e.grid(), "compare_general_open")?;
    let scale = scale_of(u, v);
    let rtol = RESIDUAL_TOL_REL * scale;
    let tol = COMP_TOL_REL * scale;
    let interior = e.interior_mask();
    let boundary = e.boundary_mask();
    let ru = residual_defect(u, m, &interior, true);
    let rv = residual_defect(v, m, &interior, false);
    let on_boundary = max_on(u, v, &boundary);
    let min_v = v
        .values()
        .iter()
        .zip(&boundary)
        .filter(|(_, &b)| b)
        .map(|(x, _)| x.f64())
        .fold(f64::INFINITY, f64::min);
    let mut positivity = Hypothesis::new("v_positive_on_boundary", min_v, min_v > 0.0);
    positivity.waived = true;
    let hypotheses = vec![
        Hypothesis::new("u_solution_in_e", ru, ru <= rtol),
        Hypothesis::new("v_supersolution_in_e", rv, rv <= rtol),
        Hypothesis::new("u_le_v_on_boundary", on_boundary, on_boundary <= tol),
        positivity,
    ];
    Ok(conclude(
        Geometry::UnionOfBoxes,
        hypotheses,
        u,
        v,
        &e.closure_mask(),
        scale,
    ))
}

/// `μ_v <= μ_u` implies `v <= u` for the measure-data solutions (zero on `∂_p`).
pub fn measure_domination<T: Real>(
    mu_u: &DiscreteMeasure<T>,
    mu_v: &DiscreteMeasure<T>,
    m: T,
) -> Result<ComparisonReport> {
    let g = *mu_u.grid();
    g.ensure_same(mu_v.grid(), "measure_domination")?;
    let holds = dominates(mu_u, mu_v)?;
    let gap = (0..g.n_points())
        .map(|i| (mu_v.weight(i) - mu_u.weight(i)).f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let hypotheses = vec![Hypothesis::new("mu_v_le_mu_u", gap, holds)];
    if !holds {
        return Ok(ComparisonReport {
            geometry: Geometry::MeasureDomination,
            verdict: Verdict::Rejected,
            hypotheses,
            worst: None,
            tol: 0.0,
            scale: 1.0,
        });
    }
    let u = solve_measure_data(&g, m, mu_u)?;
    let v = solve_measure_data(&g, m, mu_v)?;
    let scale = scale_of(&u, &v);
    let all = vec![true; g.n_points()];
    Ok(conclude(
        Geometry::MeasureDomination,
        hypotheses,
        &v,
        &u,
        &all,
        scale,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingEntry {
    pub eps: f64,
    /// Largest cellwise `|residual(u/(1+ε)) - f|`.
    pub mismatch: f64,
    /// `sup |f|`, `f = ((1+ε)^{m-1} - 1)/(1+ε)^m Δ_h u^m`.
    pub f_sup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub verdict: Verdict,
    pub u_residual: f64,
    pub entries: Vec<ScalingEntry>,
    /// `sup f(0.1) / sup f(0.01)` when both are present and the second is nonzero.
    pub ratio: Option<f64>,
    pub tol: f64,
    pub scale: f64,
}

/// Scaling identity: for a solution `u`, the residual of `u/(1+ε)` is
/// `((1+ε)^{m-1} - 1)/(1+ε)^m Δ_h u^m`. Residuals are in PDE units (divided by `dt`).
pub fn scaling_residual_check<T: Real>(
    u: &Field<T>,
    m: T,
    eps_list: &[T],
) -> Result<ScalingReport> {
    let g = u.grid();
    let dt = g.dt();
    let scale = 1f64.max(u.sup_norm().f64());
    let tol = SCALING_TOL_REL * scale;
    let cells: Vec<bool> = (0..g.n_points()).map(|i| g.is_cell(i)).collect();
    let ru = residual_defect(u, m, &cells, true) / dt.f64();
    if !(ru <= RESIDUAL_TOL_REL * scale / dt.f64()) {
        return Ok(ScalingReport {
            verdict: Verdict::Rejected,
            u_residual: ru,
            entries: Vec::new(),
            ratio: None,
            tol,
            scale,
        });
    }
    let pw = u.map("pw", |x| crate::solver::spow(x, m));
    let interior = g.interior_nodes();
    let mut lap = Field::zeros(*g, "laplacian");
    for n in 1..g.nt() {
        let row = crate::grid::discrete_laplacian(&pw, n)?;
        for (&j, &x) in interior.iter().zip(&row) {
            lap.set(n, j, x);
        }
    }
    let mut entries = Vec::new();
    for &eps in eps_list {
        if !(eps >= T::zero()) {
            return Err(Error::InvalidProblem(format!(
                "scaling_residual_check: eps = {eps} must be >= 0"
            )));
        }
        let s = T::one() + eps;
        let coef = (s.powf(m - T::one()) - T::one()) / s.powf(m);
        let w = u.map("scaled", |x| x / s);
        let rw = discrete_residual(&w, m);
        let mut mismatch = 0f64;
        let mut f_sup = 0f64;
        for k in 0..g.n_points() {
            if cells[k] {
                let f = coef * lap.values()[k];
                mismatch = mismatch.max((rw.values()[k] / dt - f).abs().f64());
                f_sup = f_sup.max(f.abs().f64());
            }
        }
        entries.push(ScalingEntry {
            eps: eps.f64(),
            mismatch,
            f_sup,
        });
    }
    let find = |e: f64| {
        entries
            .iter()
            .find(|x| (x.eps - e).abs() < 1e-12)
            .map(|x| x.f_sup)
    };
    let ratio = match (find(0.1), find(0.01)) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    };
    let ok = entries.iter().all(|e| e.mismatch <= tol)
        && ratio.is_none_or(|r| (8.0..=12.0).contains(&r));
    Ok(ScalingReport {
        verdict: if ok { Verdict::Pass } else { Verdict::Fail },
        u_residual: ru,
        entries,
        ratio,
        tol,
        scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTripReport {
    pub verdict: Verdict,
    /// `max |μ' - μ| / max(TV(μ), tiny)`.
    pub rel_error: f64,
    pub total_variation: f64,
}

/// `extract_riesz(solve_measure_data(μ)) = μ` up to `1e-10` relative.
pub fn roundtrip_check<T: Real>(mu: &DiscreteMeasure<T>, m: T) -> Result<RoundTripReport> {
    let u = solve_measure_data(mu.grid(), m, mu)?;
    let back = extract_riesz(&u, m)?;
    let tv = mu.total_variation().f64();
    let diff = mu
        .weights()
        .iter()
        .zip(back.weights())
        .map(|(a, b)| (*a - *b).abs().f64())
        .fold(0.0, f64::max);
    let rel_error = diff / tv.max(f64::MIN_POSITIVE);
    Ok(RoundTripReport {
        verdict: if rel_error <= ROUNDTRIP_TOL_REL {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
        rel_error,
        total_variation: tv,
    })
}

/// Caccioppoli check with `M = sup u` and a cos² cutoff covering the middle of the domain.
pub fn caccioppoli_probe<T: Real>(u: &Field<T>, m: T) -> Result<CaccioppoliReport> {
    let g = u.grid();
    let bound = u.sup_norm().max(T::min_positive_value());
    let half = T::of(0.5);
    let center = [g.lx() * half, g.ly().unwrap_or(T::zero()) * half];
    let radius = g.lx().min(g.ly().unwrap_or(g.lx())) * T::of(0.4);
    caccioppoli_check(u, m, bound, &bump_cutoff(g, center, radius))
}

/// One suite instance, as written to the JSON lines output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRecord {
    pub suite: String,
    pub id: usize,
    pub instance: String,
    pub m: f64,
    pub expected: Verdict,
    pub verdict: Verdict,
    pub report: serde_json::Value,
}

impl SuiteRecord {
    /// The verdict is the one the instance was built for.
    pub fn ok(&self) -> bool {
        self.verdict == self.expected
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub instances: usize,
    pub passed: usize,
    pub failed: usize,
    pub rejected: usize,
    /// Instances whose verdict differs from the expected one.
    pub unexpected: usize,
}

pub fn summarize(records: &[SuiteRecord]) -> SuiteSummary {
    let mut s = SuiteSummary {
        instances: records.len(),
        ..Default::default()
    };
    for r in records {
        match r.verdict {
            Verdict::Pass => s.passed += 1,
            Verdict::Fail => s.failed += 1,
            Verdict::Rejected => s.rejected += 1,
        }
        if !r.ok() {
            s.unexpected += 1;
        }
    }
    s
}

/// One JSON object per line, in instance order.
pub fn to_jsonl(records: &[SuiteRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub const SUITES: [&str; 5] = ["roundtrip", "domination", "scaling", "comparison", "full"];

/// Runs a named suite. Instances run in parallel; each draws from its own
/// Xoshiro256++ stream derived from `seed`, the suite and its index, so the
/// output does not depend on scheduling.
pub fn run_suite(name: &str, seed: u64) -> Result<Vec<SuiteRecord>> {
    match name {
        "roundtrip" => run_instances("roundtrip", seed, 20, roundtrip_instance),
        "domination" => run_instances("domination", seed, 50, domination_instance),
        "scaling" => run_instances("scaling", seed, 3, scaling_instance),
        "comparison" => run_instances(
            "comparison",
            seed,
            COMPARISON_INSTANCES,
            comparison_instance,
        ),
        "full" => {
            let mut all = Vec::new();
            for s in &SUITES[..4] {
                all.extend(run_suite(s, seed)?);
            }
            Ok(all)
        }
        other => Err(Error::InvalidProblem(format!(
            "unknown suite '{other}' (expected one of {})",
            SUITES.join(", ")
        ))),
    }
}

fn stream(seed: u64, suite: &str, id: usize) -> Xoshiro256PlusPlus {
    let tag = suite.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    Xoshiro256PlusPlus::seed_from_u64(
        seed ^ tag.rotate_left(17) ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    )
}

fn run_instances(
    suite: &str,
    seed: u64,
    count: usize,
    make: fn(usize, &mut Xoshiro256PlusPlus) -> Result<SuiteRecord>,
) -> Result<Vec<SuiteRecord>> {
    (0..count)
        .into_par_iter()
        .map(|id| {
            let mut rng = stream(seed, suite, id);
            let mut rec = make(id, &mut rng)?;
            rec.suite = suite.into();
            rec.id = id;
            Ok(rec)
        })
        .collect()
}

const EXPONENTS: [f64; 3] = [1.5, 2.0, 3.0];

fn record(
    instance: String,
    m: f64,
    expected: Verdict,
    verdict: Verdict,
    report: impl Serialize,
) -> Result<SuiteRecord> {
    Ok(SuiteRecord {
        suite: String::new(),
        id: 0,
        instance,
        m,
        expected,
        verdict,
        report: serde_json::to_value(report)?,
    })
}

/// Small random grid: 1-D most of the time, 2-D for every fourth instance.
fn random_grid(id: usize, rng: &mut Xoshiro256PlusPlus) -> Result<Grid<f64>> {
    if id % 4 == 3 {
        let n = rng.random_range(8..=12);
        Grid::new_2d(n, n, 1.0, 1.0, rng.random_range(6..=10), 0.01)
    } else {
        let nx = rng.random_range(20..=40);
        Grid::new_1d(nx, 1.0, rng.random_range(10..=20), 0.01)
    }
}

/// 1 to 6 random cells with weights in `[0.1, 1] h^d`.
fn random_measure(g: &Grid<f64>, rng: &mut Xoshiro256PlusPlus) -> Result<DiscreteMeasure<f64>> {
    let count = rng.random_range(1..=6);
    let (px, py) = g.nodes_per_axis();
    let cells: Vec<(usize, f64)> = (0..count)
        .map(|_| {
            let level = rng.random_range(1..g.nt());
            let ix = rng.random_range(1..px - 1);
            let iy = if g.dim() == 2 {
                rng.random_range(1..py - 1)
            } else {
                0
            };
            (
                g.index(level, g.node_at(ix, iy)),
                rng.random_range(0.1..=1.0) * g.cell_area(),
            )
        })
        .collect();
    let mut weights = vec![0.0; g.n_points()];
    for (c, w) in cells {
        weights[c] += w;
    }
    DiscreteMeasure::from_weights(*g, weights)
}

fn roundtrip_instance(id: usize, rng: &mut Xoshiro256PlusPlus) -> Result<SuiteRecord> {
    let m = EXPONENTS[id % 3];
    let g = random_grid(id, rng)?;
    let mu = random_measure(&g, rng)?;
    let rep = roundtrip_check(&mu, m)?;
    let desc = format!("{}-D grid, {} atoms", g.dim(), mu.sparse().len());
    record(desc, m, Verdict::Pass, rep.verdict, rep)
}

fn domination_instance(id: usize, rng: &mut Xoshiro256PlusPlus) -> Result<SuiteRecord> {
    let m = EXPONENTS[id % 3];
    let g = random_grid(id, rng)?;
    let mu_u = random_measure(&g, rng)?;
    let mu_v = if id.is_multiple_of(10) {
        mu_u.clone()
    } else {
        let w = mu_u
            .weights()
            .iter()
            .map(|&x| {
                if x > 0.0 && rng.random_bool(0.8) {
                    x * rng.random_range(0.0..=1.0)
                } else {
                    0.0
                }
            })
            .collect();
        DiscreteMeasure::from_weights(g, w)?
    };
    let rep = measure_domination(&mu_u, &mu_v, m)?;
    // Both solutions are supersolutions; probe each.
    let cacc = caccioppoli_probe(&solve_measure_data(&g, m, &mu_u)?, m)?;
    let cacc_v = caccioppoli_probe(&solve_measure_data(&g, m, &mu_v)?, m)?;
    let probes_ok = cacc.pass && cacc_v.pass;
    let verdict = if rep.verdict == Verdict::Pass && !probes_ok {
        Verdict::Fail
    } else {
        rep.verdict
    };
    let desc = format!("{}-D grid, {} atoms", g.dim(), mu_u.sparse().len());
    record(
        desc,
        m,
        Verdict::Pass,
        verdict,
        serde_json::json!({ "comparison": rep, "caccioppoli": cacc, "caccioppoli_v": cacc_v }),
    )
}

/// Source-free solve from Barenblatt data on a 1-D grid.
fn barenblatt_solve(g: &Grid<f64>, m: f64, center: f64, radius: f64) -> Result<Field<f64>> {
    let b = Barenblatt::with_support_radius(m, 1, radius, [center, 0.0], 0.1)?;
    let problem = PmeProblem::new(*g, m)?.with_initial(|x| b.eval(x, 0.0))?;
    Ok(solve_cauchy_dirichlet(&problem)?.0)
}

fn scaling_instance(id: usize, _rng: &mut Xoshiro256PlusPlus) -> Result<SuiteRecord> {
    let m = EXPONENTS[id % 3];
    let g = Grid::new_1d(100, 1.0, 21, 0.01)?;
    let u = barenblatt_solve(&g, m, 0.5, 0.2)?;
    let rep = scaling_residual_check(&u, m, &[0.1, 0.01])?;
    record(
        "Barenblatt data, nx=100".into(),
        m,
        Verdict::Pass,
        rep.verdict,
        rep,
    )
}

/// Valid instances per geometry in the comparison suite.
pub const COMPARISON_PER_GEOMETRY: usize = 12;
/// Hypothesis-violating probes per geometry.
pub const PROBES_PER_GEOMETRY: usize = 2;
const COMPARISON_INSTANCES: usize = 3 * (COMPARISON_PER_GEOMETRY + PROBES_PER_GEOMETRY);

fn comparison_instance(id: usize, rng: &mut Xoshiro256PlusPlus) -> Result<SuiteRecord> {
    let per = COMPARISON_PER_GEOMETRY + PROBES_PER_GEOMETRY;
    let (kind, local) = (id / per, id % per);
    let probe = local >= COMPARISON_PER_GEOMETRY;
    let m = [2.0, 3.0][local % 2];
    let expected = if probe {
        Verdict::Rejected
    } else {
        Verdict::Pass
    };
    match kind {
        0 => cylinder_instance(rng, m, probe, expected),
        1 => punctured_instance(rng, m, probe, expected),
        _ => union_instance(rng, m, probe, expected),
    }
}

fn cylinder_instance(
    rng: &mut Xoshiro256PlusPlus,
    m: f64,
    probe: bool,
    expected: Verdict,
) -> Result<SuiteRecord> {
    let g = Grid::new_1d(40, 1.0, 20, 0.005)?;
    let center = rng.random_range(0.4..=0.6);
    let radius = rng.random_range(0.1..=0.25);
    let u = barenblatt_solve(&g, m, center, radius)?;
    let (level, ix) = (rng.random_range(1..g.nt()), rng.random_range(1..40));
    let weight = rng.random_range(0.05..=0.5) * g.h();
    let atom = DiscreteMeasure::from_cells(g, [(g.index(level, g.node_at(ix, 0)), weight)])?;
    let problem = PmeProblem::new(g, m)?
        .with_data(&u)?
        .with_source_measure(&atom)?;
    let v = solve_cauchy_dirichlet(&problem)?.0;
    let x0 = rng.random_range(0..20);
    let x1 = rng.random_range(x0 + 2..=40);
    let t0 = rng.random_range(0..10);
    let t1 = rng.random_range(t0 + 1..20);
    let cyl = SpaceTimeBox {
        x: (x0, x1),
        y: None,
        t: (t0, t1),
    };
    // Probe: the roles swapped, so `u` carries the point mass and is no solution.
    let (a, b) = if probe { (&v, &u) } else { (&u, &v) };
    let full = full_cylinder(&g);
    let rep = compare_cylinder(a, b, m, if probe { &full } else { &cyl })?;
    let desc = format!("cylinder x {x0}..{x1}, t {t0}..{t1}, atom at level {level}, ix {ix}");
    record(desc, m, expected, rep.verdict, rep)
}

/// Random compact of 1 to 3 cells far enough from the boundary for the balayage.
fn random_compact(
    g: &Grid<f64>,
    rng: &mut Xoshiro256PlusPlus,
    count: usize,
) -> Result<Vec<(usize, usize, usize)>> {
    let (px, _) = g.nodes_per_axis();
    Ok((0..count)
        .map(|_| {
            (
                rng.random_range(4..=g.nt() - 5),
                rng.random_range(4..=px - 5),
                0,
            )
        })
        .collect())
}

fn punctured_instance(
    rng: &mut Xoshiro256PlusPlus,
    m: f64,
    probe: bool,
    expected: Verdict,
) -> Result<SuiteRecord> {
    let g = Grid::new_1d(24, 1.0, 16, 1.0 / 24.0)?;
    let count = rng.random_range(1..=3);
    let small = random_compact(&g, rng, count)?;
    let extra = rng.random_range(1..=3);
    let mut large = small.clone();
    large.extend(random_compact(&g, rng, extra)?);
    let k = CompactSet::from_lattice(g, small.iter().copied())?;
    let k2 = CompactSet::from_lattice(g, large.iter().copied())?;
    let u = balayage(&k, m, 5)?;
    let mut v = balayage(&k2, m, 5)?;
    if probe {
        v = v.map("half", |x| 0.5 * x);
    }
    let rep = compare_punctured(&u, &v, &k, m)?;
    let desc = format!(
        "K {small:?} inside K' {large:?}{}",
        if probe { ", v halved" } else { "" }
    );
    record(desc, m, expected, rep.verdict, rep)
}

fn union_instance(
    rng: &mut Xoshiro256PlusPlus,
    m: f64,
    probe: bool,
    expected: Verdict,
) -> Result<SuiteRecord> {
    let g = Grid::new_1d(30, 1.0, 20, 0.01)?;
    // L-shape: a tall box and a later, wider box sharing its right part.
    let a0 = rng.random_range(2..=8);
    let a1 = a0 + rng.random_range(6..=10);
    let b1 = (a1 + rng.random_range(4..=8)).min(28);
    let t0 = rng.random_range(1..=4);
    let t1 = t0 + rng.random_range(3..=6);
    let t2 = rng.random_range(t1 + 3..=19);
    let boxes = vec![
        SpaceTimeBox {
            x: (a0, a1),
            y: None,
            t: (t0, t2),
        },
        SpaceTimeBox {
            x: (a1 - 3, b1),
            y: None,
            t: (t1, t2),
        },
    ];
    let e = SpaceTimeUnion::new(g, boxes.clone())?;
    let with_balayage = rng.random_bool(0.5);
    let v = if with_balayage {
        let cells = random_compact(&g, rng, 2)?;
        let k = CompactSet::from_lattice(g, cells)?;
        balayage(&k, m, 5)?
    } else {
        let center = rng.random_range(0.3..=0.7);
        barenblatt_solve(&g, m, center, rng.random_range(0.15..=0.3))?
    };
    let factor = if probe { 1.2 } else { 0.9 };
    let mut data = v.map("data", |x| factor * x);
    if probe {
        // Make sure the violation is visible even where v vanishes on ∂E.
        let boundary = e.boundary_mask();
        for (x, &b) in data.values_mut().iter_mut().zip(&boundary) {
            if b {
                *x += 0.01;
            }
        }
    }
    let u = solve_in_union(&e, m, &data)?.0;
    let rep = compare_general_open(&u, &v, &e, m)?;
    let source = if with_balayage {
        "balayage"
    } else {
        "Barenblatt solve"
    };
    let desc = format!("L-shape {boxes:?}, v = {source}, data = {factor} v");
    record(desc, m, expected, rep.verdict, rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g() -> Grid<f64> {
        Grid::<f64>::new_1d(20, 1.0, 10, 0.01).unwrap()
    }

    #[test]
    fn equal_fields_pass_with_zero_margin() {
        let g = g();
        let u = barenblatt_solve(&g, 2.0, 0.5, 0.2).unwrap();
        let rep = compare_cylinder(&u, &u, 2.0, &full_cylinder(&g)).unwrap();
        assert!(rep.passed());
        assert_eq!(rep.worst.unwrap().magnitude, 0.0);
    }

    #[test]
    fn ordered_constants_pass() {
        let g = g();
        let a = Field::constant(g, 0.3, "a");
        let b = Field::constant(g, 0.5, "b");
        assert!(compare_cylinder(&a, &b, 2.0, &full_cylinder(&g))
            .unwrap()
            .passed());
        let rep = compare_cylinder(&b, &a, 2.0, &full_cylinder(&g)).unwrap();
        assert_eq!(rep.verdict, Verdict::Rejected);
        assert_eq!(
            rep.failed_hypothesis(),
            Some("u_le_v_on_parabolic_boundary")
        );
    }

    #[test]
    fn zero_measure_gives_zero_solution() {
        let g = g();
        let mu = DiscreteMeasure::from_cells(g, [(g.index(4, 10), 0.02)]).unwrap();
        let rep = measure_domination(&mu, &DiscreteMeasure::zero(g), 2.0).unwrap();
        assert!(rep.passed());
        let rep = measure_domination(&DiscreteMeasure::zero(g), &mu, 2.0).unwrap();
        assert_eq!(rep.verdict, Verdict::Rejected);
    }

    #[test]
    fn scaling_trivial_cases() {
        let g = g();
        let c = Field::constant(g, 0.4, "c");
        let rep = scaling_residual_check(&c, 2.0, &[0.0, 0.1]).unwrap();
        assert_eq!(rep.verdict, Verdict::Pass);
        assert!(rep
            .entries
            .iter()
            .all(|e| e.f_sup == 0.0 && e.mismatch == 0.0));
        let u = barenblatt_solve(&g, 2.0, 0.5, 0.2).unwrap();
        let rep = scaling_residual_check(&u, 2.0, &[0.0]).unwrap();
        assert_eq!(rep.entries[0].f_sup, 0.0);
        assert!(rep.entries[0].mismatch <= rep.tol);
    }

    #[test]
    fn punctured_identity_and_halving() {
        let g = Grid::<f64>::new_1d(24, 1.0, 16, 1.0 / 24.0).unwrap();
        let k = CompactSet::from_lattice(g, [(6, 10, 0)]).unwrap();
        let u = balayage(&k, 2.0, 5).unwrap();
        let rep = compare_punctured(&u, &u, &k, 2.0).unwrap();
        assert!(rep.passed());
        let half = u.map("half", |x| 0.5 * x);
        let rep = compare_punctured(&u, &half, &k, 2.0).unwrap();
        assert_eq!(rep.verdict, Verdict::Rejected);
        assert!(rep
            .hypotheses
            .iter()
            .any(|h| h.name == "u_le_v_on_k" && !h.holds));
    }

    #[test]
    fn suite_streams_differ_and_repeat() {
        let a: Vec<u64> = (0..3)
            .map(|i| stream(7, "x", i).random_range(0..u64::MAX))
            .collect();
        let b: Vec<u64> = (0..3)
            .map(|i| stream(7, "x", i).random_range(0..u64::MAX))
            .collect();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        assert!(run_suite("nope", 1).is_err());
    }
}
