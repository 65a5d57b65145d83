//! Invariants of the public API, checked on randomly generated inputs.

use pmelab_core::capacity::{capacity_of_compact, DEFAULT_DEPTH};
use pmelab_core::io::{
    cell_set_from_json, cell_set_to_json, measure_from_json, measure_to_json, read_field_csv, run_length_decode,
    run_length_encode, write_field_csv,
};
use pmelab_core::measure::{extract_riesz, measure_of_set};
use pmelab_core::obstacle::{complementarity_residual, solve_projected, ObstacleSpec};
use pmelab_core::reference::Barenblatt;
use pmelab_core::solver::{solve_cauchy_dirichlet, solve_measure_data};
use pmelab_core::{CellSet64, CompactSet64, Field64, Grid64, Measure64, PmeProblem64};
use proptest::prelude::*;

fn grid_1d() -> Grid64 {
    Grid64::new_1d(16, 1.0, 10, 0.02).unwrap()
}

/// Sparse measure from `(level, node, weight)` triples clamped onto cells.
fn measure(g: Grid64, atoms: &[(usize, usize, f64)]) -> Measure64 {
    let interior = g.interior_nodes();
    let cells = atoms
        .iter()
        .map(|&(n, j, w)| (g.index(1 + n % (g.nt() - 1), interior[j % interior.len()]), w));
    Measure64::from_cells(g, cells).unwrap()
}

fn cell_set(g: Grid64, picks: &[(usize, usize)]) -> CellSet64 {
    let interior = g.interior_nodes();
    CellSet64::from_indices(g, picks.iter().map(|&(n, j)| g.index(1 + n % (g.nt() - 1), interior[j % interior.len()])))
        .unwrap()
}

fn atoms() -> impl Strategy<Value = Vec<(usize, usize, f64)>> {
    prop::collection::vec((0usize..20, 0usize..20, 0.01f64..2.0), 1..6)
}

fn picks() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0usize..20, 0usize..20), 0..25)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn run_length_round_trip(mut idx in prop::collection::vec(0usize..500, 0..80)) {
        idx.sort_unstable();
        idx.dedup();
        let runs = run_length_encode(idx.iter().copied());
        prop_assert!(runs.iter().all(|r| r[1] > 0));
        prop_assert_eq!(run_length_decode(&runs).collect::<Vec<_>>(), idx);
    }

    #[test]
    fn cell_set_json_round_trip(p in picks()) {
        let s = cell_set(grid_1d(), &p);
        let back: CellSet64 = cell_set_from_json(&cell_set_to_json(&s)).unwrap();
        prop_assert_eq!(back.iter().collect::<Vec<_>>(), s.iter().collect::<Vec<_>>());
    }

    #[test]
    fn measure_json_round_trip(a in atoms()) {
        let g = grid_1d();
        let mu = measure(g, &a);
        let back = measure_from_json(&g, &measure_to_json(&mu)).unwrap();
        prop_assert_eq!(back.weights(), mu.weights());
    }

    #[test]
    fn field_csv_round_trip(seed in 0u64..1000) {
        let g = grid_1d();
        let f = Field64::from_fn(g, "f", |x, t| ((x[0] * 13.0 + seed as f64).sin() + t).abs());
        let mut buf = Vec::new();
        write_field_csv(&f, &mut buf).unwrap();
        let back = read_field_csv(&g, buf.as_slice(), "f").unwrap();
        prop_assert_eq!(back.values(), f.values());
    }

    #[test]
    fn measure_is_additive(a in atoms(), p1 in picks(), p2 in picks()) {
        let g = grid_1d();
        let mu = measure(g, &a);
        let (s1, s2) = (cell_set(g, &p1), cell_set(g, &p2));
        let union = measure_of_set(&mu, &s1.union(&s2).unwrap()).unwrap();
        let inter = measure_of_set(&mu, &s1.intersection(&s2).unwrap()).unwrap();
        let sum = measure_of_set(&mu, &s1).unwrap() + measure_of_set(&mu, &s2).unwrap();
        prop_assert!((union + inter - sum).abs() <= 1e-12 * (1.0 + sum.abs()));
    }

    #[test]
    fn riesz_measure_inverts_measure_data_solve(a in atoms(), mi in 0usize..3) {
        let m = [1.5, 2.0, 3.0][mi];
        let g = grid_1d();
        let mu = measure(g, &a);
        let u = solve_measure_data(&g, m, &mu).unwrap();
        let back = extract_riesz(&u, m).unwrap();
        let err = back.weights().iter().zip(mu.weights()).map(|(x, y)| (x - y).abs()).sum::<f64>();
        prop_assert!(err <= 1e-10 * mu.total_variation());
    }

    #[test]
    fn larger_measure_gives_larger_solution(a in atoms(), scale in prop::collection::vec(0.0f64..1.0, 6), mi in 0usize..3) {
        let m = [1.5, 2.0, 3.0][mi];
        let g = grid_1d();
        let big = measure(g, &a);
        let thinned: Vec<_> = a.iter().zip(&scale).map(|(&(n, j, w), s)| (n, j, w * s)).collect();
        let small = measure(g, &thinned);
        let u_big = solve_measure_data(&g, m, &big).unwrap();
        let u_small = solve_measure_data(&g, m, &small).unwrap();
        let scale = 1f64.max(u_big.sup_norm());
        if let Some((excess, _)) = u_small.max_excess(&u_big, None) {
            prop_assert!(excess <= 1e-8 * scale, "excess {}", excess);
        }
    }

    #[test]
    fn capacity_is_monotone(p in prop::collection::vec((4usize..8, 6usize..11), 1..4), extra in prop::collection::vec((4usize..8, 6usize..11), 1..4)) {
        let g = Grid64::new_1d(16, 1.0, 12, 1.0 / 16.0).unwrap();
        let small = CompactSet64::from_lattice(g, p.iter().map(|&(n, x)| (n, x, 0))).unwrap();
        let large = CompactSet64::from_lattice(g, p.iter().chain(&extra).map(|&(n, x)| (n, x, 0))).unwrap();
        let a = capacity_of_compact(&small, 2.0, DEFAULT_DEPTH).unwrap();
        let b = capacity_of_compact(&large, 2.0, DEFAULT_DEPTH).unwrap();
        prop_assert!(a.value > 0.0);
        prop_assert!(a.value <= b.value * (1.0 + 1e-6), "{} > {}", a.value, b.value);
        prop_assert!(a.extremal.min_value() >= -1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn projected_obstacle_solution_is_complementary(c in 0.3f64..0.7, r in 0.1f64..0.3, h in 0.2f64..1.0, mi in 0usize..2) {
        let m = [2.0, 3.0][mi];
        let g = Grid64::new_1d(40, 1.0, 16, 0.02).unwrap();
        let span = g.final_time();
        let psi = Field64::from_fn(g, "psi", |x, t| {
            let d = (x[0] - c).abs() / r;
            let space = if d < 1.0 { (std::f64::consts::FRAC_PI_2 * d).cos().powi(2) } else { 0.0 };
            h * space * (std::f64::consts::PI * t / span).sin().powi(2)
        });
        let spec = ObstacleSpec::new(psi.clone(), m).unwrap();
        let sol = solve_projected(&spec).unwrap();
        let tol = 1e-8 * spec.scale();
        if let Some((excess, _)) = psi.max_excess(&sol.u, None) {
            prop_assert!(excess <= tol);
        }
        prop_assert!(complementarity_residual(&spec, &sol.u).unwrap() <= 1e-6 * spec.scale());
        let mu = extract_riesz(&sol.u, m).unwrap();
        prop_assert!(mu.is_nonnegative());
    }
}

/// Mass stays constant while the support is away from the lateral boundary.
#[test]
fn interior_solutions_conserve_mass() {
    for m in [1.5, 2.0, 3.0] {
        let g = Grid64::new_1d(100, 1.0, 21, 0.005).unwrap();
        let b = Barenblatt::with_support_radius(m, 1, 0.15, [0.5, 0.0], 0.05).unwrap();
        let p = PmeProblem64::new(g, m).unwrap().with_initial(|x| b.eval(x, 0.0)).unwrap();
        let (u, _) = solve_cauchy_dirichlet(&p).unwrap();
        let first: f64 = u.level(0).iter().sum();
        let last: f64 = u.level(g.nt() - 1).iter().sum();
        assert!((first - last).abs() <= 1e-9 * first, "m={m}: {first} vs {last}");
    }
}

/// The closed-form profile satisfies the PDE pointwise (central differences).
#[test]
fn barenblatt_satisfies_the_equation() {
    for (m, n) in [(2.0, 1), (3.0, 1), (2.0, 2), (1.5, 2)] {
        let b = Barenblatt::with_support_radius(m, n, 0.3, [0.5, 0.5], 0.1).unwrap();
        let (t, e) = (0.05, 1e-4);
        let um = |x: [f64; 2]| b.eval(x, t).powf(m);
        for x in [[0.5, 0.5], [0.6, 0.55], [0.42, 0.5]] {
            let x = if n == 1 { [x[0], 0.0] } else { x };
            let ut = (b.eval(x, t + e) - b.eval(x, t - e)) / (2.0 * e);
            let mut lap = (um([x[0] + e, x[1]]) - 2.0 * um(x) + um([x[0] - e, x[1]])) / (e * e);
            if n == 2 {
                lap += (um([x[0], x[1] + e]) - 2.0 * um(x) + um([x[0], x[1] - e])) / (e * e);
            }
            assert!((ut - lap).abs() <= 1e-4 * (1.0 + ut.abs()), "m={m} n={n} x={x:?}: {ut} vs {lap}");
        }
    }
}

/// Mass constant against a midpoint quadrature of the profile.
#[test]
fn barenblatt_mass_matches_quadrature() {
    for (m, n) in [(2.0, 1), (3.0, 1), (2.0, 2), (1.5, 2)] {
        let b = Barenblatt::with_support_radius(m, n, 0.3, [0.0, 0.0], 0.1).unwrap();
        let k = 2000;
        let step = 0.7 / k as f64;
        let mut q = 0.0;
        for i in 0..k {
            let x = -0.35 + (i as f64 + 0.5) * step;
            if n == 1 {
                q += b.eval([x, 0.0], 0.0) * step;
            } else {
                for j in 0..k {
                    let y = -0.35 + (j as f64 + 0.5) * step;
                    q += b.eval([x, y], 0.0) * step * step;
                }
            }
        }
        assert!((q - b.mass()).abs() <= 1e-4 * b.mass(), "m={m} n={n}: {q} vs {}", b.mass());
    }
}
