//! Solver outputs against independently coded oracles and end-to-end invariants.

#![allow(clippy::needless_range_loop)]

use pmelab_core::capacity::{balayage, balayage_sequence, check_property, PropertyInstance};
use pmelab_core::measure::{extract_riesz, weak_convergence_check};
use pmelab_core::obstacle::{
    complementarity_residual, default_deltas, obstacle_rate, reduite_via_increasing_obstacles, solve_penalized,
    solve_projected, ObstacleSpec,
};
use pmelab_core::reference::{bump_cutoff, caccioppoli_check};
use pmelab_core::solver::{discrete_residual, solve_measure_data};
use pmelab_core::verify::{measure_domination, Verdict};
use pmelab_core::{CellSet64, CompactSet64, Field64, Grid64, Measure64};

/// Nonlinear Gauss–Seidel on one backward-Euler level: each interior row
/// `U_i - dt (U_{i-1}^m - 2 U_i^m + U_{i+1}^m) / h² - prev_i - f_i = 0` is solved
/// for `U_i` by bisection, optionally projected onto `U_i >= floor_i`.
fn gauss_seidel_level(u: &mut [f64], prev: &[f64], f: &[f64], floor: Option<&[f64]>, m: f64, c: f64) {
    let n = u.len();
    for _sweep in 0..10_000 {
        let mut change: f64 = 0.0;
        for i in 1..n - 1 {
            let side = u[i - 1].powf(m) + u[i + 1].powf(m);
            let row = |x: f64| x - c * (side - 2.0 * x.powf(m)) - prev[i] - f[i];
            let (mut lo, mut hi) = (0.0, 1.0);
            while row(hi) < 0.0 {
                hi *= 2.0;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if row(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let mut x = 0.5 * (lo + hi);
            if let Some(fl) = floor {
                x = x.max(fl[i]);
            }
            change = change.max((x - u[i]).abs());
            u[i] = x;
        }
        if change < 1e-15 {
            return;
        }
    }
    panic!("oracle did not converge");
}

#[test]
fn point_mass_solve_matches_gauss_seidel_oracle() {
    let (m, w) = (2.0, 0.3);
    let g = Grid64::new_1d(8, 1.0, 4, 0.05).unwrap();
    assert_eq!(g.n_nodes(), 9);
    let mu = Measure64::from_cells(g, [(g.index(2, 4), w)]).unwrap();
    let u = solve_measure_data(&g, m, &mu).unwrap();
    let c = g.dt() / (g.h() * g.h());
    let mut prev = vec![0.0; 9];
    for n in 1..4 {
        let mut f = vec![0.0; 9];
        if n == 2 {
            f[4] = w / g.h();
        }
        let mut cur = prev.clone();
        gauss_seidel_level(&mut cur, &prev, &f, None, m, c);
        for j in 0..9 {
            assert!((u.at(n, j) - cur[j]).abs() <= 1e-8, "level {n} node {j}: {} vs {}", u.at(n, j), cur[j]);
        }
        prev = cur;
    }
}

fn hat(g: Grid64, height: f64) -> Field64 {
    Field64::from_fn(g, "psi", |x, t| {
        if t <= 0.0 {
            return 0.0;
        }
        (height * (1.0 - (x[0] - 0.5).abs() / 0.3)).max(0.0)
    })
}

#[test]
fn projected_solve_matches_projected_gauss_seidel_oracle() {
    let m = 2.0;
    let g = Grid64::new_1d(8, 1.0, 6, 0.02).unwrap();
    let psi = hat(g, 0.5);
    let spec = ObstacleSpec::new(psi.clone(), m).unwrap();
    let sol = solve_projected(&spec).unwrap();
    assert!(complementarity_residual(&spec, &sol.u).unwrap() <= 1e-9);
    let c = g.dt() / (g.h() * g.h());
    let mut prev = sol.u.level(0).to_vec();
    for n in 1..g.nt() {
        let mut cur = sol.u.level(n).to_vec();
        cur[1..8].iter_mut().for_each(|v| *v = 0.0);
        gauss_seidel_level(&mut cur, &prev, &[0.0; 9], Some(psi.level(n)), m, c);
        for j in 0..9 {
            assert!((sol.u.at(n, j) - cur[j]).abs() <= 1e-8, "level {n} node {j}");
        }
        prev = cur;
    }
}

#[test]
fn penalized_solution_is_a_supersolution_that_solves_off_the_penalty() {
    let m = 2.0;
    let g = Grid64::new_1d(40, 1.0, 21, 0.01).unwrap();
    let psi = Field64::from_fn(g, "psi", |x, t| {
        let d = (x[0] - 0.5).abs() / 0.2;
        let space = if d < 1.0 { (std::f64::consts::FRAC_PI_2 * d).cos().powi(2) } else { 0.0 };
        0.6 * space * (std::f64::consts::PI * t / 0.2).sin().powi(2)
    });
    let spec = ObstacleSpec::new(psi.clone(), m).unwrap();
    let sol = solve_penalized(&spec, &default_deltas()).unwrap();
    let r = discrete_residual(&sol.u, m);
    let rate = obstacle_rate(&psi, m);
    let tol = 1e-8 * spec.scale();
    for i in 0..g.n_points() {
        if !g.is_cell(i) {
            continue;
        }
        assert!(r.values()[i] >= -tol, "negative residual at {i}");
        if rate[i] == 0.0 {
            assert!(r.values()[i].abs() <= tol, "residual {} off the penalty at {i}", r.values()[i]);
        }
    }
    // Penalization leaves u below ψ by at most O(δ) in u^m.
    let gap = psi.max_excess(&sol.u, None).map_or(0.0, |(e, _)| e);
    assert!(gap <= 10.0 * g.dt().max(g.h()) * spec.scale(), "u below psi by {gap}");
}

#[test]
fn reduite_of_smoothed_indicator_is_a_supersolution_within_the_band() {
    let m = 2.0;
    let g = Grid64::new_1d(30, 1.0, 16, 1.0 / 30.0).unwrap();
    let psi = Field64::from_fn(g, "psi", |x, t| {
        let dx = ((x[0] - 0.5).abs() - 0.1).max(0.0) / 0.1;
        let dt = ((t - 0.25).abs() - 0.05).max(0.0) / 0.1;
        let d = dx.max(dt);
        if d < 1.0 {
            (std::f64::consts::FRAC_PI_2 * d).cos().powi(2)
        } else {
            0.0
        }
    });
    let count = 6;
    let w = reduite_via_increasing_obstacles(&psi, m, count).unwrap();
    let scale = 1f64.max(psi.max_value());
    let r = discrete_residual(&w, m);
    let worst = (0..g.n_points()).filter(|&i| g.is_cell(i)).map(|i| r.values()[i]).fold(0.0, f64::min);
    assert!(worst >= -1e-8 * scale, "residual {worst}");
    // The last obstacle sits in the band above (√ψ - 1/√count)², so w can lie
    // below ψ by at most 2√ψ/√count plus the penalization error.
    let slack = 10.0 * g.dt().max(g.h()) * scale;
    for i in 0..g.n_points() {
        let p = psi.values()[i];
        let band = 2.0 * p.sqrt() / (count as f64).sqrt();
        assert!(w.values()[i] >= p - band - slack, "node {i}: {} vs psi {p}", w.values()[i]);
    }
}

fn compact(g: Grid64, cells: &[(usize, usize)]) -> CompactSet64 {
    CompactSet64::from_lattice(g, cells.iter().map(|&(n, x)| (n, x, 0))).unwrap()
}

#[test]
fn minimum_of_two_supersolutions_has_nonnegative_measure() {
    let m = 2.0;
    let g = Grid64::new_1d(16, 1.0, 12, 1.0 / 16.0).unwrap();
    let a = balayage(&compact(g, &[(5, 6)]), m, 5).unwrap();
    let b = balayage(&compact(g, &[(5, 10), (6, 10)]), m, 5).unwrap();
    let lower = a.zip_map(&b, "min", f64::min).unwrap();
    let mu = extract_riesz(&lower, m).unwrap();
    let (least, _) = mu.min_weight().unwrap();
    assert!(least >= -mu.neg_tol(), "weight {least} below -{}", mu.neg_tol());
}

#[test]
fn obstacle_family_measures_converge_to_the_balayage_measure() {
    let m = 2.0;
    let g = Grid64::new_1d(16, 1.0, 12, 1.0 / 16.0).unwrap();
    let k = compact(g, &[(5, 7), (5, 8)]);
    let fields = balayage_sequence(&k, m, 5).unwrap();
    let mus: Vec<Measure64> = fields.iter().map(|f| extract_riesz(f, m).unwrap()).collect();
    let limit = mus.last().unwrap().clone();
    let near = k.dilate(1);
    let opens: Vec<CellSet64> = vec![near.clone(), CellSet64::all(g)];
    let compacts: Vec<CellSet64> = vec![k.cells().clone(), near];
    let rep = weak_convergence_check(&mus, &limit, &opens, &compacts).unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn shrinking_five_three_one_family_reaches_its_limit() {
    let g = Grid64::new_1d(16, 1.0, 12, 1.0 / 16.0).unwrap();
    let row = |xs: std::ops::Range<usize>| compact(g, &xs.map(|x| (5, x)).collect::<Vec<_>>());
    let family = vec![row(6..11), row(7..10), row(8..9)];
    let out = check_property(&PropertyInstance::DecreasingCompacts { family, limit: row(8..9) }, 2.0, 5).unwrap();
    assert!(out.pass, "{out:?}");
    assert!(out.values.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-6)));
}

#[test]
fn caccioppoli_holds_for_a_balayage() {
    let (m, depth) = (2.0, 5);
    let g = Grid64::new_1d(16, 1.0, 12, 1.0 / 16.0).unwrap();
    let u = balayage(&compact(g, &[(5, 8)]), m, depth).unwrap();
    let bound = 1.0 + 0.5f64.powi(depth as i32);
    let rep = caccioppoli_check(&u, m, bound, &bump_cutoff(&g, [0.5, 0.0], 0.4)).unwrap();
    assert!(rep.pass && rep.lhs <= rep.rhs, "{rep:?}");
}

#[test]
fn scaled_down_measure_is_dominated() {
    let g = Grid64::new_1d(24, 1.0, 12, 0.02).unwrap();
    let cells = [(g.index(3, 8), 0.4), (g.index(5, 14), 0.2), (g.index(8, 11), 0.7)];
    let mu_u = Measure64::from_cells(g, cells).unwrap();
    let mu_v = mu_u.scaled(0.7);
    for m in [1.5, 2.0, 3.0] {
        let rep = measure_domination(&mu_u, &mu_v, m).unwrap();
        assert_eq!(rep.verdict, Verdict::Pass, "m={m}: {rep:?}");
    }
}
