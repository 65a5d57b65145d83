//! Solves `(diag(a) - coef * L_h) y = r` restricted to a set of free nodes, with
//! `y = 0` on every other node. `L_h` is the unscaled graph Laplacian
//! (`Σ_nb y_nb - 2d y`), so the operator is symmetric positive definite whenever
//! `a > 0` and `coef >= 0`.

use crate::grid::Grid;
use crate::Real;

#[derive(Debug)]
pub(crate) struct LinearFailure(pub String);

pub(crate) fn solve_spd<T: Real>(
    grid: &Grid<T>,
    free: &[bool],
    diag: &[T],
    coef: T,
    rhs: &[T],
) -> Result<Vec<T>, LinearFailure> {
    if grid.dim() == 1 {
        Ok(solve_runs_1d(grid, free, diag, coef, rhs))
    } else {
        pcg(grid, free, diag, coef, rhs)
    }
}

/// Thomas algorithm on each contiguous run of free nodes. The matrix is strictly
/// diagonally dominant, so no pivoting is needed.
fn solve_runs_1d<T: Real>(grid: &Grid<T>, free: &[bool], diag: &[T], coef: T, rhs: &[T]) -> Vec<T> {
    let n = grid.n_nodes();
    let mut y = vec![T::zero(); n];
    let two = T::of(2.0);
    let mut start = 0;
    while start < n {
        if !free[start] {
            start += 1;
            continue;
        }
        let mut end = start;
        while end < n && free[end] {
            end += 1;
        }
        let len = end - start;
        let mut c_prime = vec![T::zero(); len];
        let mut d_prime = vec![T::zero(); len];
        let off = -coef;
        for k in 0..len {
            let i = start + k;
            let b = diag[i] + two * coef;
            if k == 0 {
                c_prime[k] = off / b;
                d_prime[k] = rhs[i] / b;
            } else {
                let denom = b - off * c_prime[k - 1];
                c_prime[k] = off / denom;
                d_prime[k] = (rhs[i] - off * d_prime[k - 1]) / denom;
            }
        }
        y[end - 1] = d_prime[len - 1];
        for k in (0..len - 1).rev() {
            y[start + k] = d_prime[k] - c_prime[k] * y[start + k + 1];
        }
        start = end;
    }
    y
}

fn apply<T: Real>(grid: &Grid<T>, free: &[bool], diag: &[T], coef: T, y: &[T], out: &mut [T]) {
    let deg = T::of_usize(2 * grid.dim());
    for i in 0..y.len() {
        if !free[i] {
            out[i] = T::zero();
            continue;
        }
        let mut nb = T::zero();
        for j in grid.neighbors(i) {
            if free[j] {
                nb = nb + y[j];
            }
        }
        out[i] = diag[i] * y[i] + coef * (deg * y[i] - nb);
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// Jacobi-preconditioned conjugate gradients, relative tolerance `1e-12`.
fn pcg<T: Real>(
    grid: &Grid<T>,
    free: &[bool],
    diag: &[T],
    coef: T,
    rhs: &[T],
) -> Result<Vec<T>, LinearFailure> {
    let n = grid.n_nodes();
    let deg = T::of_usize(2 * grid.dim());
    let inv_m: Vec<T> = (0..n)
        .map(|i| {
            if free[i] {
                T::one() / (diag[i] + coef * deg)
            } else {
                T::zero()
            }
        })
        .collect();
    let mut x = vec![T::zero(); n];
    let mut r: Vec<T> = (0..n)
        .map(|i| if free[i] { rhs[i] } else { T::zero() })
        .collect();
    let r0 = dot(&r, &r).sqrt();
    if r0 == T::zero() {
        return Ok(x);
    }
    let tol = T::of(1e-12).max(T::tol_floor()) * r0;
    let mut z: Vec<T> = r.iter().zip(&inv_m).map(|(&a, &b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![T::zero(); n];
    let max_iter = 10 * n + 100;
    for _ in 0..max_iter {
        apply(grid, free, diag, coef, &p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > T::zero()) {
            return Err(LinearFailure(format!(
                "operator not positive definite (pAp = {pap})"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] = x[i] + alpha * p[i];
            r[i] = r[i] - alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= tol {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * inv_m[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(LinearFailure(format!(
        "CG did not reach relative tolerance in {max_iter} iterations"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense Gaussian elimination with partial pivoting as the reference.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for c in 0..n {
            let p = (c..n)
                .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
                .unwrap();
            a.swap(c, p);
            b.swap(c, p);
            for r in c + 1..n {
                let f = a[r][c] / a[c][c];
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
            x[r] = (b[r] - s) / a[r][r];
        }
        x
    }

    fn check_against_dense(grid: &Grid<f64>, free: &[bool]) {
        let n = grid.n_nodes();
        let diag: Vec<f64> = (0..n)
            .map(|i| 0.5 + (i as f64 * 0.37).sin().abs())
            .collect();
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).cos()).collect();
        let coef = 3.7;
        let y = solve_spd(grid, free, &diag, coef, &rhs).unwrap();
        let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        let mut a = vec![vec![0.0; idx.len()]; idx.len()];
        for (r, &i) in idx.iter().enumerate() {
            a[r][r] = diag[i] + coef * (2 * grid.dim()) as f64;
            for j in grid.neighbors(i) {
                if let Some(c) = idx.iter().position(|&q| q == j) {
                    a[r][c] -= coef;
                }
            }
        }
        let b: Vec<f64> = idx.iter().map(|&i| rhs[i]).collect();
        let x = dense_solve(a, b);
        for (r, &i) in idx.iter().enumerate() {
            assert!(
                (x[r] - y[i]).abs() < 1e-10 * (1.0 + x[r].abs()),
                "node {i}: {} vs {}",
                x[r],
                y[i]
            );
        }
        for i in 0..n {
            if !free[i] {
                assert_eq!(y[i], 0.0);
            }
        }
    }

    #[test]
    fn tridiagonal_runs_match_dense() {
        let g = Grid::<f64>::new_1d(12, 1.0, 2, 0.1).unwrap();
        let mut free: Vec<bool> = (0..13).map(|i| !g.is_boundary_node(i)).collect();
        check_against_dense(&g, &free);
        free[5] = false;
        free[6] = false;
        check_against_dense(&g, &free);
    }

    #[test]
    fn cg_matches_dense_in_2d() {
        let g = Grid::<f64>::new_2d(6, 5, 1.2, 1.0, 2, 0.1).unwrap();
        let mut free: Vec<bool> = (0..g.n_nodes()).map(|i| !g.is_boundary_node(i)).collect();
        check_against_dense(&g, &free);
        free[g.node_at(3, 2)] = false;
        check_against_dense(&g, &free);
    }

    #[test]
    fn linear_heat_step_self_test() {
        // m = 1: one backward-Euler step of the heat equation equals the linear solve.
        let g = Grid::<f64>::new_1d(20, 1.0, 2, 0.01).unwrap();
        let free: Vec<bool> = (0..21).map(|i| !g.is_boundary_node(i)).collect();
        let prev: Vec<f64> = (0..21)
            .map(|i| (std::f64::consts::PI * i as f64 / 20.0).sin())
            .collect();
        let coef = g.dt() / (g.h() * g.h());
        let y = solve_spd(&g, &free, &[1.0; 21], coef, &prev).unwrap();
        // Discrete eigenfunction: decay factor 1 / (1 + dt * λ_h).
        let lam = 4.0 / (g.h() * g.h()) * (std::f64::consts::PI * g.h() / 2.0).sin().powi(2);
        for i in 1..20 {
            assert!((y[i] - prev[i] / (1.0 + g.dt() * lam)).abs() < 1e-12);
        }
    }
}
