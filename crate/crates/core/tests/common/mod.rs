//! Test-only oracles, independent of the library's solution paths.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use torquesense::qp::QpProblem;

/// Dense Gaussian elimination with partial pivoting on plain vectors.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-13 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

pub struct OracleSolution {
    pub theta: Vec<f64>,
    pub objective: f64,
}

/// Exhaustive active-set enumeration: solve the equality-constrained KKT
/// system for every subset of constraints, keep primal- and dual-feasible
/// candidates, return the one with the lowest objective.
pub fn enumerate_active_sets(p: &QpProblem) -> Option<OracleSolution> {
    let n = p.n();
    let m = p.m();
    let h = |i: usize, j: usize| p.hessian[(i, j)];
    let g = |i: usize, j: usize| p.constraints[(i, j)];
    let mut best: Option<OracleSolution> = None;
    for mask in 0u32..(1u32 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = active.len();
        if k > n {
            continue;
        }
        let size = n + k;
        let mut a = vec![vec![0.0; size]; size];
        let mut rhs = vec![0.0; size];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = h(i, j);
            }
            rhs[i] = -p.linear[i];
        }
        for (r, &c) in active.iter().enumerate() {
            for j in 0..n {
                a[n + r][j] = g(c, j);
                a[j][n + r] = g(c, j);
            }
            rhs[n + r] = p.bounds[c];
        }
        let Some(x) = gauss_solve(a, rhs) else { continue };
        let theta = &x[..n];
        let lambda = &x[n..];
        if lambda.iter().any(|&l| l < -1e-10) {
            continue;
        }
        let feasible = (0..m).all(|i| {
            let s: f64 = (0..n).map(|j| g(i, j) * theta[j]).sum();
            s - p.bounds[i] <= 1e-10
        });
        if !feasible {
            continue;
        }
        let mut obj = 0.0;
        for i in 0..n {
            obj += p.linear[i] * theta[i];
            for j in 0..n {
                obj += 0.5 * theta[i] * h(i, j) * theta[j];
            }
        }
        if best.as_ref().map_or(true, |b| obj < b.objective) {
            best = Some(OracleSolution {
                theta: theta.to_vec(),
                objective: obj,
            });
        }
    }
    best
}

/// Random strictly convex QP with a known feasible point `x0`.
/// Roughly a third of the constraints pass through `x0`.
pub fn random_qp(seed: u64) -> (QpProblem, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=6);
    let m = rng.random_range(0..=10);
    let u = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..1.0);
    let factor = DMatrix::from_fn(n, n, |_, _| u(&mut rng));
    let hessian = factor.transpose() * &factor + DMatrix::identity(n, n) * 0.1;
    let linear = DVector::from_fn(n, |_, _| 3.0 * u(&mut rng));
    let constraints = DMatrix::from_fn(m, n, |_, _| u(&mut rng));
    let x0 = DVector::from_fn(n, |_, _| u(&mut rng));
    let mut bounds = &constraints * &x0;
    for i in 0..m {
        if rng.random_bool(0.66) {
            bounds[i] += rng.random_range(0.0..1.0);
        }
    }
    (
        QpProblem::new(hessian, linear, constraints, bounds).unwrap(),
        x0,
    )
}
