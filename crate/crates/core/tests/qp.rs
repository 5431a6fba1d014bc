mod common;

use common::{enumerate_active_sets, gauss_solve, random_qp};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use torquesense::qp::{kkt_residuals, solve_equality_kkt, solve_qp, QpOptions, QpProblem, QpStatus};

#[test]
fn random_qps_match_enumeration() {
    for seed in 0..100 {
        let (p, _) = random_qp(seed);
        let sol = solve_qp(&p, &QpOptions::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal, "seed {seed}");
        let oracle = enumerate_active_sets(&p).expect("feasible by construction");
        for (a, b) in sol.theta.iter().zip(&oracle.theta) {
            assert!((a - b).abs() <= 1e-8, "seed {seed}: {a} vs {b}");
        }
        assert!((sol.objective - oracle.objective).abs() <= 1e-8 * (1.0 + oracle.objective.abs()));
        let kkt = kkt_residuals(&p, &sol.theta, &sol.lambda);
        assert!(kkt.max() <= 1e-8, "seed {seed}: {kkt:?}");
    }
}

/// Random feasible point: walk from the known feasible `x0` along a random
/// direction by a uniform fraction of the largest feasible step.
fn feasible_sample(p: &QpProblem, x0: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let d = DVector::from_fn(p.n(), |_, _| rng.random_range(-1.0..1.0));
    let gd = &p.constraints * &d;
    let slack = &p.bounds - &p.constraints * x0;
    let mut max_step: f64 = 3.0;
    for i in 0..p.m() {
        if gd[i] > 0.0 {
            max_step = max_step.min(slack[i].max(0.0) / gd[i]);
        }
    }
    x0 + d * (max_step * rng.random_range(0.0..1.0))
}

#[test]
fn optimum_beats_random_feasible_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 200..220 {
        let (p, x0) = random_qp(seed);
        let sol = solve_qp(&p, &QpOptions::default()).unwrap();
        for _ in 0..1000 {
            let x = feasible_sample(&p, &x0, &mut rng);
            assert!(p.max_violation(&x) <= 1e-12);
            assert!(sol.objective <= p.objective(&x) + 1e-10, "seed {seed}");
        }
    }
}

#[test]
fn warm_start_is_idempotent() {
    for seed in 300..340 {
        let (p, _) = random_qp(seed);
        let cold = solve_qp(&p, &QpOptions::default()).unwrap();
        let warm = solve_qp(
            &p,
            &QpOptions {
                warm_start: Some(cold.theta.clone()),
                ..QpOptions::default()
            },
        )
        .unwrap();
        assert_eq!(warm.status, QpStatus::Optimal);
        assert!((&warm.theta - &cold.theta).amax() <= 1e-10, "seed {seed}");
    }
}

#[test]
fn duplicate_constraint_rows_do_not_move_solution() {
    for seed in 400..440 {
        let (p, _) = random_qp(seed);
        if p.m() == 0 {
            continue;
        }
        let base = solve_qp(&p, &QpOptions::default()).unwrap();
        let m = p.m();
        let n = p.n();
        let dup = seed as usize % m;
        let g = DMatrix::from_fn(m + 1, n, |i, j| p.constraints[(if i == m { dup } else { i }, j)]);
        let h = DVector::from_fn(m + 1, |i, _| p.bounds[if i == m { dup } else { i }]);
        let q = QpProblem::new(p.hessian.clone(), p.linear.clone(), g, h).unwrap();
        let sol = solve_qp(&q, &QpOptions::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((&sol.theta - &base.theta).amax() <= 1e-9, "seed {seed}");
    }
}

#[test]
fn solve_is_deterministic() {
    let (p, _) = random_qp(7);
    let a = solve_qp(&p, &QpOptions::default()).unwrap();
    let b = solve_qp(&p, &QpOptions::default()).unwrap();
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.lambda, b.lambda);
}

#[test]
fn equality_kkt_matches_bordered_dense_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let m = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let h = m.transpose() * &m + DMatrix::identity(3, 3) * 0.5;
        let f = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let g = DMatrix::from_fn(1, 3, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0));
        let (theta, lambda) = solve_equality_kkt(&h, &f, &g, &b).unwrap();

        let mut a = vec![vec![0.0; 4]; 4];
        let mut rhs = vec![0.0; 4];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = h[(i, j)];
            }
            a[3][i] = g[(0, i)];
            a[i][3] = g[(0, i)];
            rhs[i] = -f[i];
        }
        rhs[3] = b[0];
        let x = gauss_solve(a, rhs).unwrap();
        for i in 0..3 {
            assert!((theta[i] - x[i]).abs() < 1e-10);
        }
        assert!((lambda[0] - x[3]).abs() < 1e-10);
    }
}

#[test]
fn infeasible_system_is_flagged() {
    // x₁ + x₂ ≤ −1 with x₁ ≥ 0, x₂ ≥ 0
    let p = QpProblem::new(
        DMatrix::identity(2, 2),
        DVector::from_column_slice(&[-1.0, -1.0]),
        DMatrix::from_row_slice(3, 2, &[1.0, 1.0, -1.0, 0.0, 0.0, -1.0]),
        DVector::from_column_slice(&[-1.0, 0.0, 0.0]),
    )
    .unwrap();
    let sol = solve_qp(&p, &QpOptions::default()).unwrap();
    assert_eq!(sol.status, QpStatus::Infeasible);
    let y = sol.certificate.unwrap();
    assert!(p.constraints.tr_mul(&y).amax() < 1e-6);
    assert!(p.bounds.dot(&y) < 0.0);
}
