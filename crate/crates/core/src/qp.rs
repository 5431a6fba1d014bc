//! Dense convex quadratic programming.
//!
//! Solves
//!
//! ```text
//!     minimize    ½ θᵀHθ + fᵀθ
//!     subject to  Gθ ≤ h
//! ```
//!
//! with a primal active-set method. Multipliers follow the convention
//! `Hθ + f + Gᵀλ = 0`, `λ ≥ 0`.
//!
//! A cold start first tries the unconstrained minimizer. When that point is
//! infeasible an elastic phase-1 problem over `(θ, t)`,
//!
//! ```text
//!     minimize    t + ε/2 (‖θ − θ₀‖² + t²)
//!     subject to  Gθ − t ≤ h,  t ≥ 0
//! ```
//!
//! is solved by the same active-set iteration from the trivially feasible
//! point `(θ₀, max violation)`, re-anchoring `θ₀` at each round's result
//! until `t` reaches zero or the phase-1 multipliers form a Farkas
//! certificate of infeasibility.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Relative eigenvalue floor below which the Hessian is ridge-regularized.
pub const RIDGE_RELATIVE: f64 = 1e-10;
pub const DEFAULT_TOL: f64 = 1e-8;

/// Curvature of the phase-1 objective, relative to the problem scale.
const PHASE1_EPS: f64 = 1e-9;
const PHASE1_ROUNDS: usize = 200;
/// Step lengths closer than this are ties in the ratio test.
const RATIO_TIE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct QpProblem {
    /// Objective curvature `H` (n×n, symmetric PSD).
    pub hessian: DMatrix<f64>,
    /// Linear term `f` (n).
    pub linear: DVector<f64>,
    /// Inequality matrix `G` (m×n). May have zero rows.
    pub constraints: DMatrix<f64>,
    /// Inequality bounds `h` (m).
    pub bounds: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        constraints: DMatrix<f64>,
        bounds: DVector<f64>,
    ) -> Result<Self> {
        let p = Self {
            hessian,
            linear,
            constraints,
            bounds,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn unconstrained(hessian: DMatrix<f64>, linear: DVector<f64>) -> Result<Self> {
        let n = linear.len();
        Self::new(hessian, linear, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn n(&self) -> usize {
        self.linear.len()
    }

    pub fn m(&self) -> usize {
        self.bounds.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.linear.len();
        if n == 0 {
            return Err(Error::domain("n", "problem needs at least one variable"));
        }
        if self.hessian.shape() != (n, n) {
            return Err(Error::domain(
                "H",
                format!("expected {n}x{n}, got {:?}", self.hessian.shape()),
            ));
        }
        if self.constraints.ncols() != n || self.constraints.nrows() != self.bounds.len() {
            return Err(Error::domain(
                "G",
                format!(
                    "expected {}x{n}, got {:?}",
                    self.bounds.len(),
                    self.constraints.shape()
                ),
            ));
        }
        let all_finite = self.hessian.iter().all(|v| v.is_finite())
            && self.linear.iter().all(|v| v.is_finite())
            && self.constraints.iter().all(|v| v.is_finite())
            && self.bounds.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::domain("QpProblem", "non-finite entry"));
        }
        let scale = self.hessian.amax().max(f64::MIN_POSITIVE);
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(Error::domain("H", format!("not symmetric (max asymmetry {asym:e})")));
        }
        let eig = SymmetricEigen::new(self.hessian.clone());
        let min_eig = eig.eigenvalues.min();
        let norm = eig.eigenvalues.amax();
        if min_eig < -1e-8 * norm {
            return Err(Error::domain("H", format!("not PSD (min eigenvalue {min_eig:e})")));
        }
        Ok(())
    }

    pub fn objective(&self, theta: &DVector<f64>) -> f64 {
        0.5 * theta.dot(&(&self.hessian * theta)) + self.linear.dot(theta)
    }

    /// Largest constraint violation `max(0, max(Gθ − h))`.
    pub fn max_violation(&self, theta: &DVector<f64>) -> f64 {
        if self.m() == 0 {
            return 0.0;
        }
        (&self.constraints * theta - &self.bounds).max().max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

/// First-order optimality residuals of a candidate primal/dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `‖Hθ + f + Gᵀλ‖∞`.
    pub stationarity: f64,
    /// `max(0, max(Gθ − h))`.
    pub primal_feasibility: f64,
    /// `max |λᵢ (Gθ − h)ᵢ|`.
    pub complementary_slackness: f64,
    /// `max(0, −min λ)`.
    pub dual_feasibility: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_feasibility)
            .max(self.complementary_slackness)
            .max(self.dual_feasibility)
    }
}

/// Evaluates the KKT conditions of `p` at `(theta, lambda)` from scratch.
pub fn kkt_residuals(p: &QpProblem, theta: &DVector<f64>, lambda: &DVector<f64>) -> KktResiduals {
    let mut grad = &p.hessian * theta + &p.linear;
    if p.m() > 0 {
        grad += p.constraints.tr_mul(lambda);
    }
    let slack = &p.constraints * theta - &p.bounds;
    let comp = slack
        .iter()
        .zip(lambda.iter())
        .map(|(s, l)| (s * l).abs())
        .fold(0.0, f64::max);
    KktResiduals {
        stationarity: grad.amax(),
        primal_feasibility: if p.m() > 0 { slack.max().max(0.0) } else { 0.0 },
        complementary_slackness: comp,
        dual_feasibility: if p.m() > 0 { (-lambda.min()).max(0.0) } else { 0.0 },
    }
}

#[derive(Debug, Clone)]
pub struct QpOptions {
    pub tol: f64,
    /// Defaults to `50·(n + m)`.
    pub max_iter: Option<usize>,
    /// Starting point. Used directly when feasible within `tol`.
    pub warm_start: Option<DVector<f64>>,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: None,
            warm_start: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub theta: DVector<f64>,
    pub lambda: DVector<f64>,
    pub status: QpStatus,
    pub kkt: KktResiduals,
    pub objective: f64,
    pub iterations: usize,
    /// Ridge added to `H` before solving (0 when `H` was well conditioned).
    pub ridge: f64,
    /// Constraint indices active at the returned point.
    pub active_set: Vec<usize>,
    /// For infeasible problems: `y ≥ 0`, `Σy = 1` with `Gᵀy ≈ 0` and `hᵀy < 0`.
    pub certificate: Option<DVector<f64>>,
}

/// Stationary point of `½θᵀHθ + fᵀθ` subject to `G_a θ = h_a`.
///
/// Solves the bordered system `[H G_aᵀ; G_a 0][θ; λ] = [−f; h_a]` and fails
/// when it is numerically singular, which signals a degenerate active set.
pub fn solve_equality_kkt(
    hessian: &DMatrix<f64>,
    linear: &DVector<f64>,
    g_active: &DMatrix<f64>,
    h_active: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = linear.len();
    let k = h_active.len();
    let mut kkt = DMatrix::<f64>::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(hessian);
    if k > 0 {
        kkt.view_mut((n, 0), (k, n)).copy_from(g_active);
        kkt.view_mut((0, n), (n, k)).copy_from(&g_active.transpose());
    }
    let mut rhs = DVector::<f64>::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-linear));
    if k > 0 {
        rhs.rows_mut(n, k).copy_from(h_active);
    }

    let lu = kkt.full_piv_lu();
    let u = lu.u();
    let diag_max = u.diagonal().amax();
    let diag_min = u.diagonal().iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if !(diag_max > 0.0) || diag_min <= 1e-14 * diag_max {
        return Err(Error::Singular(format!(
            "KKT matrix with {k} active constraints is singular (pivot ratio {:e})",
            diag_min / diag_max
        )));
    }
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("KKT factorization failed".into()))?;
    Ok((sol.rows(0, n).into_owned(), sol.rows(n, k).into_owned()))
}

/// Solves `p` to tolerance `opts.tol`.
///
/// Infeasibility and the iteration cap are reported through
/// [`QpSolution::status`]; `Err` is reserved for malformed problems.
pub fn solve_qp(p: &QpProblem, opts: &QpOptions) -> Result<QpSolution> {
    p.validate()?;
    if !(opts.tol > 0.0) {
        return Err(Error::domain("tol", "must be > 0"));
    }
    let n = p.n();
    let m = p.m();
    let max_iter = opts.max_iter.unwrap_or(50 * (n + m));

    let (hessian, ridge) = regularized_hessian(&p.hessian);
    let work = QpProblem {
        hessian,
        linear: p.linear.clone(),
        constraints: p.constraints.clone(),
        bounds: p.bounds.clone(),
    };

    let finish = |theta: DVector<f64>,
                  lambda: DVector<f64>,
                  status: QpStatus,
                  iterations: usize,
                  active_set: Vec<usize>,
                  certificate: Option<DVector<f64>>| {
        let kkt = kkt_residuals(p, &theta, &lambda);
        QpSolution {
            objective: p.objective(&theta),
            theta,
            lambda,
            status,
            kkt,
            iterations,
            ridge,
            active_set,
            certificate,
        }
    };

    // Starting point: warm start if feasible, else the unconstrained minimizer.
    let mut start = match &opts.warm_start {
        Some(w) if w.len() == n && work.max_violation(w) <= opts.tol => Some(w.clone()),
        _ => None,
    };
    let mut iterations = 0;
    if start.is_none() {
        let empty_g = DMatrix::zeros(0, n);
        let empty_h = DVector::zeros(0);
        let (x0, _) = solve_equality_kkt(&work.hessian, &work.linear, &empty_g, &empty_h)?;
        if work.max_violation(&x0) <= opts.tol {
            start = Some(x0);
        } else {
            let anchor = opts.warm_start.clone().filter(|w| w.len() == n).unwrap_or(x0);
            match phase_one(&work, &anchor, opts.tol, max_iter)? {
                PhaseOne::Feasible(x, it) => {
                    iterations += it;
                    start = Some(x);
                }
                PhaseOne::Infeasible { theta, certificate, iterations: it } => {
                    let lambda = DVector::zeros(m);
                    return Ok(finish(
                        theta,
                        lambda,
                        QpStatus::Infeasible,
                        iterations + it,
                        Vec::new(),
                        Some(certificate),
                    ));
                }
                PhaseOne::MaxIterations(x, it) => {
                    let lambda = DVector::zeros(m);
                    return Ok(finish(x, lambda, QpStatus::MaxIterations, iterations + it, Vec::new(), None));
                }
            }
        }
    }
    let start = start.expect("start point resolved above");

    let out = active_set(&work, start, opts.tol, max_iter.saturating_sub(iterations), None)?;
    let status = if out.converged {
        QpStatus::Optimal
    } else {
        QpStatus::MaxIterations
    };
    Ok(finish(
        out.theta,
        out.lambda,
        status,
        iterations + out.iterations,
        out.working,
        None,
    ))
}

fn regularized_hessian(h: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let norm = eig.eigenvalues.amax();
    let floor = RIDGE_RELATIVE * norm.max(f64::MIN_POSITIVE);
    if eig.eigenvalues.min() < floor {
        let n = sym.nrows();
        (sym + DMatrix::<f64>::identity(n, n) * floor, floor)
    } else {
        (sym, 0.0)
    }
}

struct ActiveSetOutcome {
    theta: DVector<f64>,
    lambda: DVector<f64>,
    working: Vec<usize>,
    iterations: usize,
    converged: bool,
}

/// Builds an initial working set from constraints active at `theta`,
/// skipping rows linearly dependent on those already chosen.
fn initial_working_set(p: &QpProblem, theta: &DVector<f64>, tol: f64) -> Vec<usize> {
    let n = p.n();
    let slack = &p.constraints * theta - &p.bounds;
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut working = Vec::new();
    for i in 0..p.m() {
        if basis.len() == n {
            break;
        }
        let row_scale = p.constraints.row(i).amax().max(1.0);
        if slack[i].abs() > tol * row_scale {
            continue;
        }
        let mut v: DVector<f64> = p.constraints.row(i).transpose();
        let norm0 = v.norm();
        if norm0 == 0.0 {
            continue;
        }
        for q in &basis {
            let c = q.dot(&v);
            v.axpy(-c, q, 1.0);
        }
        let norm = v.norm();
        if norm > 1e-8 * norm0 {
            basis.push(v / norm);
            working.push(i);
        }
    }
    working
}

/// Primal active-set iterations from the feasible point `theta`.
///
/// `stop_below` ends the run as soon as the given coordinate drops to the
/// given level (phase 1 only needs a feasible point, not the optimum).
fn active_set(
    p: &QpProblem,
    mut theta: DVector<f64>,
    tol: f64,
    max_iter: usize,
    stop_below: Option<(usize, f64)>,
) -> Result<ActiveSetOutcome> {
    let n = p.n();
    let m = p.m();
    let mut working = initial_working_set(p, &theta, tol);
    let step_tol = 1e-9;
    // Once a zero-length step occurs, Bland's lowest-index rule is used for
    // both leaving and entering constraints so degenerate vertices cannot cycle.
    let mut degenerate = false;

    for iter in 0..max_iter.max(1) {
        let g_w = p.constraints.select_rows(working.iter());
        let h_w = p.bounds.select_rows(working.iter());
        let (target, lambda_w) = match solve_equality_kkt(&p.hessian, &p.linear, &g_w, &h_w) {
            Ok(sol) => sol,
            Err(Error::Singular(_)) if !working.is_empty() => {
                // Drop the most recently added row and retry.
                working.pop();
                continue;
            }
            Err(e) => return Err(e),
        };
        let step = &target - &theta;
        let scale = 1.0 + theta.amax();

        if step.amax() <= step_tol * scale {
            // Stationary on the working set: check multiplier signs.
            let mut drop: Option<(usize, f64)> = None;
            for (pos, &l) in lambda_w.iter().enumerate() {
                if l >= -tol {
                    continue;
                }
                let better = match drop {
                    None => true,
                    Some((best_pos, _)) if degenerate => working[pos] < working[best_pos],
                    Some((_, best)) => l < best,
                };
                if better {
                    drop = Some((pos, l));
                }
            }
            match drop {
                Some((pos, _)) => {
                    working.remove(pos);
                }
                None => {
                    let mut lambda = DVector::zeros(m);
                    for (pos, &i) in working.iter().enumerate() {
                        lambda[i] = lambda_w[pos].max(0.0);
                    }
                    theta = target;
                    return Ok(ActiveSetOutcome {
                        theta,
                        lambda,
                        working,
                        iterations: iter + 1,
                        converged: true,
                    });
                }
            }
            continue;
        }

        // Ratio test over constraints outside the working set.
        let mut alpha = 1.0;
        let mut blocking = None;
        if m > 0 {
            let gp = &p.constraints * &step;
            let gt = &p.constraints * &theta;
            let mut in_working = vec![false; m];
            for &i in &working {
                in_working[i] = true;
            }
            for i in 0..m {
                if in_working[i] || gp[i] <= 1e-14 * step.amax() * p.constraints.row(i).amax() {
                    continue;
                }
                let ratio = ((p.bounds[i] - gt[i]) / gp[i]).max(0.0);
                // ascending scan: near-ties keep the lowest index
                if ratio < alpha - RATIO_TIE {
                    alpha = ratio;
                    blocking = Some(i);
                } else if ratio < alpha && blocking.is_none() {
                    alpha = ratio;
                    blocking = Some(i);
                }
            }
        }
        theta.axpy(alpha, &step, 1.0);
        degenerate |= blocking.is_some() && alpha <= RATIO_TIE;
        if let Some((k, level)) = stop_below {
            if theta[k] <= level {
                return Ok(ActiveSetOutcome {
                    theta,
                    lambda: DVector::zeros(m),
                    working,
                    iterations: iter + 1,
                    converged: true,
                });
            }
        }
        if let Some(i) = blocking {
            working.push(i);
            if working.len() > n {
                // cannot happen with independent rows; guard against round-off
                working.remove(0);
            }
        }
    }

    let mut lambda = DVector::zeros(m);
    let g_w = p.constraints.select_rows(working.iter());
    let h_w = p.bounds.select_rows(working.iter());
    if let Ok((_, lambda_w)) = solve_equality_kkt(&p.hessian, &p.linear, &g_w, &h_w) {
        for (pos, &i) in working.iter().enumerate() {
            lambda[i] = lambda_w[pos].max(0.0);
        }
    }
    Ok(ActiveSetOutcome {
        theta,
        lambda,
        working,
        iterations: max_iter,
        converged: false,
    })
}

enum PhaseOne {
    Feasible(DVector<f64>, usize),
    Infeasible {
        theta: DVector<f64>,
        certificate: DVector<f64>,
        iterations: usize,
    },
    MaxIterations(DVector<f64>, usize),
}

fn phase_one(p: &QpProblem, anchor: &DVector<f64>, tol: f64, max_iter: usize) -> Result<PhaseOne> {
    let n = p.n();
    let m = p.m();
    // Normalize rows so t measures violation on a common scale.
    let row_norms: Vec<f64> = (0..m)
        .map(|i| p.constraints.row(i).norm().max(f64::MIN_POSITIVE))
        .collect();

    let mut g = DMatrix::<f64>::zeros(m + 1, n + 1);
    let mut b = DVector::<f64>::zeros(m + 1);
    for i in 0..m {
        for j in 0..n {
            g[(i, j)] = p.constraints[(i, j)] / row_norms[i];
        }
        g[(i, n)] = -1.0;
        b[i] = p.bounds[i] / row_norms[i];
    }
    g[(m, n)] = -1.0;
    let g_theta = g.view((0, 0), (m, n)).into_owned();
    let b_theta = b.rows(0, m).into_owned();

    let eps = PHASE1_EPS;
    let hess = DMatrix::<f64>::identity(n + 1, n + 1) * eps;
    let mut anchor = anchor.clone();
    let mut used = 0;

    // The proximal term keeps each round bounded; re-anchoring at the previous
    // round's point lets the iterate travel arbitrarily far.
    for _round in 0..PHASE1_ROUNDS {
        let mut lin = DVector::<f64>::zeros(n + 1);
        for j in 0..n {
            lin[j] = -eps * anchor[j];
        }
        lin[n] = 1.0;
        let slack0 = (&g_theta * &anchor - &b_theta).max().max(0.0);
        let mut x0 = DVector::<f64>::zeros(n + 1);
        x0.rows_mut(0, n).copy_from(&anchor);
        x0[n] = slack0;

        let aux = QpProblem {
            hessian: hess.clone(),
            linear: lin,
            constraints: g.clone(),
            bounds: b.clone(),
        };
        let out = active_set(&aux, x0, tol * 1e-3, max_iter.saturating_sub(used), Some((n, tol * 1e-2)))?;
        used += out.iterations;
        let theta: DVector<f64> = out.theta.rows(0, n).into_owned();
        if !out.converged {
            return Ok(PhaseOne::MaxIterations(theta, used));
        }
        if out.theta[n] <= tol && p.max_violation(&theta) <= tol * (1.0 + p.bounds.amax()) {
            return Ok(PhaseOne::Feasible(theta, used));
        }

        // Farkas check on the normalized rows: y ≥ 0, Σy = 1, Gᵀy ≈ 0, hᵀy < 0.
        let y = out.lambda.rows(0, m).into_owned();
        let total = y.sum();
        if total > 0.0 {
            let y = y / total;
            let residual = g_theta.tr_mul(&y).amax();
            if residual <= 1e-7 && b_theta.dot(&y) < -tol {
                let mut cert = DVector::<f64>::zeros(m);
                for i in 0..m {
                    cert[i] = y[i] / row_norms[i];
                }
                let s = cert.sum();
                return Ok(PhaseOne::Infeasible {
                    theta,
                    certificate: cert / s,
                    iterations: used,
                });
            }
        }
        if (&theta - &anchor).amax() <= 1e-14 * (1.0 + anchor.amax()) {
            // No movement and no certificate: treat as infeasible with the best multipliers.
            let mut cert = DVector::<f64>::zeros(m);
            for i in 0..m {
                cert[i] = out.lambda[i] / row_norms[i];
            }
            let s = cert.sum().max(f64::MIN_POSITIVE);
            return Ok(PhaseOne::Infeasible {
                theta,
                certificate: cert / s,
                iterations: used,
            });
        }
        anchor = theta;
    }
    Ok(PhaseOne::MaxIterations(anchor, used))
}
