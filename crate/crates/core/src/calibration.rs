//! Polynomial calibration of the photo-reflector array.
//!
//! Each frame maps to a feature row of per-channel voltage powers
//! (descending powers, channels ascending within a power, bias last) and the
//! torque estimate is the row's dot product with the coefficient vector.
//!
//! Two fits are provided: ordinary least squares, and a constrained fit that
//! adds a penalty on the output variation over quiet (no-load) rows while
//! holding every training residual inside ±`e_max`.
//!
//! Both fits are solved in orthonormal coordinates from a pivoted QR of the
//! column-scaled design matrix, which keeps the QP Hessian close to the
//! identity even though the 25 features are strongly collinear.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::qp::{solve_qp, QpOptions, QpProblem, QpStatus};
use crate::sensor_sim::{SensorFrame, N_CHANNELS};
use crate::{Error, Result};

/// Default absolute error bound: 0.2 % of full scale.
pub const DEFAULT_E_MAX: f64 = 0.002 * crate::FULL_SCALE_NM;
pub const DEFAULT_TAU_TH: f64 = 0.1;
pub const DEFAULT_MIN_QUIET: usize = 500;
pub const DEFAULT_LAMBDA_V: f64 = 10.0;

/// Singular values below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-10;
const RIDGE_FRACTION: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSpec {
    pub n_channels: usize,
    /// Exponents in column order, e.g. `[3, 2, 1]`.
    pub powers: Vec<i32>,
    pub include_bias: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            n_channels: N_CHANNELS,
            powers: vec![3, 2, 1],
            include_bias: true,
        }
    }
}

impl FeatureSpec {
    pub fn dim(&self) -> usize {
        self.n_channels * self.powers.len() + usize::from(self.include_bias)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 || self.n_channels > N_CHANNELS {
            return Err(Error::Config(format!(
                "n_channels must lie in 1..={N_CHANNELS}, got {}",
                self.n_channels
            )));
        }
        if self.powers.is_empty() || self.powers.iter().any(|&p| p < 1) {
            return Err(Error::Config("powers must be a non-empty list of positive exponents".into()));
        }
        Ok(())
    }

    /// Writes the feature row for voltages `v` into `out` (length [`dim`](Self::dim)).
    pub fn fill_row(&self, v: &[f64], out: &mut [f64]) {
        let mut k = 0;
        for &p in &self.powers {
            for &x in &v[..self.n_channels] {
                out[k] = x.powi(p);
                k += 1;
            }
        }
        if self.include_bias {
            out[k] = 1.0;
        }
    }

    pub fn row(&self, v: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.fill_row(v, out.as_mut_slice());
        out
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationDataset {
    pub frames: Vec<SensorFrame>,
    /// Reference torque, N·m.
    pub y: Vec<f64>,
    /// Explicit quiet rows; detected from `y` when absent.
    pub quiet_mask: Option<Vec<bool>>,
}

impl CalibrationDataset {
    pub fn new(frames: Vec<SensorFrame>, y: Vec<f64>) -> Result<Self> {
        let d = Self {
            frames,
            y,
            quiet_mask: None,
        };
        d.validate()?;
        Ok(d)
    }

    /// Uses each frame's reference torque as the target.
    pub fn from_frames(frames: Vec<SensorFrame>) -> Result<Self> {
        let y = frames
            .iter()
            .enumerate()
            .map(|(k, f)| {
                f.tau_ref
                    .ok_or_else(|| Error::Data(format!("frame {k} has no reference torque")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames, y)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.y.len() {
            return Err(Error::Data(format!(
                "{} frames but {} reference values",
                self.frames.len(),
                self.y.len()
            )));
        }
        if let Some(mask) = &self.quiet_mask {
            if mask.len() != self.frames.len() {
                return Err(Error::Data("quiet mask length differs from frame count".into()));
            }
        }
        for (k, w) in self.frames.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(Error::Data(format!("timestamps not increasing at frame {}", k + 1)));
            }
        }
        if let Some(k) = self.y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite reference torque at frame {k}")));
        }
        Ok(())
    }
}

/// Feature matrix, one row per frame.
pub fn build_design_matrix(d: &CalibrationDataset, s: &FeatureSpec) -> Result<DMatrix<f64>> {
    s.validate()?;
    let n = d.frames.len();
    let dim = s.dim();
    let mut a = DMatrix::zeros(n, dim);
    let mut row = vec![0.0; dim];
    for (k, f) in d.frames.iter().enumerate() {
        if let Some(c) = f.v[..s.n_channels].iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite voltage v{} at frame {k}", c + 1)));
        }
        s.fill_row(&f.v, &mut row);
        for (j, &x) in row.iter().enumerate() {
            a[(k, j)] = x;
        }
    }
    Ok(a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    LeastSquares,
    Qp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReport {
    pub rmse: f64,
    pub max_abs_error: f64,
    /// Sample std of the estimate over the quiet rows, when known.
    pub quiet_std: Option<f64>,
    /// Set when the design was rank deficient and a ridge term was added.
    pub ridge: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub theta: Vec<f64>,
    pub spec: FeatureSpec,
    pub e_max: f64,
    pub gamma: f64,
    pub method: Method,
    pub fit_report: FitReport,
}

impl CalibrationModel {
    pub fn theta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta)
    }

    pub fn predict_voltages(&self, v: &[f64]) -> f64 {
        let mut row = vec![0.0; self.spec.dim()];
        self.spec.fill_row(v, &mut row);
        row.iter().zip(&self.theta).map(|(a, b)| a * b).sum()
    }
}

/// Torque estimate for one frame.
pub fn predict(model: &CalibrationModel, frame: &SensorFrame) -> f64 {
    model.predict_voltages(&frame.v)
}

/// Maximal runs of `|y| ≤ tau_th` lasting at least `min_duration` samples.
pub fn detect_quiet_segment(y: &[f64], tau_th: f64, min_duration: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut start = None;
    for k in 0..=y.len() {
        let quiet = k < y.len() && y[k].abs() <= tau_th;
        match (quiet, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                if k - s >= min_duration.max(1) {
                    out.extend(s..k);
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// Quiet rows of `a` with their column means removed.
pub fn center_quiet_rows(a: &DMatrix<f64>, quiet: &[usize]) -> Result<DMatrix<f64>> {
    if quiet.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 quiet rows to measure output variation, got {}",
            quiet.len()
        )));
    }
    if let Some(&k) = quiet.iter().find(|&&k| k >= a.nrows()) {
        return Err(Error::Data(format!("quiet index {k} outside {} rows", a.nrows())));
    }
    let mut a0 = a.select_rows(quiet.iter());
    for mut col in a0.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    Ok(a0)
}

fn residual_stats(a: &DMatrix<f64>, y: &DVector<f64>, theta: &DVector<f64>) -> (f64, f64) {
    let r = a * theta - y;
    let rmse = (r.norm_squared() / r.len().max(1) as f64).sqrt();
    (rmse, r.amax())
}

/// Sample standard deviation.
pub fn sample_std(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    // shifted by the first sample so constant records give exactly zero
    let x0 = x[0];
    let mean = x.iter().map(|v| v - x0).sum::<f64>() / x.len() as f64;
    let ss: f64 = x.iter().map(|v| (v - x0 - mean).powi(2)).sum();
    (ss / (x.len() - 1) as f64).sqrt()
}

/// Precomputed factorization shared by the LS fit and every γ of a QP sweep.
///
/// With `Ã = A·D` (unit-norm columns) and the pivoted factorization
/// `Ã·P = Q·R`, the coefficients are parameterized as `θ = T·w`,
/// `T = D·P·R⁻¹·√N`, so that `A·θ = W·w` with `W = √N·Q` and `WᵀW = N·I`.
/// Columns past the numerical rank are pinned to zero.
pub struct CalibrationProblem {
    a: DMatrix<f64>,
    y: DVector<f64>,
    w: DMatrix<f64>,
    t: DMatrix<f64>,
    rank: usize,
}

impl CalibrationProblem {
    pub fn new(a: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let (n, dim) = a.shape();
        if y.len() != n {
            return Err(Error::Data(format!("design has {n} rows but target has {}", y.len())));
        }
        if n < dim {
            return Err(Error::Data(format!("need at least {dim} samples, got {n}")));
        }
        if a.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in design or target".into()));
        }
        let scale: Vec<f64> = a
            .column_iter()
            .map(|c| {
                let norm = c.norm();
                if norm > 0.0 {
                    1.0 / norm
                } else {
                    1.0
                }
            })
            .collect();
        let mut scaled = a.clone();
        for (j, mut c) in scaled.column_iter_mut().enumerate() {
            c *= scale[j];
        }
        let qr = scaled.col_piv_qr();
        let q = qr.q();
        let r = qr.r();
        let mut order = DMatrix::from_fn(1, dim, |_, j| j as f64);
        qr.p().permute_columns(&mut order);
        let order: Vec<usize> = order.iter().map(|&x| x as usize).collect();

        let diag = r.diagonal().map(f64::abs);
        let r_max = diag.max();
        let rank = diag.iter().position(|&d| !(d > RANK_TOL * r_max)).unwrap_or(dim);
        let root_n = (n as f64).sqrt();
        let w = q.columns(0, rank) * root_n;
        let r11 = r.view((0, 0), (rank, rank)).into_owned();
        let r_inv = r11
            .solve_upper_triangular(&DMatrix::identity(rank, rank))
            .ok_or_else(|| Error::Singular("triangular factor has a zero pivot".into()))?;
        let mut t = DMatrix::zeros(dim, rank);
        for (i, &col) in order.iter().take(rank).enumerate() {
            for c in 0..rank {
                t[(col, c)] = scale[col] * r_inv[(i, c)] * root_n;
            }
        }
        Ok(Self {
            a,
            y,
            w,
            t,
            rank,
        })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn n_samples(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.a.ncols()
    }

    fn report(&self, theta: &DVector<f64>, ridge: Option<f64>) -> FitReport {
        let (rmse, max_abs_error) = residual_stats(&self.a, &self.y, theta);
        FitReport {
            rmse,
            max_abs_error,
            quiet_std: None,
            ridge,
        }
    }

    /// Unconstrained least squares. A rank-deficient design falls back to a
    /// ridge solution flagged in the report.
    pub fn least_squares(&self, spec: &FeatureSpec) -> Result<CalibrationModel> {
        let (theta, ridge) = if self.is_full_rank() {
            let coords = self.w.tr_mul(&self.y) / self.n_samples() as f64;
            (&self.t * coords, None)
        } else {
            let mut ata = self.a.tr_mul(&self.a);
            let rho = RIDGE_FRACTION * ata.trace() / ata.nrows() as f64;
            for i in 0..ata.nrows() {
                ata[(i, i)] += rho;
            }
            let aty = self.a.tr_mul(&self.y);
            let theta = ata
                .cholesky()
                .ok_or_else(|| Error::Singular("ridge normal equations not positive definite".into()))?
                .solve(&aty);
            (theta, Some(rho))
        };
        Ok(CalibrationModel {
            fit_report: self.report(&theta, ridge),
            theta: theta.iter().copied().collect(),
            spec: spec.clone(),
            e_max: f64::INFINITY,
            gamma: 0.0,
            method: Method::LeastSquares,
        })
    }

    /// Penalized fit with hard residual bounds.
    ///
    /// `quiet_centered` is the centered quiet block of the design (see
    /// [`center_quiet_rows`]); an empty block reduces this to constrained LS.
    pub fn qp(
        &self,
        spec: &FeatureSpec,
        quiet_centered: &DMatrix<f64>,
        e_max: f64,
        gamma: f64,
    ) -> Result<CalibrationModel> {
        if !(e_max > 0.0) {
            return Err(Error::domain("e_max", format!("must be > 0, got {e_max}")));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::domain("gamma", format!("must be finite and >= 0, got {gamma}")));
        }
        if quiet_centered.nrows() > 0 && quiet_centered.ncols() != self.a.ncols() {
            return Err(Error::Data("quiet block column count differs from design".into()));
        }
        let n = self.n_samples();
        let nf = n as f64;
        let r = self.rank;

        let mut hessian = DMatrix::<f64>::identity(r, r) * 2.0;
        if quiet_centered.nrows() > 0 && gamma > 0.0 {
            let b = quiet_centered * &self.t;
            hessian += b.tr_mul(&b) * (2.0 * gamma / nf);
        }
        let hessian = (&hessian + hessian.transpose()) * 0.5;
        let linear = self.w.tr_mul(&self.y) * (-2.0 / nf);

        let mut g = DMatrix::zeros(2 * n, r);
        g.view_mut((0, 0), (n, r)).copy_from(&self.w);
        g.view_mut((n, 0), (n, r)).copy_from(&(-&self.w));
        let mut h = DVector::zeros(2 * n);
        for k in 0..n {
            h[k] = self.y[k] + e_max;
            h[n + k] = -self.y[k] + e_max;
        }

        // Least-squares coordinates are the natural warm start when they
        // already meet the bound.
        let ls_coords = self.w.tr_mul(&self.y) / nf;
        let ls_max = (&self.w * &ls_coords - &self.y).amax();
        let warm_start = (ls_max <= e_max).then_some(ls_coords);

        let problem = QpProblem::new(hessian, linear, g, h)?;
        let sol = solve_qp(
            &problem,
            &QpOptions {
                warm_start,
                ..QpOptions::default()
            },
        )?;
        match sol.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => {
                return Err(Error::Infeasible(format!(
                    "no coefficients keep all {n} residuals within e_max = {e_max} N·m \
                     (least-squares max residual {ls_max:.6} N·m); try a larger e_max"
                )))
            }
            QpStatus::MaxIterations => {
                return Err(Error::Infeasible(format!(
                    "QP did not converge in {} iterations (gamma = {gamma})",
                    sol.iterations
                )))
            }
        }
        let theta = &self.t * &sol.theta;
        Ok(CalibrationModel {
            fit_report: self.report(&theta, None),
            theta: theta.iter().copied().collect(),
            spec: spec.clone(),
            e_max,
            gamma,
            method: Method::Qp,
        })
    }
}

/// Least-squares fit of `y ≈ A·θ`. Uses the default feature layout label;
/// callers with a custom layout should go through [`CalibrationProblem`].
pub fn fit_least_squares(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<CalibrationModel> {
    CalibrationProblem::new(a.clone(), y.clone())?.least_squares(&spec_for_dim(a.ncols()))
}

/// Penalized, error-bounded fit; see [`CalibrationProblem::qp`].
pub fn fit_qp(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    quiet_centered: &DMatrix<f64>,
    e_max: f64,
    gamma: f64,
) -> Result<CalibrationModel> {
    CalibrationProblem::new(a.clone(), y.clone())?.qp(&spec_for_dim(a.ncols()), quiet_centered, e_max, gamma)
}

/// Layout label for a bare matrix: the default spec when the width matches,
/// otherwise a linear-plus-bias layout of the right width.
fn spec_for_dim(dim: usize) -> FeatureSpec {
    let default = FeatureSpec::default();
    if default.dim() == dim {
        return default;
    }
    for powers in [vec![3, 2, 1], vec![2, 1], vec![1]] {
        for bias in [true, false] {
            let per = powers.len();
            let rest = dim - usize::from(bias).min(dim);
            if rest % per == 0 && rest / per >= 1 && rest / per <= N_CHANNELS {
                return FeatureSpec {
                    n_channels: rest / per,
                    powers,
                    include_bias: bias,
                };
            }
        }
    }
    FeatureSpec {
        n_channels: dim.min(N_CHANNELS),
        powers: vec![1],
        include_bias: false,
    }
}

/// `n` log-spaced points over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

pub fn default_gamma_grid() -> Vec<f64> {
    log_grid(1e-4, 1e4, 16)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaEval {
    pub gamma: f64,
    /// `None` when the fit failed; the reason is in `status`.
    pub score: Option<f64>,
    pub rmse: Option<f64>,
    pub quiet_var: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct GammaSelection {
    pub gamma: f64,
    pub index: usize,
    /// The grid had a single point.
    pub forced: bool,
    pub table: Vec<GammaEval>,
    pub model: CalibrationModel,
}

/// Quiet-row estimate variance (sample) of `theta`.
fn quiet_variance(a: &DMatrix<f64>, quiet: &[usize], theta: &DVector<f64>) -> f64 {
    let est: Vec<f64> = quiet.iter().map(|&k| a.row(k).transpose().dot(theta)).collect();
    sample_std(&est).powi(2)
}

/// Picks γ from `grid` minimizing `RMSE² + lambda_v·Var(quiet estimate)`.
///
/// Ties within 1e-9 relative go to the smaller γ.
pub fn select_gamma_on(
    problem: &CalibrationProblem,
    spec: &FeatureSpec,
    quiet: &[usize],
    e_max: f64,
    grid: &[f64],
    lambda_v: f64,
) -> Result<GammaSelection> {
    if grid.is_empty() {
        return Err(Error::Config("gamma grid is empty".into()));
    }
    if !(lambda_v >= 0.0) {
        return Err(Error::domain("lambda_v", format!("must be >= 0, got {lambda_v}")));
    }
    let quiet_centered = if quiet.len() >= 2 {
        center_quiet_rows(problem.design(), quiet)?
    } else {
        DMatrix::zeros(0, problem.design().ncols())
    };
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&i, &j| grid[i].total_cmp(&grid[j]));

    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64, CalibrationModel)> = None;
    for &i in &order {
        let gamma = grid[i];
        match problem.qp(spec, &quiet_centered, e_max, gamma) {
            Ok(mut model) => {
                let theta = model.theta_vector();
                let var = if quiet.len() >= 2 {
                    quiet_variance(problem.design(), quiet, &theta)
                } else {
                    0.0
                };
                model.fit_report.quiet_std = (quiet.len() >= 2).then(|| var.sqrt());
                let rmse = model.fit_report.rmse;
                let score = rmse * rmse + lambda_v * var;
                table.push(GammaEval {
                    gamma,
                    score: Some(score),
                    rmse: Some(rmse),
                    quiet_var: Some(var),
                    status: "ok".into(),
                });
                let better = match &best {
                    None => true,
                    Some((_, s, _)) => score < s - 1e-9 * s.abs(),
                };
                if better {
                    best = Some((i, score, model));
                }
            }
            Err(e @ (Error::Infeasible(_) | Error::Singular(_))) => table.push(GammaEval {
                gamma,
                score: None,
                rmse: None,
                quiet_var: None,
                status: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    let Some((index, _, model)) = best else {
        let lines: Vec<String> = table.iter().map(|e| format!("gamma {:e}: {}", e.gamma, e.status)).collect();
        return Err(Error::Infeasible(format!(
            "every gamma on the grid failed:\n{}",
            lines.join("\n")
        )));
    };
    Ok(GammaSelection {
        gamma: grid[index],
        index,
        forced: grid.len() == 1,
        table,
        model,
    })
}

/// Matrix-level form of [`select_gamma_on`]. Quiet rows are recovered as the
/// rows of `a` whose centered copy appears in `quiet_centered`, so callers
/// that already hold the index set should prefer [`select_gamma_on`].
pub fn select_gamma(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    quiet: &[usize],
    e_max: f64,
    grid: &[f64],
    lambda_v: f64,
) -> Result<GammaSelection> {
    let problem = CalibrationProblem::new(a.clone(), y.clone())?;
    select_gamma_on(&problem, &spec_for_dim(a.ncols()), quiet, e_max, grid, lambda_v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSettings {
    pub features: FeatureSpec,
    /// Error bound as a fraction of full scale.
    pub e_max_fraction: f64,
    pub full_scale: f64,
    pub tau_th: f64,
    pub min_quiet_samples: usize,
    pub gamma_grid: Vec<f64>,
    pub lambda_v: f64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            features: FeatureSpec::default(),
            e_max_fraction: 0.002,
            full_scale: crate::FULL_SCALE_NM,
            tau_th: DEFAULT_TAU_TH,
            min_quiet_samples: DEFAULT_MIN_QUIET,
            gamma_grid: default_gamma_grid(),
            lambda_v: DEFAULT_LAMBDA_V,
        }
    }
}

impl CalibrationSettings {
    pub fn e_max(&self) -> f64 {
        self.e_max_fraction * self.full_scale
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub least_squares: CalibrationModel,
    pub qp: CalibrationModel,
    pub selection: GammaSelection,
    pub quiet: Vec<usize>,
}

/// Full calibration: quiet-row detection, LS baseline, γ sweep and QP fit.
pub fn calibrate(d: &CalibrationDataset, settings: &CalibrationSettings) -> Result<CalibrationOutcome> {
    d.validate()?;
    let a = build_design_matrix(d, &settings.features)?;
    let quiet = match &d.quiet_mask {
        Some(mask) => (0..mask.len()).filter(|&k| mask[k]).collect(),
        None => detect_quiet_segment(&d.y, settings.tau_th, settings.min_quiet_samples),
    };
    let problem = CalibrationProblem::new(a, DVector::from_column_slice(&d.y))?;
    let mut ls = problem.least_squares(&settings.features)?;
    if quiet.len() >= 2 {
        ls.fit_report.quiet_std = Some(quiet_variance(problem.design(), &quiet, &ls.theta_vector()).sqrt());
    }
    let selection = select_gamma_on(
        &problem,
        &settings.features,
        &quiet,
        settings.e_max(),
        &settings.gamma_grid,
        settings.lambda_v,
    )?;
    Ok(CalibrationOutcome {
        least_squares: ls,
        qp: selection.model.clone(),
        selection,
        quiet,
    })
}
