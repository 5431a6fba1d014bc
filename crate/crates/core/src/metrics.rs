//! Static sensor metrics: error, nonlinearity, hysteresis, repeatability,
//! crosstalk and 3σ resolution. Percentages are of full scale.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calibration::sample_std;
use crate::sensor_sim::{Branch, CycleSegment};
use crate::{Error, Result};

pub const DEFAULT_GRID_POINTS: usize = 256;
pub const MIN_RESOLUTION_SAMPLES: usize = 1000;

fn check_fs(fs: f64) -> Result<()> {
    if fs.is_finite() && fs > 0.0 {
        Ok(())
    } else {
        Err(Error::domain("fs", format!("must be > 0, got {fs}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    /// N·m.
    pub rms: f64,
    pub max_pct_fs: f64,
}

pub fn rms_and_max_error(estimates: &[f64], references: &[f64], fs: f64) -> Result<ErrorSummary> {
    check_fs(fs)?;
    if estimates.is_empty() || estimates.len() != references.len() {
        return Err(Error::Data(format!(
            "need equal non-empty inputs, got {} estimates and {} references",
            estimates.len(),
            references.len()
        )));
    }
    let mut ss = 0.0;
    let mut max: f64 = 0.0;
    for (e, r) in estimates.iter().zip(references) {
        let d = e - r;
        ss += d * d;
        max = max.max(d.abs());
    }
    Ok(ErrorSummary {
        rms: (ss / estimates.len() as f64).sqrt(),
        max_pct_fs: 100.0 * max / fs,
    })
}

/// One loading leg and one unloading leg as `(torque, estimate)` pairs.
///
/// Pairs are stored sorted by torque so both legs can be interpolated on a
/// common grid; negative-direction legs are therefore stored in ascending
/// torque order as well.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadCycle {
    pub cycle_id: u32,
    pub loading: Vec<(f64, f64)>,
    pub unloading: Vec<(f64, f64)>,
}

impl LoadCycle {
    /// Builds a cycle from legs recorded in time order. Each leg must be
    /// monotone in torque (either direction).
    pub fn new(cycle_id: u32, loading: Vec<(f64, f64)>, unloading: Vec<(f64, f64)>) -> Result<Self> {
        Ok(Self {
            cycle_id,
            loading: sorted_leg(loading, cycle_id, "loading")?,
            unloading: sorted_leg(unloading, cycle_id, "unloading")?,
        })
    }

    fn range(&self) -> (f64, f64) {
        let lo = self.loading[0].0.max(self.unloading[0].0);
        let hi = self.loading.last().unwrap().0.min(self.unloading.last().unwrap().0);
        (lo, hi)
    }
}

fn sorted_leg(mut leg: Vec<(f64, f64)>, id: u32, which: &str) -> Result<Vec<(f64, f64)>> {
    if leg.len() < 2 {
        return Err(Error::Data(format!("cycle {id}: {which} leg needs at least 2 points")));
    }
    if leg.iter().any(|(t, e)| !t.is_finite() || !e.is_finite()) {
        return Err(Error::Data(format!("cycle {id}: non-finite value in {which} leg")));
    }
    let rising = leg.last().unwrap().0 >= leg[0].0;
    let monotone = leg
        .windows(2)
        .all(|w| if rising { w[1].0 >= w[0].0 } else { w[1].0 <= w[0].0 });
    if !monotone {
        return Err(Error::Data(format!("cycle {id}: {which} leg is not monotone in torque")));
    }
    if !rising {
        leg.reverse();
    }
    // Collapse repeated torques so interpolation is well defined.
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(leg.len());
    let mut count = 0.0;
    for (t, e) in leg {
        match out.last_mut() {
            Some(last) if last.0 == t => {
                count += 1.0;
                last.1 += (e - last.1) / count;
            }
            _ => {
                out.push((t, e));
                count = 1.0;
            }
        }
    }
    if out.len() < 2 {
        return Err(Error::Data(format!("cycle {id}: {which} leg spans no torque range")));
    }
    Ok(out)
}

/// Linear interpolation on a leg sorted by torque; `x` must lie inside it.
fn interp(leg: &[(f64, f64)], x: f64) -> f64 {
    let i = leg.partition_point(|p| p.0 < x);
    if i == 0 {
        return leg[0].1;
    }
    if i >= leg.len() {
        return leg[leg.len() - 1].1;
    }
    let (x0, y0) = leg[i - 1];
    let (x1, y1) = leg[i];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Common torque grid over the range shared by every leg of every cycle.
pub fn common_grid(cycles: &[LoadCycle], points: usize) -> Result<Vec<f64>> {
    if cycles.is_empty() {
        return Err(Error::Data("no load cycles".into()));
    }
    if points < 2 {
        return Err(Error::domain("grid_points", "need at least 2"));
    }
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for c in cycles {
        let (a, b) = c.range();
        lo = lo.max(a);
        hi = hi.min(b);
    }
    if !(hi > lo) {
        return Err(Error::Data(format!(
            "cycles do not overlap in torque (common range [{lo}, {hi}])"
        )));
    }
    Ok((0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect())
}

struct Sampled {
    grid: Vec<f64>,
    /// [cycle][grid point]
    loading: Vec<Vec<f64>>,
    unloading: Vec<Vec<f64>>,
}

fn sample(cycles: &[LoadCycle], points: usize) -> Result<Sampled> {
    let grid = common_grid(cycles, points)?;
    let on = |leg: &[(f64, f64)]| grid.iter().map(|&x| interp(leg, x)).collect::<Vec<_>>();
    Ok(Sampled {
        loading: cycles.iter().map(|c| on(&c.loading)).collect(),
        unloading: cycles.iter().map(|c| on(&c.unloading)).collect(),
        grid,
    })
}

/// Ordinary least-squares line `a + b·x`.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mx, slope)
}

/// Max deviation of the cycle-averaged curve from its best-fit line, %FS.
pub fn nonlinearity(cycles: &[LoadCycle], fs: f64) -> Result<f64> {
    nonlinearity_on_grid(cycles, fs, DEFAULT_GRID_POINTS)
}

pub fn nonlinearity_on_grid(cycles: &[LoadCycle], fs: f64, points: usize) -> Result<f64> {
    check_fs(fs)?;
    let s = sample(cycles, points)?;
    let nc = cycles.len() as f64;
    let avg: Vec<f64> = (0..s.grid.len())
        .map(|g| {
            (0..cycles.len())
                .map(|c| 0.5 * (s.loading[c][g] + s.unloading[c][g]))
                .sum::<f64>()
                / nc
        })
        .collect();
    let (a, b) = fit_line(&s.grid, &avg);
    let dev = s
        .grid
        .iter()
        .zip(&avg)
        .map(|(x, y)| (y - a - b * x).abs())
        .fold(0.0, f64::max);
    Ok(100.0 * dev / fs)
}

/// Max over the grid of the cycle-mean loading/unloading difference, %FS.
pub fn hysteresis(cycles: &[LoadCycle], fs: f64) -> Result<f64> {
    hysteresis_on_grid(cycles, fs, DEFAULT_GRID_POINTS)
}

pub fn hysteresis_on_grid(cycles: &[LoadCycle], fs: f64, points: usize) -> Result<f64> {
    check_fs(fs)?;
    let s = sample(cycles, points)?;
    let nc = cycles.len() as f64;
    let gap = (0..s.grid.len())
        .map(|g| {
            let mean: f64 = (0..cycles.len())
                .map(|c| s.loading[c][g] - s.unloading[c][g])
                .sum::<f64>()
                / nc;
            mean.abs()
        })
        .fold(0.0, f64::max);
    Ok(100.0 * gap / fs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Repeatability {
    /// Max across the grid of (max − min) over cycles, %FS.
    pub spread_pct_fs: f64,
    /// Max across the grid of the sample std over cycles, %FS.
    pub std_pct_fs: f64,
}

/// Cycle-to-cycle spread; loading and unloading legs are compared separately.
pub fn repeatability(cycles: &[LoadCycle], fs: f64) -> Result<Repeatability> {
    repeatability_on_grid(cycles, fs, DEFAULT_GRID_POINTS)
}

pub fn repeatability_on_grid(cycles: &[LoadCycle], fs: f64, points: usize) -> Result<Repeatability> {
    check_fs(fs)?;
    if cycles.len() < 2 {
        return Err(Error::Data(format!(
            "repeatability needs at least 2 cycles, got {}",
            cycles.len()
        )));
    }
    let s = sample(cycles, points)?;
    let mut spread: f64 = 0.0;
    let mut std: f64 = 0.0;
    for legs in [&s.loading, &s.unloading] {
        for g in 0..s.grid.len() {
            let vals: Vec<f64> = legs.iter().map(|c| c[g]).collect();
            let (lo, hi) = vals
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            spread = spread.max(hi - lo);
            std = std.max(sample_std(&vals));
        }
    }
    Ok(Repeatability {
        spread_pct_fs: 100.0 * spread / fs,
        std_pct_fs: 100.0 * std / fs,
    })
}

/// Nonlinearity, hysteresis and repeatability of a cycle record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub nonlinearity_pct_fs: f64,
    pub hysteresis_pct_fs: f64,
    pub repeatability: Repeatability,
}

/// Groups `segments` into load cycles of `(reference, estimate)` pairs, one
/// list per torque polarity (positive first). Polarities without a complete
/// cycle are dropped.
pub fn cycles_by_polarity(reference: &[f64], estimate: &[f64], segments: &[CycleSegment]) -> Result<Vec<Vec<LoadCycle>>> {
    if reference.len() != estimate.len() {
        return Err(Error::Data("reference and estimate lengths differ".into()));
    }
    let mut out = Vec::new();
    for polarity in [1, -1] {
        let mut ids: Vec<u32> = segments.iter().filter(|s| s.polarity == polarity).map(|s| s.cycle_id).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut cycles = Vec::new();
        for id in ids {
            let leg = |branch: Branch| -> Result<Option<Vec<(f64, f64)>>> {
                let Some(seg) = segments
                    .iter()
                    .find(|s| s.polarity == polarity && s.cycle_id == id && s.branch == branch)
                else {
                    return Ok(None);
                };
                if seg.end > reference.len() || seg.start >= seg.end {
                    return Err(Error::Data(format!(
                        "cycle {id} segment [{}, {}) outside the {}-sample record",
                        seg.start,
                        seg.end,
                        reference.len()
                    )));
                }
                Ok(Some((seg.start..seg.end).map(|k| (reference[k], estimate[k])).collect()))
            };
            if let (Some(l), Some(u)) = (leg(Branch::Loading)?, leg(Branch::Unloading)?) {
                cycles.push(LoadCycle::new(id, l, u)?);
            }
        }
        if !cycles.is_empty() {
            out.push(cycles);
        }
    }
    if out.is_empty() {
        return Err(Error::Data("record holds no complete load cycle".into()));
    }
    Ok(out)
}

/// Cycle metrics per polarity; each figure is the worse of the two.
pub fn cycle_metrics(reference: &[f64], estimate: &[f64], segments: &[CycleSegment], fs: f64) -> Result<CycleMetrics> {
    let mut m = CycleMetrics {
        nonlinearity_pct_fs: 0.0,
        hysteresis_pct_fs: 0.0,
        repeatability: Repeatability {
            spread_pct_fs: 0.0,
            std_pct_fs: 0.0,
        },
    };
    for cycles in cycles_by_polarity(reference, estimate, segments)? {
        m.nonlinearity_pct_fs = m.nonlinearity_pct_fs.max(nonlinearity(&cycles, fs)?);
        m.hysteresis_pct_fs = m.hysteresis_pct_fs.max(hysteresis(&cycles, fs)?);
        let r = repeatability(&cycles, fs)?;
        m.repeatability.spread_pct_fs = m.repeatability.spread_pct_fs.max(r.spread_pct_fs);
        m.repeatability.std_pct_fs = m.repeatability.std_pct_fs.max(r.std_pct_fs);
    }
    Ok(m)
}

/// Apparent output under pure off-axis load, %FS.
pub fn crosstalk(tz_estimates: &[f64], fs: f64) -> Result<f64> {
    check_fs(fs)?;
    Ok(100.0 * tz_estimates.iter().fold(0.0f64, |m, v| m.max(v.abs())) / fs)
}

/// Three sample standard deviations of an unfiltered quiet record, N·m.
pub fn resolution_3sigma(quiet: &[f64]) -> Result<f64> {
    if quiet.len() < MIN_RESOLUTION_SAMPLES {
        return Err(Error::Data(format!(
            "resolution needs at least {MIN_RESOLUTION_SAMPLES} samples, got {}",
            quiet.len()
        )));
    }
    Ok(3.0 * sample_std(quiet))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub max_pct_fs: Option<f64>,
    pub rms: Option<f64>,
    pub nonlinearity_pct_fs: Option<f64>,
    pub hysteresis_pct_fs: Option<f64>,
    pub repeatability: Option<Repeatability>,
    pub crosstalk_x_pct_fs: Option<f64>,
    pub crosstalk_y_pct_fs: Option<f64>,
    pub resolution_3sigma: Option<f64>,
}

fn cell(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(x) => format!("{x:.digits$}"),
        None => "-".into(),
    }
}

/// Renders reports as two plain-text tables: accuracy/linearity and
/// repeatability/crosstalk/resolution.
pub fn format_tables(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "| Method | Max Percentage Error(FS%) | RMS Error(N·m) | Nonlinearity(FS%) | Hysteresis(FS%) |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|");
    for r in reports {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            r.label,
            cell(r.max_pct_fs, 4),
            cell(r.rms, 4),
            cell(r.nonlinearity_pct_fs, 4),
            cell(r.hysteresis_pct_fs, 4)
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "| Method | Repeatability (FS%) | Repeatability std (FS%) | Crosstalk T_x (FS%) | Crosstalk T_y (FS%) | Resolution 3σ (N·m) |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|---|");
    for r in reports {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            r.label,
            cell(r.repeatability.map(|x| x.spread_pct_fs), 4),
            cell(r.repeatability.map(|x| x.std_pct_fs), 4),
            cell(r.crosstalk_x_pct_fs, 4),
            cell(r.crosstalk_y_pct_fs, 4),
            cell(r.resolution_3sigma, 4)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Cycle over [0, 25] sampled every 0.01 N·m with estimate maps per leg.
    fn cycle(id: u32, up: impl Fn(f64) -> f64, down: impl Fn(f64) -> f64) -> LoadCycle {
        let xs: Vec<f64> = (0..=2500).map(|k| k as f64 * 0.01).collect();
        let loading = xs.iter().map(|&x| (x, up(x))).collect();
        let unloading = xs.iter().rev().map(|&x| (x, down(x))).collect();
        LoadCycle::new(id, loading, unloading).unwrap()
    }

    #[test]
    fn error_examples() {
        let y = [0.0, 1.0, -2.0];
        let e = rms_and_max_error(&y, &y, 80.0).unwrap();
        assert_eq!((e.rms, e.max_pct_fs), (0.0, 0.0));
        let est: Vec<f64> = y.iter().map(|v| v + 0.08).collect();
        let e = rms_and_max_error(&est, &y, 80.0).unwrap();
        assert!((e.max_pct_fs - 0.1).abs() < 1e-12);
        assert!((e.rms - 0.08).abs() < 1e-12);
        assert!(rms_and_max_error(&[], &[], 80.0).is_err());
    }

    #[test]
    fn linear_cycle_has_no_nonlinearity() {
        let c = cycle(0, |x| x, |x| x);
        assert!(nonlinearity(&[c.clone()], 80.0).unwrap() < 1e-12);
        assert_eq!(hysteresis(&[c], 80.0).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_bump_matches_dense_oracle() {
        // bump q(x) = c·x(25−x); the OLS line of q on a uniform grid over
        // [0, 25] is flat at mean(q), so max deviation is at the ends or the
        // middle. Choose c so the larger of the two equals 0.08 N·m.
        let xs: Vec<f64> = (0..100_001).map(|k| 25.0 * k as f64 / 100_000.0).collect();
        let q = |x: f64| x * (25.0 - x);
        let qs: Vec<f64> = xs.iter().map(|&x| q(x)).collect();
        let (a, b) = fit_line(&xs, &qs);
        let dev = xs.iter().zip(&qs).map(|(x, y)| (y - a - b * x).abs()).fold(0.0, f64::max);
        let c = 0.08 / dev;
        let cyc = cycle(0, |x| x + c * q(x), |x| x + c * q(x));
        let nl = nonlinearity(&[cyc], 80.0).unwrap();
        assert!((nl - 0.1).abs() / 0.1 < 0.01, "{nl}");
    }

    #[test]
    fn constant_gap_loop() {
        let c = cycle(0, |x| x + 0.056, |x| x - 0.056);
        let h = hysteresis(&[c], 80.0).unwrap();
        assert!((h - 0.14).abs() < 1e-9, "{h}");
    }

    #[test]
    fn repeatability_examples() {
        let a = cycle(0, |x| x, |x| x);
        assert_eq!(repeatability(&[a.clone(), a.clone()], 80.0).unwrap().spread_pct_fs, 0.0);
        let b = cycle(1, |x| x + 0.068, |x| x + 0.068);
        let r = repeatability(&[a.clone(), b], 80.0).unwrap();
        assert!((r.spread_pct_fs - 0.085).abs() < 1e-9);
        assert!(repeatability(&[a], 80.0).is_err());
    }

    #[test]
    fn crosstalk_and_resolution_examples() {
        assert_eq!(crosstalk(&[0.0; 10], 80.0).unwrap(), 0.0);
        let x = crosstalk(&[0.01, -0.1184, 0.05], 80.0).unwrap();
        assert!((x - 0.148).abs() < 1e-12);
        assert_eq!(resolution_3sigma(&[0.3; 1000]).unwrap(), 0.0);
        assert!(resolution_3sigma(&[0.0; 999]).unwrap_err().to_string().contains("1000"));
    }

    #[test]
    fn disjoint_cycles_are_rejected() {
        let a = cycle(0, |x| x, |x| x);
        let neg = LoadCycle::new(
            1,
            vec![(0.0, 0.0), (-1.0, -1.0), (-2.0, -2.0)],
            vec![(-2.0, -2.0), (0.0, 0.0)],
        )
        .unwrap();
        assert!(matches!(nonlinearity(&[a, neg], 80.0), Err(Error::Data(_))));
    }

    #[test]
    fn non_monotone_leg_is_rejected() {
        assert!(LoadCycle::new(0, vec![(0.0, 0.0), (2.0, 2.0), (1.0, 1.0)], vec![(2.0, 2.0), (0.0, 0.0)]).is_err());
    }

    #[test]
    fn report_has_table_labels() {
        let r = MetricsReport {
            label: "QP".into(),
            rms: Some(0.0266),
            ..MetricsReport::default()
        };
        let t = format_tables(&[r]);
        assert!(t.contains("Max Percentage Error(FS%)"));
        assert!(t.contains("Repeatability (FS%)"));
        assert!(t.contains("| QP | - | 0.0266 |"));
    }

    fn two_pass_std(x: &[f64]) -> f64 {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
    }

    proptest! {
        #[test]
        fn affine_estimates_have_zero_nonlinearity(a in 0.5f64..2.0, b in -1.0f64..1.0) {
            let c = cycle(0, |x| a * x + b, |x| a * x + b);
            prop_assert!(nonlinearity(&[c], 80.0).unwrap() < 1e-10);
        }

        #[test]
        fn pct_metrics_scale_invariant(s in 0.1f64..10.0, gap in 0.0f64..0.2, bump in 0.0f64..0.01) {
            let f = |k: f64| {
                let up = move |x: f64| x + gap + bump * x * (25.0 - x);
                let down = move |x: f64| x - gap + bump * x * (25.0 - x);
                let xs: Vec<f64> = (0..=500).map(|i| i as f64 * 0.05).collect();
                let c = LoadCycle::new(
                    0,
                    xs.iter().map(|&x| (k * x, k * up(x))).collect(),
                    xs.iter().rev().map(|&x| (k * x, k * down(x))).collect(),
                ).unwrap();
                (nonlinearity(&[c.clone()], 80.0 * k).unwrap(), hysteresis(&[c], 80.0 * k).unwrap())
            };
            let (n1, h1) = f(1.0);
            let (n2, h2) = f(s);
            prop_assert!((n1 - n2).abs() <= 1e-9 * (1.0 + n1));
            prop_assert!((h1 - h2).abs() <= 1e-9 * (1.0 + h1));
        }

        #[test]
        fn metrics_non_negative_and_resolution_exact(v in proptest::collection::vec(-1.0f64..1.0, 1000..1200)) {
            let r = resolution_3sigma(&v).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert!((r - 3.0 * two_pass_std(&v)).abs() <= 1e-12);
            let c1 = cycle(0, |x| x + v[0], |x| x + v[1]);
            let c2 = cycle(1, |x| x + v[2], |x| x - v[3]);
            prop_assert!(hysteresis(&[c1.clone(), c2.clone()], 80.0).unwrap() >= 0.0);
            prop_assert!(repeatability(&[c1, c2], 80.0).unwrap().spread_pct_fs >= 0.0);
        }

        #[test]
        fn grid_refinement_is_stable(gap in 0.05f64..0.2, bump in 1e-4f64..1e-3) {
            let c = cycle(0,
                |x| x + gap * (std::f64::consts::PI * x / 25.0).sin() + bump * x * (25.0 - x),
                |x| x - gap * (std::f64::consts::PI * x / 25.0).sin() + bump * x * (25.0 - x));
            let cs = [c];
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(1e-300);
            prop_assert!(rel(nonlinearity_on_grid(&cs, 80.0, 256).unwrap(), nonlinearity_on_grid(&cs, 80.0, 512).unwrap()) < 0.01);
            prop_assert!(rel(hysteresis_on_grid(&cs, 80.0, 256).unwrap(), hysteresis_on_grid(&cs, 80.0, 512).unwrap()) < 0.01);
        }
    }
}
