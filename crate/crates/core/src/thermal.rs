//! Zero-drift temperature compensation.
//!
//! The zero-torque output is modeled as a rational function of temperature
//! (°C), `(a1·t² + a2·t + a3) / (a4·t² + a5·t + 1)`, fitted to per-setpoint
//! means of a chamber record and subtracted from raw torque estimates.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::lstsq;
use crate::sensor_sim::TemperatureProfile;
use crate::{Error, Result};

pub const MAX_ITERATIONS: usize = 200;
pub const REL_TOL: f64 = 1e-10;
/// Step of the denominator positivity scan, °C.
pub const ROOT_SCAN_STEP: f64 = 0.1;
/// Denominators at or below this are treated as a pole.
const MIN_DENOMINATOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftModel {
    /// `[a1, a2, a3, a4, a5]`.
    pub a: [f64; 5],
    /// Temperatures outside this range are clamped before evaluation, °C.
    pub valid_range: (f64, f64),
}

impl DriftModel {
    pub fn zero(valid_range: (f64, f64)) -> Self {
        Self {
            a: [0.0; 5],
            valid_range,
        }
    }

    pub fn numerator(&self, t: f64) -> f64 {
        (self.a[0] * t + self.a[1]) * t + self.a[2]
    }

    pub fn denominator(&self, t: f64) -> f64 {
        (self.a[3] * t + self.a[4]) * t + 1.0
    }

    /// Drift at `t` without clamping.
    pub fn eval_raw(&self, t: f64) -> f64 {
        self.numerator(t) / self.denominator(t)
    }

    /// Drift at `t` clamped into the valid range, N·m.
    pub fn eval(&self, t: f64) -> f64 {
        self.eval_raw(t.clamp(self.valid_range.0, self.valid_range.1))
    }

    /// Scans the valid range at [`ROOT_SCAN_STEP`] and fails on a
    /// non-positive denominator.
    pub fn check_denominator(&self) -> Result<()> {
        let (lo, hi) = self.valid_range;
        let steps = ((hi - lo) / ROOT_SCAN_STEP).ceil() as usize;
        for k in 0..=steps {
            let t = (lo + k as f64 * ROOT_SCAN_STEP).min(hi);
            let d = self.denominator(t);
            if !(d > MIN_DENOMINATOR) {
                return Err(Error::Singular(format!(
                    "rational drift denominator reaches {d:e} at {t:.1} °C inside \
                     [{lo}, {hi}]; use a polynomial fit instead"
                )));
            }
        }
        Ok(())
    }
}

/// Per-setpoint means of the zero-torque output.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ThermalRecord {
    /// `(temperature °C, zero-torque output N·m)`.
    pub samples: Vec<(f64, f64)>,
}

impl ThermalRecord {
    pub fn temperature_range(&self) -> Option<(f64, f64)> {
        let mut it = self.samples.iter().map(|s| s.0);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), t| (lo.min(t), hi.max(t))))
    }

    fn distinct_temperatures(&self) -> usize {
        let mut t: Vec<f64> = self.samples.iter().map(|s| s.0).collect();
        t.sort_by(f64::total_cmp);
        t.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        t.len()
    }
}

/// Averages the final `window_s` of each `hold_s` setpoint hold.
///
/// `t`, `temp` and `output` are aligned samples; holds start at `t = 0`.
pub fn aggregate_setpoints(
    t: &[f64],
    temp: &[f64],
    output: &[f64],
    n_holds: usize,
    hold_s: f64,
    window_s: f64,
) -> Result<ThermalRecord> {
    if t.len() != temp.len() || t.len() != output.len() {
        return Err(Error::Data("time, temperature and output lengths differ".into()));
    }
    if !(window_s > 0.0 && window_s <= hold_s) {
        return Err(Error::domain("window_s", "must lie in (0, hold_s]"));
    }
    let mut samples = Vec::with_capacity(n_holds);
    for h in 0..n_holds {
        let end = (h + 1) as f64 * hold_s;
        let start = end - window_s;
        let (mut st, mut so, mut n) = (0.0, 0.0, 0usize);
        for k in 0..t.len() {
            if t[k] >= start && t[k] < end {
                st += temp[k];
                so += output[k];
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data(format!("no samples in the averaging window of hold {}", h + 1)));
        }
        samples.push((st / n as f64, so / n as f64));
    }
    Ok(ThermalRecord { samples })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RationalFit {
    pub model: DriftModel,
    /// Sum of squared residuals after each accepted iteration, starting with
    /// the linearized initial guess.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

fn sse(model: &DriftModel, rec: &ThermalRecord) -> f64 {
    rec.samples
        .iter()
        .map(|&(t, y)| (model.eval_raw(t) - y).powi(2))
        .sum()
}

/// Fits the five rational constants to `record`.
///
/// Starts from the linearized problem `N(t) − y·(a4·t² + a5·t) = y` and
/// refines with Levenberg–Marquardt-damped Gauss–Newton steps, accepting
/// only steps that lower the squared error.
pub fn fit_rational(record: &ThermalRecord) -> Result<DriftModel> {
    Ok(fit_rational_traced(record)?.model)
}

pub fn fit_rational_traced(record: &ThermalRecord) -> Result<RationalFit> {
    let distinct = record.distinct_temperatures();
    if distinct < 5 {
        return Err(Error::Data(format!(
            "rational drift fit needs at least 5 distinct temperatures, got {distinct}"
        )));
    }
    if record.samples.iter().any(|(t, y)| !t.is_finite() || !y.is_finite()) {
        return Err(Error::Data("non-finite thermal sample".into()));
    }
    let valid_range = record.temperature_range().expect("non-empty");
    let m = record.samples.len();

    let lin = DMatrix::from_fn(m, 5, |i, j| {
        let (t, y) = record.samples[i];
        match j {
            0 => t * t,
            1 => t,
            2 => 1.0,
            3 => -y * t * t,
            _ => -y * t,
        }
    });
    let rhs = DVector::from_iterator(m, record.samples.iter().map(|s| s.1));
    let (a0, _) = lstsq(&lin, &rhs, 1e-12);
    let mut model = DriftModel {
        a: [a0[0], a0[1], a0[2], a0[3], a0[4]],
        valid_range,
    };
    if model.check_denominator().is_err() {
        // Pole from the linearization: restart from the best quadratic.
        let (p, _) = lstsq(&lin.columns(0, 3).into_owned(), &rhs, 1e-12);
        model.a = [p[0], p[1], p[2], 0.0, 0.0];
    }

    let mut f = sse(&model, record);
    let mut trace = vec![f];
    let mut mu = 1e-3;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS && f > 0.0 {
        iterations += 1;
        let mut jac = DMatrix::zeros(m, 5);
        let mut r = DVector::zeros(m);
        for (i, &(t, y)) in record.samples.iter().enumerate() {
            let num = model.numerator(t);
            let den = model.denominator(t);
            r[i] = num / den - y;
            jac[(i, 0)] = t * t / den;
            jac[(i, 1)] = t / den;
            jac[(i, 2)] = 1.0 / den;
            jac[(i, 3)] = -num * t * t / (den * den);
            jac[(i, 4)] = -num * t / (den * den);
        }
        let jtj = jac.tr_mul(&jac);
        let g = jac.tr_mul(&r);
        let mut accepted = false;
        for _ in 0..30 {
            let mut lhs = jtj.clone();
            for d in 0..5 {
                lhs[(d, d)] += mu * jtj[(d, d)].max(1e-300);
            }
            let Some(step) = lstsq_square(&lhs, &(-&g)) else {
                mu *= 10.0;
                continue;
            };
            let mut trial = model;
            for d in 0..5 {
                trial.a[d] += step[d];
            }
            let ft = sse(&trial, record);
            if ft.is_finite() && ft < f && trial.check_denominator().is_ok() {
                model = trial;
                let rel = (f - ft) / f.max(f64::MIN_POSITIVE);
                f = ft;
                trace.push(f);
                mu = (mu * 0.3).max(1e-12);
                accepted = true;
                if rel < REL_TOL {
                    return finish(model, trace, iterations);
                }
                break;
            }
            mu *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    finish(model, trace, iterations)
}

fn finish(model: DriftModel, objective_trace: Vec<f64>, iterations: usize) -> Result<RationalFit> {
    model.check_denominator()?;
    Ok(RationalFit {
        model,
        objective_trace,
        iterations,
    })
}

fn lstsq_square(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let (x, _) = lstsq(a, b, 1e-14);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Best quadratic `c0 + c1·t + c2·t²` by least squares, as `[c0, c1, c2]`,
/// with its sum of squared residuals.
pub fn fit_quadratic(record: &ThermalRecord) -> Result<([f64; 3], f64)> {
    if record.distinct_temperatures() < 3 {
        return Err(Error::Data("quadratic fit needs at least 3 distinct temperatures".into()));
    }
    let m = record.samples.len();
    let a = DMatrix::from_fn(m, 3, |i, j| record.samples[i].0.powi(j as i32));
    let y = DVector::from_iterator(m, record.samples.iter().map(|s| s.1));
    let (c, _) = lstsq(&a, &y, 1e-12);
    let res = (&a * &c - &y).norm_squared();
    Ok(([c[0], c[1], c[2]], res))
}

/// Sum of squared residuals of `model` at the record's points.
pub fn rational_sse(model: &DriftModel, record: &ThermalRecord) -> f64 {
    sse(model, record)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Compensated {
    pub torque: f64,
    /// The temperature was outside the model's valid range.
    pub clamped: bool,
}

pub fn compensate(raw_torque: f64, temperature: f64, model: &DriftModel) -> Compensated {
    let (lo, hi) = model.valid_range;
    Compensated {
        torque: raw_torque - model.eval(temperature),
        clamped: !(temperature >= lo && temperature <= hi),
    }
}

/// RMS of `output − reference`, optionally after compensation.
pub fn drift_rms(
    output: &[f64],
    reference: &[f64],
    temperature: &[f64],
    model: Option<&DriftModel>,
) -> Result<f64> {
    if output.is_empty() || output.len() != reference.len() || output.len() != temperature.len() {
        return Err(Error::Data("drift record must be non-empty with aligned columns".into()));
    }
    let ss: f64 = output
        .iter()
        .zip(reference)
        .zip(temperature)
        .map(|((&o, &r), &t)| {
            let o = model.map_or(o, |m| compensate(o, t, m).torque);
            (o - r).powi(2)
        })
        .sum();
    Ok((ss / output.len() as f64).sqrt())
}

/// Synthetic chamber and one-hour drift records from a planted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftScenario {
    pub planted: [f64; 5],
    /// Torque-estimate noise, N·m.
    pub noise_sigma: f64,
    pub setpoints: Vec<f64>,
    pub hold_s: f64,
    pub window_s: f64,
    pub lag_s: f64,
    /// Sampling rate of the synthetic records, Hz.
    pub rate: f64,
    /// Warm-up of the one-hour record.
    pub warmup_start: f64,
    pub warmup_end: f64,
    pub warmup_tau_s: f64,
    pub record_s: f64,
    /// Applied torque of the loaded drift record, N·m.
    pub loaded_torque: f64,
}

impl Default for DriftScenario {
    fn default() -> Self {
        Self {
            planted: [1.65e-6, 4.95e-4, -0.0099, 1e-4, 1e-3],
            noise_sigma: 0.0088,
            setpoints: vec![-10.0, 0.0, 10.0, 20.0, 30.0, 40.0, 50.0],
            hold_s: 1200.0,
            window_s: 300.0,
            lag_s: 180.0,
            rate: 10.0,
            warmup_start: 22.0,
            warmup_end: 42.0,
            warmup_tau_s: 900.0,
            record_s: 3600.0,
            loaded_torque: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DriftRecord {
    pub t: Vec<f64>,
    pub temperature: Vec<f64>,
    pub output: Vec<f64>,
    pub reference: Vec<f64>,
}

impl DriftScenario {
    pub fn planted_model(&self) -> DriftModel {
        let lo = self.setpoints.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.setpoints.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        DriftModel {
            a: self.planted,
            valid_range: (lo, hi),
        }
    }

    fn record(&self, profile: &TemperatureProfile, duration: f64, torque: f64, seed: u64) -> DriftRecord {
        let planted = self.planted_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (duration * self.rate).round() as usize;
        let mut r = DriftRecord {
            t: Vec::with_capacity(n),
            temperature: Vec::with_capacity(n),
            output: Vec::with_capacity(n),
            reference: Vec::with_capacity(n),
        };
        for k in 0..n {
            let t = k as f64 / self.rate;
            let temp = profile.temperature(t);
            let e: f64 = StandardNormal.sample(&mut rng);
            r.t.push(t);
            r.temperature.push(temp);
            r.output.push(torque + planted.eval_raw(temp) + self.noise_sigma * e);
            r.reference.push(torque);
        }
        r
    }

    /// Zero-torque chamber run through every setpoint.
    pub fn chamber_record(&self, seed: u64) -> DriftRecord {
        let profile = TemperatureProfile::Setpoints {
            setpoints: self.setpoints.clone(),
            hold_s: self.hold_s,
            lag_s: self.lag_s,
            initial: self.setpoints.first().copied().unwrap_or(25.0),
        };
        self.record(&profile, self.hold_s * self.setpoints.len() as f64, 0.0, seed)
    }

    /// One-hour warm-up record at `torque`.
    pub fn warmup_record(&self, torque: f64, seed: u64) -> DriftRecord {
        let profile = TemperatureProfile::WarmUp {
            start: self.warmup_start,
            end: self.warmup_end,
            tau_s: self.warmup_tau_s,
        };
        self.record(&profile, self.record_s, torque, seed)
    }

    pub fn thermal_record(&self, chamber: &DriftRecord) -> Result<ThermalRecord> {
        aggregate_setpoints(
            &chamber.t,
            &chamber.temperature,
            &chamber.output,
            self.setpoints.len(),
            self.hold_s,
            self.window_s,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub model: DriftModel,
    /// Max |fitted − planted| over the setpoint temperatures, N·m.
    pub setpoint_error: f64,
    pub zero_raw_rms: f64,
    pub zero_comp_rms: f64,
    pub loaded_raw_rms: f64,
    pub loaded_comp_rms: f64,
}

impl DriftSummary {
    pub fn zero_reduction(&self) -> f64 {
        1.0 - self.zero_comp_rms / self.zero_raw_rms
    }

    pub fn loaded_reduction(&self) -> f64 {
        1.0 - self.loaded_comp_rms / self.loaded_raw_rms
    }
}

/// Chamber fit followed by before/after RMS on the one-hour records.
pub fn run_drift_scenario(s: &DriftScenario, seed: u64) -> Result<DriftSummary> {
    let chamber = s.chamber_record(seed);
    let rec = s.thermal_record(&chamber)?;
    let model = fit_rational(&rec)?;
    let planted = s.planted_model();
    let setpoint_error = rec
        .samples
        .iter()
        .map(|&(t, _)| (model.eval(t) - planted.eval_raw(t)).abs())
        .fold(0.0, f64::max);
    let zero = s.warmup_record(0.0, seed.wrapping_add(1));
    let loaded = s.warmup_record(s.loaded_torque, seed.wrapping_add(2));
    let rms = |r: &DriftRecord, m: Option<&DriftModel>| drift_rms(&r.output, &r.reference, &r.temperature, m);
    Ok(DriftSummary {
        setpoint_error,
        zero_raw_rms: rms(&zero, None)?,
        zero_comp_rms: rms(&zero, Some(&model))?,
        loaded_raw_rms: rms(&loaded, None)?,
        loaded_comp_rms: rms(&loaded, Some(&model))?,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SETPOINTS: [f64; 7] = [-10.0, 0.0, 10.0, 20.0, 30.0, 40.0, 50.0];

    fn record_from(model: &DriftModel, noise: impl Fn(usize) -> f64) -> ThermalRecord {
        ThermalRecord {
            samples: SETPOINTS
                .iter()
                .enumerate()
                .map(|(i, &t)| (t, model.eval_raw(t) + noise(i)))
                .collect(),
        }
    }

    #[test]
    fn constant_drift_recovered() {
        let planted = DriftModel {
            a: [0.0, 0.0, 0.05, 0.0, 0.0],
            valid_range: (-10.0, 50.0),
        };
        let m = fit_rational(&record_from(&planted, |_| 0.0)).unwrap();
        assert!((m.a[2] - 0.05).abs() < 1e-8, "{:?}", m.a);
        for i in [0, 1, 3, 4] {
            assert!(m.a[i].abs() < 1e-8, "{:?}", m.a);
        }
    }

    #[test]
    fn planted_rational_reproduced_at_setpoints() {
        let planted = DriftModel {
            a: [1e-5, 2e-3, 0.01, 1e-4, 1e-3],
            valid_range: (-10.0, 50.0),
        };
        let m = fit_rational(&record_from(&planted, |_| 0.0)).unwrap();
        for &t in &SETPOINTS {
            assert!((m.eval(t) - planted.eval(t)).abs() < 1e-9);
        }
    }

    #[test]
    fn noisy_fit_residual_small() {
        let planted = DriftModel {
            a: [1e-5, 2e-3, 0.01, 1e-4, 1e-3],
            valid_range: (-10.0, 50.0),
        };
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Vec<f64> = (0..7)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    1e-4 * e
                })
                .collect();
            let rec = record_from(&planted, |i| noise[i]);
            let fit = fit_rational_traced(&rec).unwrap();
            let rms = (rational_sse(&fit.model, &rec) / 7.0).sqrt();
            assert!(rms <= 2e-4, "seed {seed}: {rms}");
            for w in fit.objective_trace.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn too_few_temperatures() {
        let rec = ThermalRecord {
            samples: vec![(0.0, 0.0), (10.0, 0.1), (20.0, 0.2), (30.0, 0.3), (30.0, 0.31)],
        };
        assert!(matches!(fit_rational(&rec), Err(Error::Data(_))));
    }

    #[test]
    fn pole_in_range_is_rejected() {
        let m = DriftModel {
            a: [0.0, 0.0, 1.0, 0.0, -0.05],
            valid_range: (-10.0, 50.0),
        };
        let err = m.check_denominator().unwrap_err();
        assert!(err.to_string().contains("polynomial"));
    }

    #[test]
    fn compensation_examples() {
        let zero = DriftModel::zero((-10.0, 50.0));
        assert_eq!(compensate(1.234, 20.0, &zero).torque, 1.234);
        let c = DriftModel {
            a: [0.0, 0.0, 0.05, 0.0, 0.0],
            valid_range: (-10.0, 50.0),
        };
        let out = compensate(1.0, 25.0, &c);
        assert!((out.torque - 0.95).abs() < 1e-15);
        assert!(!out.clamped);
        let m = DriftModel {
            a: [1e-5, 2e-3, 0.01, 1e-4, 1e-3],
            valid_range: (-10.0, 50.0),
        };
        let out = compensate(0.0, 80.0, &m);
        assert!(out.clamped);
        assert_eq!(out.torque, -m.eval_raw(50.0));
    }

    #[test]
    fn drift_rms_examples() {
        let zeros = vec![0.0; 10];
        let temps = vec![25.0; 10];
        assert_eq!(drift_rms(&zeros, &zeros, &temps, None).unwrap(), 0.0);
        let out = vec![0.0442; 10];
        assert!((drift_rms(&out, &zeros, &temps, None).unwrap() - 0.0442).abs() < 1e-15);
        assert!(drift_rms(&[], &[], &[], None).is_err());
    }

    #[test]
    fn aggregation_uses_final_window() {
        let t: Vec<f64> = (0..2400).map(|k| k as f64).collect();
        let temp: Vec<f64> = t.iter().map(|&x| if x < 1200.0 { x / 100.0 } else { 30.0 }).collect();
        let out = temp.clone();
        let rec = aggregate_setpoints(&t, &temp, &out, 2, 1200.0, 300.0).unwrap();
        // mean of 9.00..11.99 is 10.495
        assert!((rec.samples[0].0 - 10.495).abs() < 1e-12);
        assert_eq!(rec.samples[1], (30.0, 30.0));
    }

    #[test]
    fn rational_beats_quadratic_on_rational_data() {
        let planted = DriftModel {
            a: [-2e-5, 3e-3, 0.02, 4e-4, 2e-2],
            valid_range: (-10.0, 50.0),
        };
        planted.check_denominator().unwrap();
        let rec = record_from(&planted, |_| 0.0);
        let m = fit_rational(&rec).unwrap();
        let (_, quad) = fit_quadratic(&rec).unwrap();
        assert!(rational_sse(&m, &rec) <= quad);
        assert!(quad > 1e-8);
    }

    proptest! {
        #[test]
        fn compensation_inverts(raw in -20.0f64..20.0, t in -30.0f64..70.0) {
            let m = DriftModel { a: [1e-5, 2e-3, 0.01, 1e-4, 1e-3], valid_range: (-10.0, 50.0) };
            let back = compensate(raw, t, &m).torque + m.eval(t);
            prop_assert!((back - raw).abs() <= 1e-12);
        }

        #[test]
        fn accepted_models_have_positive_denominator(a1 in -1e-4f64..1e-4, a2 in -1e-2f64..1e-2, a4 in 0.0f64..1e-3, a5 in -1e-2f64..1e-2) {
            let planted = DriftModel { a: [a1, a2, 0.01, a4, a5], valid_range: (-10.0, 50.0) };
            prop_assume!(planted.check_denominator().is_ok());
            if let Ok(fit) = fit_rational_traced(&record_from(&planted, |i| 1e-4 * ((i * 7919) % 13) as f64 / 13.0)) {
                let (lo, hi) = fit.model.valid_range;
                let mut t = lo;
                while t <= hi {
                    prop_assert!(fit.model.denominator(t) > 0.0);
                    t += ROOT_SCAN_STEP;
                }
                for w in fit.objective_trace.windows(2) {
                    prop_assert!(w[1] <= w[0]);
                }
            }
        }
    }
}
