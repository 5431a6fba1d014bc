//! Closed-loop motor experiments: a geared joint with stick-slip friction,
//! a current path that under-delivers at low torque, PI torque control with
//! back-calculation anti-windup and an admittance outer loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationModel;
use crate::sensor_sim::{AdcModel, ArrayProbe, ChannelModel, HysteresisShape, N_CHANNELS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    /// Rotor plus arm inertia, kg·m².
    pub inertia: f64,
    /// N·m·s/rad.
    pub b_visc: f64,
    /// Breakaway torque, N·m.
    pub tau_stiction: f64,
    /// Sliding friction, N·m.
    pub tau_coulomb: f64,
    /// Karnopp velocity window, rad/s.
    pub v_eps: f64,
    pub torque_limit: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            inertia: 5e-3,
            b_visc: 2e-3,
            tau_stiction: 0.13,
            tau_coulomb: 0.10,
            v_eps: 1e-3,
            torque_limit: 18.0,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.inertia > 0.0) {
            return Err(Error::Config("plant inertia must be > 0".into()));
        }
        if !(self.tau_coulomb >= 0.0 && self.tau_stiction >= self.tau_coulomb) {
            return Err(Error::Config("plant friction needs tau_stiction >= tau_coulomb >= 0".into()));
        }
        if !(self.b_visc >= 0.0 && self.v_eps > 0.0 && self.torque_limit > 0.0) {
            return Err(Error::Config("plant b_visc >= 0, v_eps > 0 and torque_limit > 0 required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Stuck,
    Sliding,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub theta: f64,
    pub omega: f64,
    pub mode: Mode,
}

impl Default for PlantState {
    fn default() -> Self {
        Self {
            theta: 0.0,
            omega: 0.0,
            mode: Mode::Stuck,
        }
    }
}

/// Work done on the rotor during one step, J.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepEnergy {
    pub input: f64,
    /// Always ≤ 0.
    pub friction: f64,
}

pub fn plant_step(state: PlantState, tau_input: f64, tau_ext: f64, p: &PlantParams, dt: f64) -> Result<PlantState> {
    Ok(plant_step_audited(state, tau_input, tau_ext, p, dt)?.0)
}

/// One Karnopp stick-slip step with semi-implicit Euler integration.
///
/// Inside the velocity window the rotor sticks while the net torque stays
/// within breakaway. A sliding step that would reverse the velocity stops at
/// zero instead, so friction never does positive work.
pub fn plant_step_audited(
    state: PlantState,
    tau_input: f64,
    tau_ext: f64,
    p: &PlantParams,
    dt: f64,
) -> Result<(PlantState, StepEnergy)> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::domain("dt", "must be finite and > 0"));
    }
    if !(tau_input.is_finite() && tau_ext.is_finite() && state.omega.is_finite() && state.theta.is_finite()) {
        return Err(Error::Data("non-finite plant input or state".into()));
    }
    let j = p.inertia;
    let net = tau_input + tau_ext;
    let mut omega0 = state.omega;
    let mut energy = StepEnergy::default();

    if omega0.abs() < p.v_eps {
        // Velocity inside the window counts as rest; its kinetic energy goes to friction.
        energy.friction -= 0.5 * j * omega0 * omega0;
        omega0 = 0.0;
        if net.abs() <= p.tau_stiction {
            let next = PlantState {
                theta: state.theta,
                omega: 0.0,
                mode: Mode::Stuck,
            };
            return Ok((next, energy));
        }
    }

    let s = if omega0 != 0.0 { omega0.signum() } else { net.signum() };
    let resist = s * p.tau_coulomb + p.b_visc * omega0;
    let force = net - resist;
    let omega1 = omega0 + dt * force / j;

    if s * omega1 < 0.0 {
        let t0 = j * omega0.abs() / force.abs();
        energy.input += net * omega0 * t0 / 2.0;
        energy.friction -= resist * omega0 * t0 / 2.0;
        let mode = if net.abs() <= p.tau_stiction { Mode::Stuck } else { Mode::Sliding };
        let next = PlantState {
            theta: state.theta + omega0 * t0 / 2.0,
            omega: 0.0,
            mode,
        };
        return Ok((next, energy));
    }

    let mean_omega = (omega0 + omega1) / 2.0;
    energy.input += net * dt * mean_omega;
    energy.friction -= resist * dt * mean_omega;
    let next = PlantState {
        theta: state.theta + dt * omega1,
        omega: omega1,
        mode: Mode::Sliding,
    };
    Ok((next, energy))
}

pub fn kinetic_energy(state: &PlantState, p: &PlantParams) -> f64 {
    0.5 * p.inertia * state.omega * state.omega
}

/// Commanded → delivered torque of the current-controlled path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurrentTorqueMap {
    /// `(commanded, delivered)` for positive torque, starting at the origin.
    /// Negative commands mirror these.
    pub breakpoints: Vec<(f64, f64)>,
    pub torque_limit: f64,
}

impl Default for CurrentTorqueMap {
    fn default() -> Self {
        Self {
            breakpoints: vec![(0.0, 0.0), (0.05, 0.015), (0.1, 0.04), (0.2, 0.13)],
            torque_limit: 18.0,
        }
    }
}

impl CurrentTorqueMap {
    pub fn validate(&self) -> Result<()> {
        let b = &self.breakpoints;
        if b.first() != Some(&(0.0, 0.0)) {
            return Err(Error::Config("current torque map must start at (0, 0)".into()));
        }
        for w in b.windows(2) {
            if !(w[1].0 > w[0].0 && w[1].1 >= w[0].1) {
                return Err(Error::Config("current torque map must be increasing in command and non-decreasing in torque".into()));
            }
        }
        if !(self.torque_limit > 0.0) {
            return Err(Error::Config("torque_limit must be > 0".into()));
        }
        Ok(())
    }

    /// Piecewise-linear delivery, unity slope beyond the last breakpoint,
    /// clamped at the torque limit.
    pub fn deliver(&self, tau_cmd: f64) -> f64 {
        let x = tau_cmd.abs();
        let b = &self.breakpoints;
        let y = match b.iter().position(|&(c, _)| c >= x) {
            Some(0) => b[0].1,
            Some(i) => {
                let (c0, d0) = b[i - 1];
                let (c1, d1) = b[i];
                d0 + (d1 - d0) * (x - c0) / (c1 - c0)
            }
            None => {
                let (c, d) = *b.last().expect("validated map");
                d + (x - c)
            }
        };
        tau_cmd.signum() * y.min(self.torque_limit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiGains {
    pub kp: f64,
    pub ki: f64,
    pub kb_aw: f64,
    pub ts: f64,
}

impl Default for PiGains {
    fn default() -> Self {
        Self {
            kp: 0.12,
            ki: 12.0,
            kb_aw: 5.0,
            ts: 0.001,
        }
    }
}

/// Returns `(command, next integrator state)`. The integrator is advanced
/// after the output is formed.
pub fn pi_step(reference: f64, measured: f64, gains: &PiGains, integ: f64, u_limit: f64) -> (f64, f64) {
    let e = reference - measured;
    let u_unsat = gains.kp * e + gains.ki * integ;
    let u = u_unsat.clamp(-u_limit, u_limit);
    let integ = integ + gains.ts * (e + gains.kb_aw * (u - u_unsat));
    (u, integ)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmittanceParams {
    pub md: f64,
    pub bd: f64,
    pub kd: f64,
    pub theta0: f64,
    /// Inner position gain, N·m/rad.
    pub kp_pd: f64,
    /// Inner velocity gain, N·m·s/rad.
    pub kv_pd: f64,
    pub ts: f64,
}

impl Default for AdmittanceParams {
    fn default() -> Self {
        Self {
            md: 0.03,
            bd: 0.6,
            kd: 0.0,
            theta0: 0.0,
            kp_pd: 20.0,
            kv_pd: 0.5,
            ts: 0.001,
        }
    }
}

impl AdmittanceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.md > 0.0) {
            return Err(Error::Config(format!("admittance md must be > 0, got {}", self.md)));
        }
        if !(self.bd >= 0.0 && self.kd >= 0.0 && self.ts > 0.0) {
            return Err(Error::Config("admittance needs bd >= 0, kd >= 0 and ts > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReferenceState {
    pub theta_r: f64,
    pub omega_r: f64,
}

/// One admittance update followed by the inner PD law.
///
/// The reference velocity is integrated first and the reference angle uses
/// the updated velocity; the PD law tracks the updated reference.
pub fn admittance_step(
    tau_ext: f64,
    reference: ReferenceState,
    params: &AdmittanceParams,
    theta: f64,
    omega: f64,
) -> Result<(f64, ReferenceState)> {
    params.validate()?;
    let acc = (tau_ext - params.bd * reference.omega_r - params.kd * (reference.theta_r - params.theta0)) / params.md;
    let omega_r = reference.omega_r + params.ts * acc;
    let theta_r = reference.theta_r + params.ts * omega_r;
    let tau_cmd = params.kp_pd * (theta_r - theta) + params.kv_pd * (omega_r - omega);
    Ok((tau_cmd, ReferenceState { theta_r, omega_r }))
}

/// Anything that turns a true load torque into a measured one.
pub trait TorqueSensor {
    fn measure(&mut self, tau: f64) -> f64;
}

/// Photo-reflector array followed by the ADC and a calibrated model.
#[derive(Debug, Clone)]
pub struct SensorChain {
    probe: ArrayProbe,
    adc: AdcModel,
    model: CalibrationModel,
    temperature: f64,
}

impl SensorChain {
    pub fn new(
        channels: [ChannelModel; N_CHANNELS],
        hysteresis: HysteresisShape,
        adc: AdcModel,
        model: CalibrationModel,
        seed: u64,
    ) -> Result<Self> {
        if model.spec.n_channels != N_CHANNELS {
            return Err(Error::Config(format!(
                "calibration model expects {} channels, the array has {N_CHANNELS}",
                model.spec.n_channels
            )));
        }
        Ok(Self {
            probe: ArrayProbe::new(channels, None, hysteresis, seed)?,
            adc,
            model,
            temperature: 25.0,
        })
    }
}

impl TorqueSensor for SensorChain {
    fn measure(&mut self, tau: f64) -> f64 {
        let mut v = self.probe.analog(tau, self.temperature);
        for x in v.iter_mut() {
            *x = self.adc.reconstruct(*x);
        }
        self.model.predict_voltages(&v)
    }
}

/// Truth plus white Gaussian noise.
#[derive(Debug, Clone)]
pub struct GaussianSensor {
    pub sigma: f64,
    rng: ChaCha8Rng,
}

impl GaussianSensor {
    pub fn new(sigma: f64, seed: u64) -> Self {
        Self {
            sigma,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl TorqueSensor for GaussianSensor {
    fn measure(&mut self, tau: f64) -> f64 {
        let e: f64 = StandardNormal.sample(&mut self.rng);
        tau + self.sigma * e
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    /// The controller trusts the current path and takes its own command as
    /// the delivered torque.
    CurrentEstimate,
    TorqueSensor,
}

impl FeedbackSource {
    pub fn name(self) -> &'static str {
        match self {
            FeedbackSource::CurrentEstimate => "current_estimate",
            FeedbackSource::TorqueSensor => "torque_sensor",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    /// Blocked output, reference step at `t_start`.
    Step { amplitude: f64 },
    /// Blocked output, step plus additive square disturbance pulses.
    StepDisturbance { amplitude: f64, pulses: Vec<f64> },
    Sine { amplitude: f64, freq_hz: f64 },
    Square { amplitude: f64, freq_hz: f64 },
    /// Free joint driven by a sinusoidal external torque.
    Admittance { amplitude: f64, freq_hz: f64 },
}

pub const SCENARIO_NAMES: [&str; 9] = [
    "step_0.05",
    "step_0.1",
    "step_0.2",
    "step_0.5_disturbance",
    "sine_0.05_0.2hz",
    "square_0.1_1hz",
    "sine_10_0.2hz",
    "admittance_low",
    "admittance_high",
];

/// Pulse amplitudes of the disturbance sweep, N·m.
pub const DISTURBANCE_PULSES: [f64; 9] = [0.1, 0.2, 0.3, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0];

impl Scenario {
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "step_0.05" => Scenario::Step { amplitude: 0.05 },
            "step_0.1" => Scenario::Step { amplitude: 0.1 },
            "step_0.2" => Scenario::Step { amplitude: 0.2 },
            "step_0.5_disturbance" => Scenario::StepDisturbance {
                amplitude: 0.5,
                pulses: DISTURBANCE_PULSES.to_vec(),
            },
            "sine_0.05_0.2hz" => Scenario::Sine {
                amplitude: 0.05,
                freq_hz: 0.2,
            },
            "square_0.1_1hz" => Scenario::Square {
                amplitude: 0.1,
                freq_hz: 1.0,
            },
            "sine_10_0.2hz" => Scenario::Sine {
                amplitude: 10.0,
                freq_hz: 0.2,
            },
            "admittance_low" => Scenario::Admittance {
                amplitude: 0.3,
                freq_hz: 0.2,
            },
            "admittance_high" => Scenario::Admittance {
                amplitude: 1.0,
                freq_hz: 1.0,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown control scenario {other:?}; valid names: {}",
                    SCENARIO_NAMES.join(", ")
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub plant: PlantParams,
    pub current_map: CurrentTorqueMap,
    pub pi: PiGains,
    pub admittance: AdmittanceParams,
    /// Length of tracking runs, s.
    pub duration_s: f64,
    /// Reference onset of step runs, s.
    pub t_start: f64,
    /// Step errors are scored from `t_start + settle_s` on, s.
    pub settle_s: f64,
    /// Disturbance pulse width and gap, s.
    pub pulse_s: f64,
    /// Allowed shift of the delivered torque under a disturbance pulse, N·m.
    pub regulation_band: f64,
    /// Scenarios run by the control-sim command.
    pub scenarios: Vec<String>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            plant: PlantParams::default(),
            current_map: CurrentTorqueMap::default(),
            pi: PiGains::default(),
            admittance: AdmittanceParams::default(),
            duration_s: 10.0,
            t_start: 0.5,
            settle_s: 1.0,
            pulse_s: 1.0,
            regulation_band: 0.05,
            scenarios: SCENARIO_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.current_map.validate()?;
        self.admittance.validate()?;
        let g = &self.pi;
        if !(g.kp >= 0.0 && g.ki >= 0.0 && g.kb_aw >= 0.0 && g.ts > 0.0) {
            return Err(Error::Config("PI gains must be >= 0 and ts > 0".into()));
        }
        if !(self.duration_s > self.t_start + self.settle_s && self.t_start >= 0.0 && self.settle_s >= 0.0 && self.pulse_s > 0.0) {
            return Err(Error::Config("need duration_s > t_start + settle_s, t_start >= 0, settle_s >= 0 and pulse_s > 0".into()));
        }
        for name in &self.scenarios {
            Scenario::from_name(name)?;
        }
        Ok(())
    }
}

/// Outcome of one disturbance pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseOutcome {
    pub amplitude: f64,
    /// Mean delivered torque over the late half of the pulse minus the same
    /// mean over the late half of the preceding gap, N·m.
    pub shift: f64,
    pub regulated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSweep {
    pub pulses: Vec<PulseOutcome>,
    /// Largest amplitude up to which every pulse stayed regulated.
    pub regulated_up_to: Option<f64>,
    /// Smallest amplitude that broke regulation.
    pub first_failure: Option<f64>,
    /// RMS error outside the pulses, N·m.
    pub rms_outside_pulses: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    /// RMS of delivered − reference after settling (admittance: θ_r − θ
    /// over the whole run), N·m or rad.
    pub rms_error: f64,
    /// Same error over the whole run including the step transient.
    pub rms_error_with_transient: f64,
    pub peak_error: f64,
    /// Mean delivered / reference over the last half of a step run.
    pub delivered_ratio: Option<f64>,
    pub disturbance: Option<DisturbanceSweep>,
}

/// Time series of one run, one entry per 1 kHz tick.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub scenario: String,
    pub source: FeedbackSource,
    pub t: Vec<f64>,
    pub reference: Vec<f64>,
    pub command: Vec<f64>,
    pub delivered: Vec<f64>,
    pub measured: Vec<f64>,
    pub omega: Vec<f64>,
    pub theta: Vec<f64>,
    pub summary: ExperimentSummary,
}

impl ExperimentRecord {
    fn with_capacity(scenario: &str, source: FeedbackSource, n: usize) -> Self {
        let v = || Vec::with_capacity(n);
        Self {
            scenario: scenario.to_string(),
            source,
            t: v(),
            reference: v(),
            command: v(),
            delivered: v(),
            measured: v(),
            omega: v(),
            theta: v(),
            summary: ExperimentSummary {
                rms_error: 0.0,
                rms_error_with_transient: 0.0,
                peak_error: 0.0,
                delivered_ratio: None,
                disturbance: None,
            },
        }
    }
}

fn rms(x: impl Iterator<Item = f64>) -> f64 {
    let (mut ss, mut n) = (0.0, 0usize);
    for v in x {
        ss += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (ss / n as f64).sqrt()
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len().max(1) as f64
}

/// Runs `name` under `source`. `sensor` is required for torque-sensor
/// feedback and for admittance runs.
pub fn run_scenario(
    name: &str,
    source: FeedbackSource,
    cfg: &ControlConfig,
    sensor: Option<&mut dyn TorqueSensor>,
) -> Result<ExperimentRecord> {
    cfg.validate()?;
    let scenario = Scenario::from_name(name)?;
    let needs_sensor = source == FeedbackSource::TorqueSensor || matches!(scenario, Scenario::Admittance { .. });
    if matches!(scenario, Scenario::Admittance { .. }) && source == FeedbackSource::CurrentEstimate {
        return Err(Error::Config("admittance scenarios need torque_sensor feedback".into()));
    }
    let mut ideal = GaussianSensor::new(0.0, 0);
    let sensor: &mut dyn TorqueSensor = match sensor {
        Some(s) => s,
        None if needs_sensor => {
            return Err(Error::Config(format!("scenario {name} with {} feedback needs a sensor", source.name())))
        }
        None => &mut ideal,
    };
    match scenario {
        Scenario::Admittance { amplitude, freq_hz } => run_admittance(name, amplitude, freq_hz, cfg, sensor),
        other => run_blocked(name, &other, source, cfg, sensor),
    }
}

fn run_blocked(
    name: &str,
    scenario: &Scenario,
    source: FeedbackSource,
    cfg: &ControlConfig,
    sensor: &mut dyn TorqueSensor,
) -> Result<ExperimentRecord> {
    let ts = cfg.pi.ts;
    let (duration, pulses) = match scenario {
        Scenario::StepDisturbance { pulses, .. } => {
            (cfg.t_start + 1.5 + 2.0 * cfg.pulse_s * pulses.len() as f64, pulses.as_slice())
        }
        _ => (cfg.duration_s, &[][..]),
    };
    let pulse_origin = cfg.t_start + 1.5;
    let disturbance = |t: f64| -> f64 {
        if pulses.is_empty() || t < pulse_origin {
            return 0.0;
        }
        let slot = ((t - pulse_origin) / cfg.pulse_s).floor() as usize;
        if slot % 2 == 1 {
            pulses.get(slot / 2).copied().unwrap_or(0.0)
        } else {
            0.0
        }
    };
    let reference = |t: f64| -> f64 {
        match *scenario {
            Scenario::Step { amplitude } | Scenario::StepDisturbance { amplitude, .. } => {
                if t >= cfg.t_start {
                    amplitude
                } else {
                    0.0
                }
            }
            Scenario::Sine { amplitude, freq_hz } => amplitude * (2.0 * std::f64::consts::PI * freq_hz * t).sin(),
            Scenario::Square { amplitude, freq_hz } => {
                if (t * freq_hz).fract() < 0.5 {
                    amplitude
                } else {
                    -amplitude
                }
            }
            Scenario::Admittance { .. } => unreachable!("handled separately"),
        }
    };

    let n = (duration / ts).round() as usize;
    let mut rec = ExperimentRecord::with_capacity(name, source, n);
    let limit = cfg.plant.torque_limit;
    let (mut u, mut integ) = (0.0, 0.0);
    for k in 0..n {
        let t = k as f64 * ts;
        let r = reference(t);
        let delivered = cfg.current_map.deliver(u) + disturbance(t);
        let measured = match source {
            FeedbackSource::CurrentEstimate => u,
            FeedbackSource::TorqueSensor => sensor.measure(delivered),
        };
        rec.t.push(t);
        rec.reference.push(r);
        rec.command.push(u);
        rec.delivered.push(delivered);
        rec.measured.push(measured);
        rec.omega.push(0.0);
        rec.theta.push(0.0);
        (u, integ) = pi_step(r, measured, &cfg.pi, integ, limit);
    }

    let (onset, settled) = match scenario {
        Scenario::Step { .. } | Scenario::StepDisturbance { .. } => (
            (cfg.t_start / ts).round() as usize,
            ((cfg.t_start + cfg.settle_s) / ts).round() as usize,
        ),
        _ => (0, 0),
    };
    let err = |k: usize| rec.delivered[k] - rec.reference[k];
    rec.summary.rms_error = rms((settled..n).map(err));
    rec.summary.rms_error_with_transient = rms((onset..n).map(err));
    rec.summary.peak_error = (onset..n).map(|k| err(k).abs()).fold(0.0, f64::max);
    if let Scenario::Step { amplitude } = *scenario {
        let half = onset + (n - onset) / 2;
        rec.summary.delivered_ratio = Some(mean(&rec.delivered[half..]) / amplitude);
    }
    if !pulses.is_empty() {
        let idx = |t: f64| ((t / ts).round() as usize).min(n);
        let mut outcomes = Vec::new();
        for (i, &amp) in pulses.iter().enumerate() {
            let on = pulse_origin + (2 * i + 1) as f64 * cfg.pulse_s;
            let half = cfg.pulse_s / 2.0;
            let before = mean(&rec.delivered[idx(on - half)..idx(on)]);
            let during = mean(&rec.delivered[idx(on + half)..idx(on + cfg.pulse_s)]);
            let shift = during - before;
            outcomes.push(PulseOutcome {
                amplitude: amp,
                shift,
                regulated: shift.abs() <= cfg.regulation_band,
            });
        }
        let first_failure = outcomes.iter().find(|o| !o.regulated).map(|o| o.amplitude);
        let regulated_up_to = outcomes.iter().take_while(|o| o.regulated).last().map(|o| o.amplitude);
        let outside = (settled..n).filter(|&k| disturbance(rec.t[k]) == 0.0).map(err);
        rec.summary.disturbance = Some(DisturbanceSweep {
            pulses: outcomes,
            regulated_up_to,
            first_failure,
            rms_outside_pulses: rms(outside),
        });
    }
    Ok(rec)
}

fn run_admittance(
    name: &str,
    amplitude: f64,
    freq_hz: f64,
    cfg: &ControlConfig,
    sensor: &mut dyn TorqueSensor,
) -> Result<ExperimentRecord> {
    let p = &cfg.admittance;
    let ts = p.ts;
    let n = (cfg.duration_s / ts).round() as usize;
    let mut rec = ExperimentRecord::with_capacity(name, FeedbackSource::TorqueSensor, n);
    let mut plant = PlantState::default();
    let mut reference = ReferenceState {
        theta_r: p.theta0,
        omega_r: 0.0,
    };
    let limit = cfg.plant.torque_limit;
    for k in 0..n {
        let t = k as f64 * ts;
        let tau_h = amplitude * (2.0 * std::f64::consts::PI * freq_hz * t).sin();
        let measured = sensor.measure(tau_h);
        let (cmd, next_ref) = admittance_step(measured, reference, p, plant.theta, plant.omega)?;
        let cmd = cmd.clamp(-limit, limit);
        reference = next_ref;
        let delivered = cfg.current_map.deliver(cmd);
        rec.t.push(t);
        rec.reference.push(reference.theta_r);
        rec.command.push(cmd);
        rec.delivered.push(delivered);
        rec.measured.push(measured);
        plant = plant_step(plant, delivered, tau_h, &cfg.plant, ts)?;
        rec.omega.push(plant.omega);
        rec.theta.push(plant.theta);
    }
    let err = |k: usize| rec.reference[k] - rec.theta[k];
    rec.summary.rms_error = rms((0..n).map(err));
    rec.summary.rms_error_with_transient = rec.summary.rms_error;
    rec.summary.peak_error = (0..n).map(|k| err(k).abs()).fold(0.0, f64::max);
    Ok(rec)
}

/// Ratio of torque-sensor to current-estimate RMS error on a step scenario.
pub fn feedback_ratio(name: &str, cfg: &ControlConfig, sensor: &mut dyn TorqueSensor) -> Result<f64> {
    let cur = run_scenario(name, FeedbackSource::CurrentEstimate, cfg, None)?;
    let sen = run_scenario(name, FeedbackSource::TorqueSensor, cfg, Some(sensor))?;
    Ok(sen.summary.rms_error / cur.summary.rms_error)
}
