//! Synthetic photo-reflector array.
//!
//! Signal chain per channel: torque → polynomial voltage response (signed by
//! the quadrant the reflector faces) → loading/unloading hysteresis →
//! temperature drift → Gaussian noise → optional off-axis crosstalk →
//! clamp and 16-bit quantization → reconstruction in volts.
//!
//! Generation is split into an analog iterator ([`AnalogStream`]), an
//! optional crosstalk adapter ([`crosstalk_inject`]) and the ADC stage
//! ([`quantize`]); [`simulate_stream`] chains the usual case.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const N_CHANNELS: usize = 8;

/// Sensitivity band of a single photo-reflector channel, V/(N·m).
pub const GAIN_BAND: (f64, f64) = (0.024, 0.040);

/// One sample of the array.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorFrame {
    /// Seconds since stream start.
    pub t: f64,
    /// Channel voltages, V.
    pub v: [f64; N_CHANNELS],
    pub temp_c: f64,
    /// Reference z-torque, N·m.
    pub tau_ref: Option<f64>,
    /// Off-axis (T_x, T_y), N·m.
    pub tau_xy: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModel {
    /// Small-signal sensitivity, V/(N·m). Always positive; direction lives in `sign`.
    pub gain: f64,
    /// Quadratic response coefficient, V/(N·m)².
    #[serde(default)]
    pub c2: f64,
    /// Cubic response coefficient, V/(N·m)³.
    #[serde(default)]
    pub c3: f64,
    /// Quartic response coefficient, V/(N·m)⁴.
    #[serde(default)]
    pub c4: f64,
    /// Output at zero torque, V.
    pub offset: f64,
    /// White noise standard deviation, V.
    pub noise_sigma: f64,
    /// +1 or −1 depending on the reflector's facing direction.
    pub sign: f64,
    /// Peak loading/unloading offset at mid-span, V, along the torque
    /// direction. See [`HysteresisShape`].
    #[serde(default)]
    pub hysteresis: f64,
}

impl ChannelModel {
    pub fn validate(&self, index: usize) -> Result<()> {
        let bad = |what: &str| {
            Err(Error::Config(format!("channel {}: {what}", index + 1)))
        };
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return bad("gain must be > 0");
        }
        if !(self.offset > 0.0 && self.offset < AdcModel::default().v_ref) {
            return bad("offset must lie in (0, v_ref)");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if self.sign != 1.0 && self.sign != -1.0 {
            return bad("sign must be +1 or -1");
        }
        if !(self.c2.is_finite() && self.c3.is_finite() && self.hysteresis.is_finite()) {
            return bad("non-finite response coefficient");
        }
        Ok(())
    }

    /// Noise-free, hysteresis-free voltage at torque `tau`.
    pub fn static_response(&self, tau: f64) -> f64 {
        self.offset + self.sign * (self.gain * tau + self.c2 * tau * tau + self.c3 * tau.powi(3) + self.c4 * tau.powi(4))
    }
}

/// Rate-independent hysteresis loop shared by all channels.
///
/// The loop term is `sgn(τ) · dir · 4u(1 − u)` with `u = min(|τ|/span, 1)`
/// and `dir = +1` while |τ| grows, `−1` while it shrinks. It vanishes at zero
/// torque and at the span end, so quiet records carry no hysteresis. Each
/// channel adds `sign · hysteresis · loop`, i.e. the split acts along the
/// channel's torque direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HysteresisShape {
    pub span: f64,
}

impl Default for HysteresisShape {
    fn default() -> Self {
        Self { span: 25.0 }
    }
}

impl HysteresisShape {
    fn loop_term(&self, tau: f64, loading: bool) -> f64 {
        let u = (tau.abs() / self.span).min(1.0);
        let dir = if loading { 1.0 } else { -1.0 };
        tau.signum() * dir * 4.0 * u * (1.0 - u)
    }
}

/// Per-channel zero drift `d1·ΔT + d2·ΔT²` in volts, ΔT = T − t_ref.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelDrift {
    pub d1: f64,
    pub d2: f64,
    pub t_ref: f64,
}

impl ChannelDrift {
    pub fn volts(&self, temp_c: f64) -> f64 {
        let dt = temp_c - self.t_ref;
        self.d1 * dt + self.d2 * dt * dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdcModel {
    pub v_ref: f64,
    pub bits: u32,
}

impl Default for AdcModel {
    fn default() -> Self {
        Self { v_ref: 3.3, bits: 16 }
    }
}

impl AdcModel {
    pub fn lsb(&self) -> f64 {
        self.v_ref / (1u64 << self.bits) as f64
    }

    pub fn max_count(&self) -> u32 {
        ((1u64 << self.bits) - 1) as u32
    }

    /// Round-to-nearest conversion after clamping to the representable range.
    pub fn to_counts(&self, v: f64) -> u32 {
        let lsb = self.lsb();
        let max = self.max_count();
        let clamped = v.clamp(0.0, f64::from(max) * lsb);
        (clamped / lsb).round() as u32
    }

    pub fn to_volts(&self, counts: u32) -> f64 {
        f64::from(counts) * self.lsb()
    }

    /// Quantized voltage as seen downstream of the converter.
    pub fn reconstruct(&self, v: f64) -> f64 {
        self.to_volts(self.to_counts(v))
    }
}

/// Torque as a function of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TorqueProfile {
    Constant {
        value: f64,
        duration: f64,
    },
    Step {
        amplitude: f64,
        t_step: f64,
        duration: f64,
    },
    Ramp {
        from: f64,
        to: f64,
        duration: f64,
    },
    Sine {
        amplitude: f64,
        freq_hz: f64,
        #[serde(default)]
        offset: f64,
        duration: f64,
    },
    Square {
        amplitude: f64,
        freq_hz: f64,
        duration: f64,
    },
    /// Loading/unloading repetitions: for each direction (positive first when
    /// `both_directions`), `cycles` times dwell at zero, ramp to `peak`, hold,
    /// ramp back. A final dwell closes the record.
    Cycles {
        peak: f64,
        cycles: u32,
        ramp_s: f64,
        hold_s: f64,
        dwell_s: f64,
        both_directions: bool,
    },
}

/// Direction of travel inside a [`TorqueProfile::Cycles`] record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Loading,
    Unloading,
}

/// One monotone leg of a cycles profile, as half-open sample range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleSegment {
    pub cycle_id: u32,
    pub branch: Branch,
    /// +1 for positive torque cycles, −1 for negative.
    pub polarity: i32,
    pub start: usize,
    pub end: usize,
}

impl TorqueProfile {
    /// ±25 N·m, five loading/unloading repetitions per direction.
    pub fn calibration_cycles() -> Self {
        TorqueProfile::Cycles {
            peak: 25.0,
            cycles: 5,
            ramp_s: 2.0,
            hold_s: 1.0,
            dwell_s: 2.0,
            both_directions: true,
        }
    }

    pub fn duration(&self) -> f64 {
        match *self {
            TorqueProfile::Constant { duration, .. }
            | TorqueProfile::Step { duration, .. }
            | TorqueProfile::Ramp { duration, .. }
            | TorqueProfile::Sine { duration, .. }
            | TorqueProfile::Square { duration, .. } => duration,
            TorqueProfile::Cycles {
                cycles,
                ramp_s,
                hold_s,
                dwell_s,
                both_directions,
                ..
            } => {
                let dirs = if both_directions { 2.0 } else { 1.0 };
                dirs * f64::from(cycles) * (dwell_s + 2.0 * ramp_s + hold_s) + dwell_s
            }
        }
    }

    pub fn torque(&self, t: f64) -> f64 {
        match *self {
            TorqueProfile::Constant { value, .. } => value,
            TorqueProfile::Step {
                amplitude, t_step, ..
            } => {
                if t >= t_step {
                    amplitude
                } else {
                    0.0
                }
            }
            TorqueProfile::Ramp { from, to, duration } => {
                let s = if duration > 0.0 { (t / duration).clamp(0.0, 1.0) } else { 1.0 };
                from + (to - from) * s
            }
            TorqueProfile::Sine {
                amplitude,
                freq_hz,
                offset,
                ..
            } => offset + amplitude * (2.0 * std::f64::consts::PI * freq_hz * t).sin(),
            TorqueProfile::Square {
                amplitude, freq_hz, ..
            } => {
                let phase = (t * freq_hz).rem_euclid(1.0);
                if phase < 0.5 {
                    amplitude
                } else {
                    -amplitude
                }
            }
            TorqueProfile::Cycles {
                peak,
                cycles,
                ramp_s,
                hold_s,
                dwell_s,
                both_directions,
            } => {
                let period = dwell_s + 2.0 * ramp_s + hold_s;
                let total = f64::from(cycles) * period;
                let (polarity, local) = if t < total {
                    (1.0, t)
                } else if both_directions && t < 2.0 * total {
                    (-1.0, t - total)
                } else {
                    return 0.0;
                };
                let u = local.rem_euclid(period);
                let mag = if u < dwell_s {
                    0.0
                } else if u < dwell_s + ramp_s {
                    peak * (u - dwell_s) / ramp_s
                } else if u < dwell_s + ramp_s + hold_s {
                    peak
                } else {
                    peak * (1.0 - (u - dwell_s - ramp_s - hold_s) / ramp_s)
                };
                polarity * mag
            }
        }
    }

    /// Sample ranges of each loading and unloading leg at `rate` Hz.
    /// Empty for non-cycle profiles.
    pub fn cycle_segments(&self, rate: f64) -> Vec<CycleSegment> {
        let TorqueProfile::Cycles {
            cycles,
            ramp_s,
            hold_s,
            dwell_s,
            both_directions,
            ..
        } = *self
        else {
            return Vec::new();
        };
        let period = dwell_s + 2.0 * ramp_s + hold_s;
        let idx = |t: f64| (t * rate).round() as usize;
        let mut out = Vec::new();
        let dirs: &[i32] = if both_directions { &[1, -1] } else { &[1] };
        let mut id = 0;
        for (d, &polarity) in dirs.iter().enumerate() {
            for c in 0..cycles {
                let t0 = (d as f64 * f64::from(cycles) + f64::from(c)) * period + dwell_s;
                out.push(CycleSegment {
                    cycle_id: id,
                    branch: Branch::Loading,
                    polarity,
                    start: idx(t0),
                    end: idx(t0 + ramp_s) + 1,
                });
                out.push(CycleSegment {
                    cycle_id: id,
                    branch: Branch::Unloading,
                    polarity,
                    start: idx(t0 + ramp_s + hold_s),
                    end: idx(t0 + 2.0 * ramp_s + hold_s) + 1,
                });
                id += 1;
            }
        }
        out
    }
}

/// Temperature seen by the sensor's internal thermometer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TemperatureProfile {
    Constant {
        value: f64,
    },
    /// Piecewise-constant chamber setpoints followed with a first-order lag.
    Setpoints {
        setpoints: Vec<f64>,
        hold_s: f64,
        lag_s: f64,
        initial: f64,
    },
    /// First-order warm-up from `start` toward `end`.
    WarmUp {
        start: f64,
        end: f64,
        tau_s: f64,
    },
}

impl Default for TemperatureProfile {
    fn default() -> Self {
        TemperatureProfile::Constant { value: 25.0 }
    }
}

impl TemperatureProfile {
    pub fn temperature(&self, t: f64) -> f64 {
        match self {
            TemperatureProfile::Constant { value } => *value,
            TemperatureProfile::WarmUp { start, end, tau_s } => {
                end + (start - end) * (-t / tau_s).exp()
            }
            TemperatureProfile::Setpoints {
                setpoints,
                hold_s,
                lag_s,
                initial,
            } => {
                // Exact solution of the lag ODE across each hold.
                let mut temp = *initial;
                let mut remaining = t;
                for &sp in setpoints {
                    let dt = remaining.min(*hold_s);
                    temp = sp + (temp - sp) * (-dt / lag_s).exp();
                    remaining -= dt;
                    if remaining <= 0.0 {
                        break;
                    }
                }
                temp
            }
        }
    }
}

/// Pre-ADC frame: voltages before clamping and quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalogFrame(pub SensorFrame);

/// Stateful per-sample channel model: tracks the hysteresis branch and owns
/// the noise generator. Streams and closed-loop simulations both sample
/// through it.
#[derive(Debug, Clone)]
pub struct ArrayProbe {
    channels: [ChannelModel; N_CHANNELS],
    drift: Option<[ChannelDrift; N_CHANNELS]>,
    hysteresis: HysteresisShape,
    prev_abs: f64,
    loading: bool,
    rng: ChaCha8Rng,
}

impl ArrayProbe {
    pub fn new(
        channels: [ChannelModel; N_CHANNELS],
        drift: Option<[ChannelDrift; N_CHANNELS]>,
        hysteresis: HysteresisShape,
        seed: u64,
    ) -> Result<Self> {
        for (i, ch) in channels.iter().enumerate() {
            ch.validate(i)?;
        }
        if !(hysteresis.span > 0.0) {
            return Err(Error::Config("hysteresis span must be > 0".into()));
        }
        Ok(Self {
            channels,
            drift,
            hysteresis,
            prev_abs: 0.0,
            loading: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Analog (pre-ADC) voltages for torque `tau` at temperature `temp`.
    pub fn analog(&mut self, tau: f64, temp: f64) -> [f64; N_CHANNELS] {
        let abs = tau.abs();
        if abs > self.prev_abs {
            self.loading = true;
        } else if abs < self.prev_abs {
            self.loading = false;
        }
        self.prev_abs = abs;
        let loop_term = self.hysteresis.loop_term(tau, self.loading);

        let mut v = [0.0; N_CHANNELS];
        for (i, ch) in self.channels.iter().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut self.rng);
            let drift = self.drift.map_or(0.0, |d| d[i].volts(temp));
            v[i] = ch.static_response(tau) + ch.sign * ch.hysteresis * loop_term + drift + ch.noise_sigma * noise;
        }
        v
    }
}

/// Iterator over analog frames of one simulated stream.
pub struct AnalogStream {
    profile: TorqueProfile,
    off_axis: Option<(TorqueProfile, TorqueProfile)>,
    temperature: TemperatureProfile,
    probe: ArrayProbe,
    rate: f64,
    n_samples: usize,
    k: usize,
}

/// Everything that parameterizes a stream besides its seed.
#[derive(Debug, Clone)]
pub struct StreamSpec {
    pub profile: TorqueProfile,
    /// Optional (T_x, T_y) profiles recorded into each frame.
    pub off_axis: Option<(TorqueProfile, TorqueProfile)>,
    pub temperature: TemperatureProfile,
    pub channels: [ChannelModel; N_CHANNELS],
    pub drift: Option<[ChannelDrift; N_CHANNELS]>,
    pub hysteresis: HysteresisShape,
    pub rate: f64,
}

impl StreamSpec {
    pub fn new(profile: TorqueProfile, channels: [ChannelModel; N_CHANNELS]) -> Self {
        Self {
            profile,
            off_axis: None,
            temperature: TemperatureProfile::default(),
            channels,
            drift: None,
            hysteresis: HysteresisShape::default(),
            rate: crate::SAMPLE_RATE_HZ,
        }
    }

    pub fn n_samples(&self) -> usize {
        (self.profile.duration() * self.rate).round() as usize
    }
}

/// Starts an analog stream. Fails on invalid channel parameters or rate.
pub fn simulate_analog(spec: &StreamSpec, seed: u64) -> Result<AnalogStream> {
    if !(spec.rate.is_finite() && spec.rate > 0.0) {
        return Err(Error::Config(format!("rate must be > 0, got {}", spec.rate)));
    }
    Ok(AnalogStream {
        profile: spec.profile.clone(),
        off_axis: spec.off_axis.clone(),
        temperature: spec.temperature.clone(),
        probe: ArrayProbe::new(spec.channels, spec.drift, spec.hysteresis, seed)?,
        rate: spec.rate,
        n_samples: spec.n_samples(),
        k: 0,
    })
}

impl Iterator for AnalogStream {
    type Item = AnalogFrame;

    fn next(&mut self) -> Option<AnalogFrame> {
        if self.k >= self.n_samples {
            return None;
        }
        let t = self.k as f64 / self.rate;
        self.k += 1;
        let tau = self.profile.torque(t);
        let temp = self.temperature.temperature(t);
        let v = self.probe.analog(tau, temp);
        let tau_xy = self
            .off_axis
            .as_ref()
            .map(|(px, py)| (px.torque(t), py.torque(t)));
        Some(AnalogFrame(SensorFrame {
            t,
            v,
            temp_c: temp,
            tau_ref: Some(tau),
            tau_xy,
        }))
    }
}

/// Per-channel off-axis sensitivity, V/(N·m).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Crosstalk {
    pub x: [f64; N_CHANNELS],
    pub y: [f64; N_CHANNELS],
}

/// Adds `coupling·T_x + coupling·T_y` to every analog frame.
/// Frames without off-axis torque pass through unchanged.
pub fn crosstalk_inject<I>(stream: I, coupling: Crosstalk) -> impl Iterator<Item = AnalogFrame>
where
    I: Iterator<Item = AnalogFrame>,
{
    stream.map(move |AnalogFrame(mut f)| {
        if let Some((tx, ty)) = f.tau_xy {
            for i in 0..N_CHANNELS {
                f.v[i] += coupling.x[i] * tx + coupling.y[i] * ty;
            }
        }
        AnalogFrame(f)
    })
}

/// ADC stage: clamp, quantize and reconstruct each channel.
pub fn quantize<I>(stream: I, adc: AdcModel) -> impl Iterator<Item = SensorFrame>
where
    I: Iterator<Item = AnalogFrame>,
{
    stream.map(move |AnalogFrame(mut f)| {
        for v in f.v.iter_mut() {
            *v = adc.reconstruct(*v);
        }
        f
    })
}

/// Analog generation followed by the ADC stage.
pub fn simulate_stream(
    spec: &StreamSpec,
    adc: AdcModel,
    seed: u64,
) -> Result<impl Iterator<Item = SensorFrame>> {
    Ok(quantize(simulate_analog(spec, seed)?, adc))
}

/// Fixture describing the reproducible reference array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayFixture {
    pub offset_nominal: f64,
    pub offset_spread: f64,
    /// Noise of the quiet channels, V.
    pub noise_low: f64,
    /// Noise multiplier of the noisy half.
    pub noise_ratio: f64,
    /// Channels (0-based) in the noisy half.
    pub noisy_channels: Vec<usize>,
    pub c2: f64,
    pub c3: f64,
    #[serde(default)]
    pub c4: f64,
    /// Relative spread applied to c2/c3 per channel.
    pub curvature_spread: f64,
    /// Hysteresis of quiet channels, V.
    pub hysteresis_low_noise: f64,
    /// Hysteresis of noisy channels, V.
    pub hysteresis_noisy: f64,
    pub hysteresis_span: f64,
}

const REFERENCE_FIXTURE: &str = include_str!("../fixtures/reference_array.toml");

impl ArrayFixture {
    pub fn reference() -> Self {
        toml::from_str(REFERENCE_FIXTURE).expect("bundled fixture parses")
    }

    /// Draws an array from this fixture. Gains are uniform over
    /// [`GAIN_BAND`]; channel pairs alternate sign by facing direction.
    pub fn build(&self, seed: u64) -> [ChannelModel; N_CHANNELS] {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        std::array::from_fn(|i| {
            let gain = rng.random_range(GAIN_BAND.0..=GAIN_BAND.1);
            let offset = self.offset_nominal + self.offset_spread * rng.random_range(-1.0..=1.0);
            let c2 = self.c2 * (1.0 + self.curvature_spread * rng.random_range(-1.0..=1.0));
            let c3 = self.c3 * (1.0 + self.curvature_spread * rng.random_range(-1.0..=1.0));
            let c4 = self.c4 * (1.0 + self.curvature_spread * rng.random_range(-1.0..=1.0));
            let noisy = self.noisy_channels.contains(&i);
            ChannelModel {
                gain,
                c2,
                c3,
                c4,
                offset,
                noise_sigma: if noisy { self.noise_low * self.noise_ratio } else { self.noise_low },
                sign: if (i / 2) % 2 == 0 { 1.0 } else { -1.0 },
                hysteresis: if noisy {
                    self.hysteresis_noisy
                } else {
                    self.hysteresis_low_noise
                },
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&i) = self.noisy_channels.iter().find(|&&i| i >= N_CHANNELS) {
            return Err(Error::Config(format!("noisy channel index {i} out of range 0..{N_CHANNELS}")));
        }
        if !(self.hysteresis_span > 0.0 && self.noise_low >= 0.0 && self.noise_ratio >= 0.0) {
            return Err(Error::Config("array fixture needs hysteresis_span > 0 and non-negative noise".into()));
        }
        Ok(())
    }

    pub fn hysteresis_shape(&self) -> HysteresisShape {
        HysteresisShape {
            span: self.hysteresis_span,
        }
    }
}

impl Default for ArrayFixture {
    fn default() -> Self {
        Self::reference()
    }
}

/// Reproducible eight-channel array with heterogeneous noise.
pub fn default_reference_array(seed: u64) -> [ChannelModel; N_CHANNELS] {
    ArrayFixture::reference().build(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quiet_channels() -> [ChannelModel; N_CHANNELS] {
        let mut ch = default_reference_array(1);
        for c in ch.iter_mut() {
            c.noise_sigma = 0.0;
        }
        ch
    }

    #[test]
    fn null_input_gives_offsets() {
        let channels = quiet_channels();
        let spec = StreamSpec::new(
            TorqueProfile::Constant {
                value: 0.0,
                duration: 0.1,
            },
            channels,
        );
        for f in simulate_analog(&spec, 3).unwrap() {
            for i in 0..N_CHANNELS {
                assert_eq!(f.0.v[i], channels[i].offset);
            }
        }
        let adc = AdcModel::default();
        let frames: Vec<_> = simulate_stream(&spec, adc, 3).unwrap().collect();
        assert_eq!(frames.len(), 100);
        for i in 0..N_CHANNELS {
            assert!((frames[0].v[i] - channels[i].offset).abs() <= 0.5 * adc.lsb());
        }
    }

    #[test]
    fn gain_of_point_zero_four_gives_one_volt_at_25() {
        let ch = ChannelModel {
            gain: 0.04,
            c2: 0.0,
            c3: 0.0,
            c4: 0.0,
            offset: 1.0,
            noise_sigma: 0.0,
            sign: 1.0,
            hysteresis: 0.0,
        };
        assert!((ch.static_response(25.0) - ch.offset - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adc_step_and_two_volt_span() {
        let adc = AdcModel::default();
        assert!((adc.lsb() - 50.354e-6).abs() < 1e-9);
        // 2 V / 3.3 V · 65536 = 39718.8
        assert_eq!(adc.to_counts(2.0), 39719);
        assert_eq!(adc.to_counts(-1.0), 0);
        assert_eq!(adc.to_counts(10.0), 65535);
    }

    #[test]
    fn same_seed_same_stream() {
        let spec = StreamSpec::new(
            TorqueProfile::Sine {
                amplitude: 10.0,
                freq_hz: 1.0,
                offset: 0.0,
                duration: 0.5,
            },
            default_reference_array(9),
        );
        let a: Vec<_> = simulate_stream(&spec, AdcModel::default(), 11).unwrap().collect();
        let b: Vec<_> = simulate_stream(&spec, AdcModel::default(), 11).unwrap().collect();
        let c: Vec<_> = simulate_stream(&spec, AdcModel::default(), 12).unwrap().collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(default_reference_array(4), default_reference_array(4));
    }

    #[test]
    fn default_gains_in_band_and_signs_alternate() {
        for seed in 0..20 {
            let arr = default_reference_array(seed);
            for (i, c) in arr.iter().enumerate() {
                assert!(c.gain >= GAIN_BAND.0 && c.gain <= GAIN_BAND.1);
                assert_eq!(c.sign, if (i / 2) % 2 == 0 { 1.0 } else { -1.0 });
                c.validate(i).unwrap();
            }
        }
    }

    #[test]
    fn default_array_never_clips_within_25() {
        let adc = AdcModel::default();
        for seed in 0..10 {
            let arr = default_reference_array(seed);
            for k in 0..=1000 {
                let tau = -25.0 + 50.0 * k as f64 / 1000.0;
                for c in &arr {
                    let v = c.static_response(tau) + c.hysteresis.abs() + 6.0 * c.noise_sigma;
                    let w = c.static_response(tau) - c.hysteresis.abs() - 6.0 * c.noise_sigma;
                    assert!(v < adc.v_ref - adc.lsb() && w > 0.0, "seed {seed} tau {tau}");
                }
            }
        }
    }

    #[test]
    fn linear_channels_are_monotone() {
        let mut arr = quiet_channels();
        for c in arr.iter_mut() {
            c.c2 = 0.0;
            c.c3 = 0.0;
        }
        for c in &arr {
            let mut prev = c.static_response(-25.0);
            for k in 1..=500 {
                let v = c.static_response(-25.0 + 0.1 * k as f64);
                assert!((v - prev) * c.sign > 0.0);
                prev = v;
            }
        }
    }

    #[test]
    fn default_curvature_keeps_monotone() {
        for c in quiet_channels() {
            let mut prev = c.static_response(-25.0);
            for k in 1..=500 {
                let v = c.static_response(-25.0 + 0.1 * k as f64);
                assert!((v - prev) * c.sign > 0.0);
                prev = v;
            }
        }
    }

    #[test]
    fn crosstalk_zero_and_sized_coupling() {
        let mut spec = StreamSpec::new(
            TorqueProfile::Constant {
                value: 0.0,
                duration: 0.05,
            },
            default_reference_array(2),
        );
        spec.off_axis = Some((
            TorqueProfile::Constant {
                value: 25.0,
                duration: 0.05,
            },
            TorqueProfile::Constant {
                value: 0.0,
                duration: 0.05,
            },
        ));
        let base: Vec<_> = simulate_analog(&spec, 5).unwrap().collect();
        let same: Vec<_> = crosstalk_inject(simulate_analog(&spec, 5).unwrap(), Crosstalk::default()).collect();
        assert_eq!(base, same);

        // 0.06 V at 25 N·m ↔ 0.0024 V/(N·m)
        let coupling = Crosstalk {
            x: [0.0024; N_CHANNELS],
            y: [0.0; N_CHANNELS],
        };
        let shifted: Vec<_> = crosstalk_inject(simulate_analog(&spec, 5).unwrap(), coupling).collect();
        for (a, b) in base.iter().zip(&shifted) {
            for i in 0..N_CHANNELS {
                assert!((b.0.v[i] - a.0.v[i] - 0.06).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cycle_segments_are_monotone_legs() {
        let p = TorqueProfile::Cycles {
            peak: 25.0,
            cycles: 5,
            ramp_s: 2.0,
            hold_s: 0.5,
            dwell_s: 1.0,
            both_directions: true,
        };
        let segs = p.cycle_segments(1000.0);
        assert_eq!(segs.len(), 20);
        assert!((p.duration() - (10.0 * 5.5 + 1.0)).abs() < 1e-12);
        for s in &segs {
            let taus: Vec<f64> = (s.start..s.end).map(|k| p.torque(k as f64 / 1000.0).abs()).collect();
            for w in taus.windows(2) {
                match s.branch {
                    Branch::Loading => assert!(w[1] >= w[0] - 1e-9),
                    Branch::Unloading => assert!(w[1] <= w[0] + 1e-9),
                }
            }
            assert!(taus[0].min(*taus.last().unwrap()) < 0.02);
            assert!(taus[0].max(*taus.last().unwrap()) > 24.98);
        }
    }

    #[test]
    fn setpoint_temperature_follows_lag() {
        let p = TemperatureProfile::Setpoints {
            setpoints: vec![-10.0, 50.0],
            hold_s: 1200.0,
            lag_s: 180.0,
            initial: 25.0,
        };
        assert_eq!(p.temperature(0.0), 25.0);
        assert!((p.temperature(1200.0) + 10.0).abs() < 0.05);
        assert!((p.temperature(2400.0) - 50.0).abs() < 0.1);
        let expected = -10.0 + 35.0 * (-1.0f64).exp();
        assert!((p.temperature(180.0) - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn quantization_error_within_half_lsb(v in -1.0f64..4.0) {
            let adc = AdcModel::default();
            let clamped = v.clamp(0.0, f64::from(adc.max_count()) * adc.lsb());
            prop_assert!((adc.reconstruct(v) - clamped).abs() <= 0.5 * adc.lsb() + 1e-15);
        }

        #[test]
        fn crosstalk_delta_is_linear(c in -0.01f64..0.01, tx in -30.0f64..30.0, ty in -30.0f64..30.0) {
            let mut spec = StreamSpec::new(
                TorqueProfile::Constant { value: 1.0, duration: 0.003 },
                default_reference_array(0),
            );
            spec.off_axis = Some((
                TorqueProfile::Constant { value: tx, duration: 0.003 },
                TorqueProfile::Constant { value: ty, duration: 0.003 },
            ));
            let coupling = Crosstalk { x: [c; N_CHANNELS], y: [-c; N_CHANNELS] };
            let a: Vec<_> = simulate_analog(&spec, 1).unwrap().collect();
            let b: Vec<_> = crosstalk_inject(simulate_analog(&spec, 1).unwrap(), coupling).collect();
            for (x, y) in a.iter().zip(&b) {
                for i in 0..N_CHANNELS {
                    prop_assert!((y.0.v[i] - x.0.v[i] - (c * tx - c * ty)).abs() < 1e-12);
                }
            }
        }
    }
}
