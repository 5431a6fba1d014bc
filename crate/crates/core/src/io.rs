//! File formats and the pipeline commands behind the CLI.
//!
//! Every command writes its outputs into one run directory together with a
//! `<stage>.manifest.toml` listing the config hash, the seed and the SHA-256
//! of each input and output file. Floats are written in shortest
//! round-trip form so files are bit-reproducible.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::beam::{torsional_stiffness, BeamParams};
use crate::calibration::{calibrate, predict, CalibrationDataset, CalibrationModel, CalibrationSettings, Method};
use crate::control::{run_scenario, ControlConfig, FeedbackSource, Scenario, SensorChain};
use crate::metrics::{self, format_tables, MetricsReport};
use crate::qp::{solve_qp, QpOptions, QpProblem, QpStatus};
use crate::sensor_sim::{
    crosstalk_inject, quantize, simulate_analog, simulate_stream, AdcModel, ArrayFixture, Crosstalk, CycleSegment,
    SensorFrame, StreamSpec, TemperatureProfile, TorqueProfile, N_CHANNELS,
};
use crate::thermal::{
    compensate, drift_rms, fit_quadratic, fit_rational_traced, rational_sse, DriftModel, DriftRecord, DriftScenario,
    ThermalRecord,
};
use crate::{Error, Result};

pub const MODEL_FORMAT: &str = "torquesense-model/1";
pub const DRIFT_FORMAT: &str = "torquesense-drift/1";
pub const MANIFEST_FORMAT: &str = "torquesense-manifest/1";

pub const EXIT_OK: i32 = 0;

// ---------------------------------------------------------------- config

/// Torque records produced by `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub calibration: TorqueProfile,
    pub evaluation: TorqueProfile,
    /// Length of the zero-torque record, s.
    pub quiet_s: f64,
    /// Peak off-axis torque of the crosstalk records, N·m.
    pub crosstalk_peak: f64,
    /// Largest per-channel off-axis sensitivity, V/(N·m).
    pub crosstalk_coupling: f64,
    pub temperature_c: f64,
    pub rate: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            calibration: TorqueProfile::calibration_cycles(),
            evaluation: TorqueProfile::calibration_cycles(),
            quiet_s: 10.0,
            crosstalk_peak: 25.0,
            crosstalk_coupling: 0.0024,
            temperature_c: 25.0,
            rate: crate::SAMPLE_RATE_HZ,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub beam: BeamParams,
    pub array: ArrayFixture,
    pub adc: AdcModel,
    pub datasets: DatasetConfig,
    pub calibration: CalibrationSettings,
    pub thermal: DriftScenario,
    pub control: ControlConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            beam: BeamParams::default(),
            array: ArrayFixture::reference(),
            adc: AdcModel::default(),
            datasets: DatasetConfig::default(),
            calibration: CalibrationSettings::default(),
            thermal: DriftScenario::default(),
            control: ControlConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.beam.validate()?;
        self.array.validate()?;
        self.calibration.features.validate()?;
        if !(self.calibration.e_max() > 0.0) {
            return Err(Error::Config("calibration e_max_fraction and full_scale must be > 0".into()));
        }
        if self.calibration.gamma_grid.is_empty() || self.calibration.gamma_grid.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::Config("calibration gamma_grid must be non-empty and non-negative".into()));
        }
        if !(self.adc.v_ref > 0.0 && (1..=32).contains(&self.adc.bits)) {
            return Err(Error::Config("adc needs v_ref > 0 and 1..=32 bits".into()));
        }
        let d = &self.datasets;
        if !(d.rate > 0.0 && d.quiet_s > 0.0 && d.crosstalk_peak > 0.0 && d.crosstalk_coupling >= 0.0) {
            return Err(Error::Config("datasets need rate, quiet_s and crosstalk_peak > 0".into()));
        }
        let t = &self.thermal;
        if t.setpoints.len() < 5 || !(t.hold_s > 0.0 && t.window_s > 0.0 && t.window_s <= t.hold_s && t.rate > 0.0) {
            return Err(Error::Config(
                "thermal scenario needs >= 5 setpoints and 0 < window_s <= hold_s, rate > 0".into(),
            ));
        }
        self.control.validate()
    }

    /// Seed of the `k`-th independent random stream of a run.
    pub fn stream_seed(&self, k: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
    }
}

/// Parses a TOML run configuration. Errors carry `origin:line:column`.
pub fn parse_config(text: &str, origin: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let (line, col) = e
            .span()
            .map(|s| {
                let before = &text[..s.start.min(text.len())];
                let line = before.matches('\n').count() + 1;
                let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                (line, col)
            })
            .unwrap_or((1, 1));
        Error::Config(format!("{origin}:{line}:{col}: {}", e.message()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Defaults when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config(&text, &p.display().to_string())
        }
    }
}

pub fn config_to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
}

/// SHA-256 of the resolved config in canonical TOML form.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    Ok(sha256_hex(config_to_toml(cfg)?.as_bytes()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Data(format!("cannot serialize: {e}")))
}

fn from_toml<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Data(format!("{}: {}", path.display(), e.message())))
}

// ---------------------------------------------------------------- datasets

const BASE_COLUMNS: usize = 1 + N_CHANNELS + 2;

pub fn dataset_header(with_xy: bool) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=N_CHANNELS).map(|i| format!("v{i}")));
    h.push("temp_c".into());
    h.push("tau_ref".into());
    if with_xy {
        h.push("tau_x".into());
        h.push("tau_y".into());
    }
    h
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Data(format!("csv buffer: {e}")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Serializes frames with the dataset header. Off-axis columns are present
/// when any frame carries them.
pub fn dataset_to_bytes(frames: &[SensorFrame]) -> Result<Vec<u8>> {
    let with_xy = frames.iter().any(|f| f.tau_xy.is_some());
    let mut w = csv_writer();
    w.write_record(dataset_header(with_xy)).map_err(csv_err)?;
    let mut row = Vec::with_capacity(BASE_COLUMNS + 2);
    for f in frames {
        row.clear();
        row.push(num(f.t));
        row.extend(f.v.iter().map(|&v| num(v)));
        row.push(num(f.temp_c));
        row.push(f.tau_ref.map(num).unwrap_or_default());
        if with_xy {
            let (x, y) = f.tau_xy.unwrap_or((0.0, 0.0));
            row.push(num(x));
            row.push(num(y));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    finish_csv(w)
}

pub fn write_dataset(path: &Path, frames: &[SensorFrame]) -> Result<()> {
    write_file(path, &dataset_to_bytes(frames)?)
}

pub fn parse_dataset(bytes: &[u8], origin: &str) -> Result<Vec<SensorFrame>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Data(format!("{origin}: unreadable header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let with_xy = if header == dataset_header(false) {
        false
    } else if header == dataset_header(true) {
        true
    } else {
        return Err(Error::Data(format!(
            "{origin}: header must be `{}` optionally followed by `,tau_x,tau_y`",
            dataset_header(false).join(",")
        )));
    };
    let mut frames: Vec<SensorFrame> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Data(format!("{origin}: row {row}: {e}")))?;
        let field = |j: usize| -> Result<f64> {
            let s = rec.get(j).unwrap_or("");
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("{origin}: row {row}: column {} is not a number: {s:?}", header[j])))
        };
        let t = field(0)?;
        let mut v = [0.0; N_CHANNELS];
        for (c, slot) in v.iter_mut().enumerate() {
            *slot = field(1 + c)?;
        }
        let temp_c = field(1 + N_CHANNELS)?;
        let tau_ref = match rec.get(2 + N_CHANNELS).unwrap_or("").trim() {
            "" => None,
            _ => Some(field(2 + N_CHANNELS)?),
        };
        let tau_xy = if with_xy {
            Some((field(BASE_COLUMNS)?, field(BASE_COLUMNS + 1)?))
        } else {
            None
        };
        if let Some(prev) = frames.last() {
            if !(t > prev.t) {
                return Err(Error::Data(format!("{origin}: row {row}: time {t} does not increase")));
            }
        }
        frames.push(SensorFrame {
            t,
            v,
            temp_c,
            tau_ref,
            tau_xy,
        });
    }
    Ok(frames)
}

pub fn read_dataset(path: &Path) -> Result<Vec<SensorFrame>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&bytes, &path.display().to_string())
}

/// `<stem>.cycles.csv` next to a dataset.
pub fn cycles_sidecar(dataset: &Path) -> PathBuf {
    let stem = dataset.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    dataset.with_file_name(format!("{stem}.cycles.csv"))
}

pub fn write_cycles(path: &Path, segments: &[CycleSegment]) -> Result<()> {
    let mut w = csv_writer();
    for s in segments {
        w.serialize(s).map_err(csv_err)?;
    }
    if segments.is_empty() {
        w.write_record(["cycle_id", "branch", "polarity", "start", "end"]).map_err(csv_err)?;
    }
    write_file(path, &finish_csv(w)?)
}

pub fn read_cycles(path: &Path) -> Result<Vec<CycleSegment>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| Error::Data(format!("{}: row {}: {e}", path.display(), i + 1))))
        .collect()
}

fn write_columns(path: &Path, header: &[&str], columns: &[&[f64]]) -> Result<()> {
    let n = columns.first().map_or(0, |c| c.len());
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::Data(format!("{}: columns of unequal length", path.display())));
    }
    let mut w = csv_writer();
    w.write_record(header).map_err(csv_err)?;
    for k in 0..n {
        w.write_record(columns.iter().map(|c| num(c[k]))).map_err(csv_err)?;
    }
    write_file(path, &finish_csv(w)?)
}

fn read_columns(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let got: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if got != header {
        return Err(Error::Data(format!("{}: header must be `{}`", path.display(), header.join(","))));
    }
    let mut cols = vec![Vec::new(); header.len()];
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        for (j, col) in cols.iter_mut().enumerate() {
            let s = rec.get(j).unwrap_or("");
            col.push(s.trim().parse().map_err(|_| {
                Error::Data(format!("{}: row {}: column {} is not a number: {s:?}", path.display(), i + 1, header[j]))
            })?);
        }
    }
    Ok(cols)
}

const THERMAL_HEADER: [&str; 2] = ["temp_c", "output"];
const DRIFT_HEADER: [&str; 4] = ["t", "temp_c", "output", "reference"];

pub fn write_thermal_record(path: &Path, rec: &ThermalRecord) -> Result<()> {
    let t: Vec<f64> = rec.samples.iter().map(|s| s.0).collect();
    let y: Vec<f64> = rec.samples.iter().map(|s| s.1).collect();
    write_columns(path, &THERMAL_HEADER, &[&t, &y])
}

pub fn read_thermal_record(path: &Path) -> Result<ThermalRecord> {
    let c = read_columns(path, &THERMAL_HEADER)?;
    Ok(ThermalRecord {
        samples: c[0].iter().copied().zip(c[1].iter().copied()).collect(),
    })
}

pub fn write_drift_record(path: &Path, r: &DriftRecord) -> Result<()> {
    write_columns(path, &DRIFT_HEADER, &[&r.t, &r.temperature, &r.output, &r.reference])
}

pub fn read_drift_record(path: &Path) -> Result<DriftRecord> {
    let mut c = read_columns(path, &DRIFT_HEADER)?.into_iter();
    let mut next = || c.next().unwrap_or_default();
    Ok(DriftRecord {
        t: next(),
        temperature: next(),
        output: next(),
        reference: next(),
    })
}

// ---------------------------------------------------------------- models

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub model: CalibrationModel,
}

pub fn write_model(path: &Path, model: &CalibrationModel, config_hash: &str, seed: u64) -> Result<()> {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        config_hash: config_hash.into(),
        seed,
        model: model.clone(),
    };
    write_file(path, to_toml(&file)?.as_bytes())
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let file: ModelFile = from_toml(&read_text(path)?, path)?;
    if file.format != MODEL_FORMAT {
        return Err(Error::Data(format!(
            "{}: format {:?} is not {MODEL_FORMAT:?}",
            path.display(),
            file.format
        )));
    }
    file.model.spec.validate()?;
    if file.model.theta.len() != file.model.spec.dim() {
        return Err(Error::Data(format!(
            "{}: {} coefficients for a {}-column feature spec",
            path.display(),
            file.model.theta.len(),
            file.model.spec.dim()
        )));
    }
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftFile {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub model: DriftModel,
}

pub fn write_drift_model(path: &Path, model: &DriftModel, config_hash: &str, seed: u64) -> Result<()> {
    let file = DriftFile {
        format: DRIFT_FORMAT.into(),
        config_hash: config_hash.into(),
        seed,
        model: *model,
    };
    write_file(path, to_toml(&file)?.as_bytes())
}

pub fn read_drift_model(path: &Path) -> Result<DriftFile> {
    let file: DriftFile = from_toml(&read_text(path)?, path)?;
    if file.format != DRIFT_FORMAT {
        return Err(Error::Data(format!("{}: format {:?} is not {DRIFT_FORMAT:?}", path.display(), file.format)));
    }
    file.model.check_denominator()?;
    Ok(file)
}

// ---------------------------------------------------------------- manifests

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub inputs: Vec<FileEntry>,
    #[serde(default)]
    pub outputs: Vec<FileEntry>,
    /// Human-readable one-line results.
    #[serde(default)]
    pub notes: Vec<String>,
}

impl Manifest {
    fn new(stage: &str, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            format: MANIFEST_FORMAT.into(),
            stage: stage.into(),
            config_hash: config_hash(cfg)?,
            seed: cfg.seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
        })
    }

    fn entry(path: &Path) -> Result<FileEntry> {
        Ok(FileEntry {
            name: path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            sha256: sha256_file(path)?,
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Self::entry(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(Self::entry(path)?);
        Ok(())
    }

    fn note(&mut self, line: String) {
        self.notes.push(line);
    }

    fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = out.join(format!("{}.manifest.toml", self.stage));
        write_file(&path, to_toml(self)?.as_bytes())?;
        Ok(path)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let m: Manifest = from_toml(&read_text(path)?, path)?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::Data(format!("{}: format {:?} is not {MANIFEST_FORMAT:?}", path.display(), m.format)));
    }
    Ok(m)
}

// ---------------------------------------------------------------- simulate

pub const CONFIG_FILE: &str = "config.resolved.toml";

fn stream_spec(cfg: &RunConfig, profile: TorqueProfile) -> StreamSpec {
    let mut spec = StreamSpec::new(profile, cfg.array.build(cfg.stream_seed(0)));
    spec.hysteresis = cfg.array.hysteresis_shape();
    spec.temperature = TemperatureProfile::Constant {
        value: cfg.datasets.temperature_c,
    };
    spec.rate = cfg.datasets.rate;
    spec
}

/// Frames of one simulated record; `k` selects the random stream.
pub fn simulate_frames(cfg: &RunConfig, profile: TorqueProfile, k: u64) -> Result<Vec<SensorFrame>> {
    Ok(simulate_stream(&stream_spec(cfg, profile), cfg.adc, cfg.stream_seed(k))?.collect())
}

/// Off-axis record: zero z torque while one transverse axis cycles.
fn simulate_crosstalk(cfg: &RunConfig, axis_x: bool, k: u64) -> Result<Vec<SensorFrame>> {
    use rand::{Rng, SeedableRng};
    let off = TorqueProfile::Cycles {
        peak: cfg.datasets.crosstalk_peak,
        cycles: 1,
        ramp_s: 2.0,
        hold_s: 1.0,
        dwell_s: 1.0,
        both_directions: true,
    };
    let zero = TorqueProfile::Constant {
        value: 0.0,
        duration: off.duration(),
    };
    let mut spec = stream_spec(cfg, zero.clone());
    spec.off_axis = Some(if axis_x { (off, zero) } else { (zero, off) });
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.stream_seed(k));
    let c = cfg.datasets.crosstalk_coupling;
    let mut coupling = Crosstalk::default();
    for i in 0..N_CHANNELS {
        coupling.x[i] = c * rng.random_range(-1.0..=1.0);
        coupling.y[i] = c * rng.random_range(-1.0..=1.0);
    }
    let analog = simulate_analog(&spec, cfg.stream_seed(k + 1))?;
    Ok(quantize(crosstalk_inject(analog, coupling), cfg.adc).collect())
}

/// Writes every synthetic record of a run into `out`.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut m = Manifest::new("simulate", cfg)?;
    let cfg_path = out.join(CONFIG_FILE);
    write_file(&cfg_path, config_to_toml(cfg)?.as_bytes())?;
    m.output(&cfg_path)?;

    let d = &cfg.datasets;
    let records: [(&str, TorqueProfile, u64); 3] = [
        ("calibration", d.calibration.clone(), 1),
        ("evaluation", d.evaluation.clone(), 2),
        (
            "quiet",
            TorqueProfile::Constant {
                value: 0.0,
                duration: d.quiet_s,
            },
            3,
        ),
    ];
    for (name, profile, k) in records {
        let frames = simulate_frames(cfg, profile.clone(), k)?;
        let path = out.join(format!("{name}.csv"));
        write_dataset(&path, &frames)?;
        m.output(&path)?;
        m.note(format!("{name}.csv: {} frames", frames.len()));
        let segments = profile.cycle_segments(d.rate);
        if !segments.is_empty() {
            let side = cycles_sidecar(&path);
            write_cycles(&side, &segments)?;
            m.output(&side)?;
            m.note(format!("{name}.cycles.csv: {} legs", segments.len()));
        }
    }
    for (name, axis_x, k) in [("crosstalk_x", true, 4), ("crosstalk_y", false, 6)] {
        let frames = simulate_crosstalk(cfg, axis_x, k)?;
        let path = out.join(format!("{name}.csv"));
        write_dataset(&path, &frames)?;
        m.output(&path)?;
        m.note(format!("{name}.csv: {} frames", frames.len()));
    }

    let th = &cfg.thermal;
    let chamber = th.chamber_record(cfg.stream_seed(8));
    let setpoints = th.thermal_record(&chamber)?;
    let path = out.join("thermal_setpoints.csv");
    write_thermal_record(&path, &setpoints)?;
    m.output(&path)?;
    m.note(format!("thermal_setpoints.csv: {} setpoints", setpoints.samples.len()));
    for (name, torque, k) in [("drift_zero", 0.0, 9), ("drift_loaded", th.loaded_torque, 10)] {
        let rec = th.warmup_record(torque, cfg.stream_seed(k));
        let path = out.join(format!("{name}.csv"));
        write_drift_record(&path, &rec)?;
        m.output(&path)?;
        m.note(format!("{name}.csv: {} samples", rec.t.len()));
    }
    m.write(out)?;
    Ok(m)
}

// ---------------------------------------------------------------- calibrate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub training_rows: usize,
    pub quiet_rows: usize,
    /// Where the resolution figures come from.
    pub resolution_source: String,
    pub e_max: f64,
    pub gamma: f64,
    pub gamma_forced: bool,
    pub ls_quiet_std: f64,
    pub qp_quiet_std: f64,
    pub ls_resolution_3sigma: f64,
    pub qp_resolution_3sigma: f64,
    /// LS resolution over QP resolution.
    pub improvement_ratio: f64,
    pub ls_max_train_residual: f64,
    pub qp_max_train_residual: f64,
}

fn estimates(model: &CalibrationModel, frames: &[SensorFrame]) -> Vec<f64> {
    frames.iter().map(|f| predict(model, f)).collect()
}

/// Fits LS and QP models on `data`; `quiet` (if given) supplies the
/// resolution record.
pub fn cmd_calibrate(cfg: &RunConfig, data: &Path, quiet: Option<&Path>, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut m = Manifest::new("calibrate", cfg)?;
    let frames = read_dataset(data)?;
    m.input(data)?;
    let dim = cfg.calibration.features.dim();
    if frames.len() < dim {
        return Err(Error::Data(format!(
            "{}: {} rows cannot determine {dim} coefficients",
            data.display(),
            frames.len()
        )));
    }
    let dataset = CalibrationDataset::from_frames(frames)?;
    let outcome = calibrate(&dataset, &cfg.calibration)?;
    let hash = config_hash(cfg)?;

    let (source, ls_q, qp_q) = match quiet {
        Some(p) => {
            let q = read_dataset(p)?;
            m.input(p)?;
            (
                p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                estimates(&outcome.least_squares, &q),
                estimates(&outcome.qp, &q),
            )
        }
        None => {
            let pick = |model: &CalibrationModel| -> Vec<f64> {
                outcome.quiet.iter().map(|&k| predict(model, &dataset.frames[k])).collect()
            };
            ("training quiet rows".to_string(), pick(&outcome.least_squares), pick(&outcome.qp))
        }
    };
    let ls_res = metrics::resolution_3sigma(&ls_q)?;
    let qp_res = metrics::resolution_3sigma(&qp_q)?;
    let summary = CalibrationSummary {
        training_rows: dataset.len(),
        quiet_rows: outcome.quiet.len(),
        resolution_source: source,
        e_max: cfg.calibration.e_max(),
        gamma: outcome.selection.gamma,
        gamma_forced: outcome.selection.forced,
        ls_quiet_std: ls_res / 3.0,
        qp_quiet_std: qp_res / 3.0,
        ls_resolution_3sigma: ls_res,
        qp_resolution_3sigma: qp_res,
        improvement_ratio: ls_res / qp_res,
        ls_max_train_residual: outcome.least_squares.fit_report.max_abs_error,
        qp_max_train_residual: outcome.qp.fit_report.max_abs_error,
    };

    for (name, model) in [("model_ls.toml", &outcome.least_squares), ("model_qp.toml", &outcome.qp)] {
        let p = out.join(name);
        write_model(&p, model, &hash, cfg.seed)?;
        m.output(&p)?;
    }
    let sweep = out.join("gamma_sweep.csv");
    let mut w = csv_writer();
    w.write_record(["gamma", "score", "rmse", "quiet_var", "status"]).map_err(csv_err)?;
    for e in &outcome.selection.table {
        let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
        w.write_record([num(e.gamma), opt(e.score), opt(e.rmse), opt(e.quiet_var), e.status.clone()])
            .map_err(csv_err)?;
    }
    write_file(&sweep, &finish_csv(w)?)?;
    m.output(&sweep)?;
    let sp = out.join("calibration_summary.toml");
    write_file(&sp, to_toml(&summary)?.as_bytes())?;
    m.output(&sp)?;

    m.note(format!(
        "gamma {}{}",
        summary.gamma,
        if summary.gamma_forced { " (forced: single-point grid)" } else { "" }
    ));
    m.note(format!(
        "quiet sigma LS {:.5} N·m, QP {:.5} N·m; 3-sigma resolution LS {:.4} N·m, QP {:.4} N·m; improvement {:.2}x",
        summary.ls_quiet_std, summary.qp_quiet_std, ls_res, qp_res, summary.improvement_ratio
    ));
    m.write(out)?;
    Ok(m)
}

// ---------------------------------------------------------------- evaluate

fn method_label(method: Method) -> &'static str {
    match method {
        Method::LeastSquares => "LS",
        Method::Qp => "QP",
    }
}

#[derive(Debug, Clone)]
pub struct EvaluateInputs<'a> {
    pub data: &'a Path,
    /// Defaults to the dataset's cycle sidecar.
    pub cycles: Option<&'a Path>,
    pub models: Vec<&'a Path>,
    pub quiet: Option<&'a Path>,
    pub crosstalk_x: Option<&'a Path>,
    pub crosstalk_y: Option<&'a Path>,
}

/// Metrics of one model against the supplied records.
pub fn evaluate_model(
    model: &CalibrationModel,
    label: &str,
    cycles_data: &[SensorFrame],
    segments: &[CycleSegment],
    quiet: Option<&[SensorFrame]>,
    crosstalk: [Option<&[SensorFrame]>; 2],
    fs: f64,
) -> Result<MetricsReport> {
    if model.spec.n_channels != N_CHANNELS {
        return Err(Error::Data(format!(
            "model {label} expects {} channels, datasets carry {N_CHANNELS}",
            model.spec.n_channels
        )));
    }
    let reference: Vec<f64> = cycles_data
        .iter()
        .enumerate()
        .map(|(k, f)| f.tau_ref.ok_or_else(|| Error::Data(format!("row {}: missing tau_ref", k + 1))))
        .collect::<Result<_>>()?;
    let est = estimates(model, cycles_data);
    let err = metrics::rms_and_max_error(&est, &reference, fs)?;
    let mut report = MetricsReport {
        label: label.into(),
        max_pct_fs: Some(err.max_pct_fs),
        rms: Some(err.rms),
        ..MetricsReport::default()
    };
    if !segments.is_empty() {
        let cm = metrics::cycle_metrics(&reference, &est, segments, fs)?;
        report.nonlinearity_pct_fs = Some(cm.nonlinearity_pct_fs);
        report.hysteresis_pct_fs = Some(cm.hysteresis_pct_fs);
        report.repeatability = Some(cm.repeatability);
    }
    if let Some(q) = quiet {
        report.resolution_3sigma = Some(metrics::resolution_3sigma(&estimates(model, q))?);
    }
    if let Some(x) = crosstalk[0] {
        report.crosstalk_x_pct_fs = Some(metrics::crosstalk(&estimates(model, x), fs)?);
    }
    if let Some(y) = crosstalk[1] {
        report.crosstalk_y_pct_fs = Some(metrics::crosstalk(&estimates(model, y), fs)?);
    }
    Ok(report)
}

pub fn cmd_evaluate(cfg: &RunConfig, inputs: &EvaluateInputs<'_>, out: &Path) -> Result<Manifest> {
    if inputs.models.is_empty() {
        return Err(Error::Config("evaluate needs at least one model".into()));
    }
    let mut m = Manifest::new("evaluate", cfg)?;
    let frames = read_dataset(inputs.data)?;
    m.input(inputs.data)?;
    let side = inputs.cycles.map(Path::to_path_buf).unwrap_or_else(|| cycles_sidecar(inputs.data));
    let segments = if side.exists() {
        m.input(&side)?;
        read_cycles(&side)?
    } else if inputs.cycles.is_some() {
        return Err(Error::Data(format!("cycle file {} not found", side.display())));
    } else {
        Vec::new()
    };
    let mut load = |p: Option<&Path>| -> Result<Option<Vec<SensorFrame>>> {
        match p {
            Some(p) => {
                m.input(p)?;
                Ok(Some(read_dataset(p)?))
            }
            None => Ok(None),
        }
    };
    let quiet = load(inputs.quiet)?;
    let cx = load(inputs.crosstalk_x)?;
    let cy = load(inputs.crosstalk_y)?;

    let fs = cfg.calibration.full_scale;
    let mut reports = Vec::new();
    let mut models = Vec::new();
    for p in &inputs.models {
        let file = read_model(p)?;
        m.input(p)?;
        let label = method_label(file.model.method).to_string();
        reports.push(evaluate_model(
            &file.model,
            &label,
            &frames,
            &segments,
            quiet.as_deref(),
            [cx.as_deref(), cy.as_deref()],
            fs,
        )?);
        models.push((label, file.model));
    }

    let md = out.join("metrics.md");
    write_file(&md, format_tables(&reports).as_bytes())?;
    m.output(&md)?;
    #[derive(Serialize)]
    struct MetricsFile<'a> {
        report: &'a [MetricsReport],
    }
    let mt = out.join("metrics.toml");
    write_file(&mt, to_toml(&MetricsFile { report: &reports })?.as_bytes())?;
    m.output(&mt)?;

    // Plot-ready extracts: cycles, quiet trace, crosstalk.
    let figure = |name: &str, data: &[SensorFrame], first: &str, first_col: Vec<f64>| -> Result<PathBuf> {
        let t: Vec<f64> = data.iter().map(|f| f.t).collect();
        let est: Vec<Vec<f64>> = models.iter().map(|(_, md)| estimates(md, data)).collect();
        let labels: Vec<String> = models.iter().map(|(l, _)| format!("est_{}", l.to_lowercase())).collect();
        let mut header = vec!["t", first];
        header.extend(labels.iter().map(String::as_str));
        let mut cols: Vec<&[f64]> = vec![&t, &first_col];
        cols.extend(est.iter().map(Vec::as_slice));
        let p = out.join(name);
        write_columns(&p, &header, &cols)?;
        Ok(p)
    };
    let reference: Vec<f64> = frames.iter().map(|f| f.tau_ref.unwrap_or(f64::NAN)).collect();
    let p = figure("fig_cycles.csv", &frames, "tau_ref", reference)?;
    m.output(&p)?;
    if let Some(q) = &quiet {
        let p = figure("fig_quiet.csv", q, "tau_ref", q.iter().map(|f| f.tau_ref.unwrap_or(0.0)).collect())?;
        m.output(&p)?;
    }
    for (name, data, pick) in [("fig_crosstalk_x.csv", &cx, 0usize), ("fig_crosstalk_y.csv", &cy, 1)] {
        if let Some(d) = data {
            let off = d
                .iter()
                .map(|f| f.tau_xy.map_or(0.0, |xy| if pick == 0 { xy.0 } else { xy.1 }))
                .collect();
            let p = figure(name, d, "tau_off_axis", off)?;
            m.output(&p)?;
        }
    }
    for r in &reports {
        m.note(format!(
            "{}: max {:.4} %FS, rms {:.4} N·m, nonlinearity {}, hysteresis {}, repeatability {}, resolution {}",
            r.label,
            r.max_pct_fs.unwrap_or(f64::NAN),
            r.rms.unwrap_or(f64::NAN),
            opt_fmt(r.nonlinearity_pct_fs),
            opt_fmt(r.hysteresis_pct_fs),
            opt_fmt(r.repeatability.map(|x| x.spread_pct_fs)),
            opt_fmt(r.resolution_3sigma),
        ));
    }
    m.write(out)?;
    Ok(m)
}

fn opt_fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

// ---------------------------------------------------------------- temp-fit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRecordSummary {
    pub name: String,
    pub raw_rms: f64,
    pub compensated_rms: f64,
    pub reduction_pct: f64,
    pub clamped_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftFitSummary {
    pub setpoints: usize,
    pub iterations: usize,
    pub rational_sse: f64,
    pub quadratic_sse: f64,
    pub records: Vec<DriftRecordSummary>,
}

pub fn cmd_temp_fit(cfg: &RunConfig, thermal: &Path, drift_records: &[&Path], out: &Path) -> Result<Manifest> {
    let mut m = Manifest::new("temp-fit", cfg)?;
    let rec = read_thermal_record(thermal)?;
    m.input(thermal)?;
    let fit = fit_rational_traced(&rec)?;
    let (_, quad_sse) = fit_quadratic(&rec)?;
    let model = fit.model;
    let hash = config_hash(cfg)?;
    let mp = out.join("drift_model.toml");
    write_drift_model(&mp, &model, &hash, cfg.seed)?;
    m.output(&mp)?;

    let (lo, hi) = model.valid_range;
    let grid: Vec<f64> = (0..=120).map(|i| lo + (hi - lo) * i as f64 / 120.0).collect();
    let fitted: Vec<f64> = grid.iter().map(|&t| model.eval(t)).collect();
    let fp = out.join("fig_thermal_fit.csv");
    write_columns(&fp, &["temp_c", "fitted_drift"], &[&grid, &fitted])?;
    m.output(&fp)?;

    let mut summary = DriftFitSummary {
        setpoints: rec.samples.len(),
        iterations: fit.iterations,
        rational_sse: rational_sse(&model, &rec),
        quadratic_sse: quad_sse,
        records: Vec::new(),
    };
    for p in drift_records {
        let r = read_drift_record(p)?;
        m.input(p)?;
        let raw = drift_rms(&r.output, &r.reference, &r.temperature, None)?;
        let comp = drift_rms(&r.output, &r.reference, &r.temperature, Some(&model))?;
        let compensated: Vec<f64> = r
            .output
            .iter()
            .zip(&r.temperature)
            .map(|(&o, &t)| compensate(o, t, &model).torque)
            .collect();
        let clamped = r.temperature.iter().filter(|&&t| compensate(0.0, t, &model).clamped).count();
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let fig = out.join(format!("fig_{name}.csv"));
        write_columns(
            &fig,
            &["t", "temp_c", "raw", "compensated", "reference"],
            &[&r.t, &r.temperature, &r.output, &compensated, &r.reference],
        )?;
        m.output(&fig)?;
        m.note(format!(
            "{name}: drift RMS {raw:.4} -> {comp:.4} N·m ({:.1}% lower)",
            100.0 * (1.0 - comp / raw)
        ));
        summary.records.push(DriftRecordSummary {
            name,
            raw_rms: raw,
            compensated_rms: comp,
            reduction_pct: 100.0 * (1.0 - comp / raw),
            clamped_samples: clamped,
        });
    }
    let sp = out.join("drift_summary.toml");
    write_file(&sp, to_toml(&summary)?.as_bytes())?;
    m.output(&sp)?;
    m.note(format!(
        "rational SSE {:.3e}, quadratic SSE {:.3e} over {} setpoints",
        summary.rational_sse, summary.quadratic_sse, summary.setpoints
    ));
    m.write(out)?;
    Ok(m)
}

// ---------------------------------------------------------------- control-sim

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub scenario: String,
    pub source: FeedbackSource,
    pub rms_error: f64,
    pub rms_error_with_transient: f64,
    pub peak_error: f64,
    pub delivered_ratio: Option<f64>,
    pub regulated_up_to: Option<f64>,
    pub first_failure: Option<f64>,
    pub rms_outside_pulses: Option<f64>,
}

pub fn cmd_control_sim(cfg: &RunConfig, model: &Path, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut m = Manifest::new("control-sim", cfg)?;
    let file = read_model(model)?;
    m.input(model)?;
    let channels = cfg.array.build(cfg.stream_seed(0));
    let mut rows = Vec::new();
    for (i, name) in cfg.control.scenarios.iter().enumerate() {
        let admittance = matches!(Scenario::from_name(name)?, Scenario::Admittance { .. });
        let sources: &[FeedbackSource] = if admittance {
            &[FeedbackSource::TorqueSensor]
        } else {
            &[FeedbackSource::CurrentEstimate, FeedbackSource::TorqueSensor]
        };
        for &source in sources {
            let mut sensor = SensorChain::new(
                channels,
                cfg.array.hysteresis_shape(),
                cfg.adc,
                file.model.clone(),
                cfg.stream_seed(100 + i as u64),
            )?;
            let rec = run_scenario(name, source, &cfg.control, Some(&mut sensor))?;
            let path = out.join(format!("control_{name}_{}.csv", source.name()));
            write_columns(
                &path,
                &["t", "reference", "command", "delivered", "measured", "omega", "theta"],
                &[
                    &rec.t,
                    &rec.reference,
                    &rec.command,
                    &rec.delivered,
                    &rec.measured,
                    &rec.omega,
                    &rec.theta,
                ],
            )?;
            m.output(&path)?;
            let s = &rec.summary;
            rows.push(ControlRow {
                scenario: name.clone(),
                source,
                rms_error: s.rms_error,
                rms_error_with_transient: s.rms_error_with_transient,
                peak_error: s.peak_error,
                delivered_ratio: s.delivered_ratio,
                regulated_up_to: s.disturbance.as_ref().and_then(|d| d.regulated_up_to),
                first_failure: s.disturbance.as_ref().and_then(|d| d.first_failure),
                rms_outside_pulses: s.disturbance.as_ref().map(|d| d.rms_outside_pulses),
            });
        }
    }
    let md = out.join("control_summary.md");
    write_file(&md, format_control_table(&rows).as_bytes())?;
    m.output(&md)?;
    #[derive(Serialize)]
    struct ControlFile<'a> {
        run: &'a [ControlRow],
    }
    let tp = out.join("control_summary.toml");
    write_file(&tp, to_toml(&ControlFile { run: &rows })?.as_bytes())?;
    m.output(&tp)?;
    for r in &rows {
        m.note(format!("{} [{}]: rms {:.4}, peak {:.4}", r.scenario, r.source.name(), r.rms_error, r.peak_error));
    }
    m.write(out)?;
    Ok(m)
}

pub fn format_control_table(rows: &[ControlRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "| Scenario | Feedback | RMS Error | RMS incl. transient | Peak Error | Delivered/Ref | Regulated up to (N·m) | First failure (N·m) |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {:.4} | {:.4} | {:.4} | {} | {} | {} |",
            r.scenario,
            r.source.name(),
            r.rms_error,
            r.rms_error_with_transient,
            r.peak_error,
            r.delivered_ratio.map_or("-".into(), |v| format!("{:.0}%", 100.0 * v)),
            opt_fmt(r.regulated_up_to),
            opt_fmt(r.first_failure),
        );
    }
    s
}

// ---------------------------------------------------------------- qp-solve

/// Dense QP `min ½θᵀHθ + fᵀθ  s.t.  Gθ ≤ h`.
///
/// On disk the problem is a set of CSV blocks, each introduced by a
/// `[hessian]`, `[linear]`, `[constraints]`, `[bounds]` or `[tol]` line.
/// Vectors may be written as one row or one column. `#` starts a comment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QpFile {
    pub hessian: Vec<Vec<f64>>,
    pub linear: Vec<f64>,
    pub constraints: Vec<Vec<f64>>,
    pub bounds: Vec<f64>,
    pub tol: Option<f64>,
}

pub fn parse_qp_blocks(text: &str, origin: &str) -> Result<QpFile> {
    let mut blocks: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim().to_string();
            if !["hessian", "linear", "constraints", "bounds", "tol"].contains(&name.as_str()) {
                return Err(Error::Data(format!("{origin}:{}: unknown block [{name}]", i + 1)));
            }
            if blocks.iter().any(|(n, _)| *n == name) {
                return Err(Error::Data(format!("{origin}:{}: block [{name}] repeated", i + 1)));
            }
            blocks.push((name, Vec::new()));
            continue;
        }
        let Some((_, rows)) = blocks.last_mut() else {
            return Err(Error::Data(format!("{origin}:{}: data before the first block header", i + 1)));
        };
        let row = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("{origin}:{}: not a number: {:?}", i + 1, c.trim())))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let take = |name: &str| blocks.iter().find(|(n, _)| n == name).map(|(_, r)| r.clone());
    let vector = |rows: Vec<Vec<f64>>| -> Vec<f64> { rows.into_iter().flatten().collect() };
    let hessian = take("hessian").ok_or_else(|| Error::Data(format!("{origin}: missing [hessian] block")))?;
    let linear = take("linear").map(vector).unwrap_or_else(|| vec![0.0; hessian.len()]);
    let tol = match take("tol").map(vector) {
        None => None,
        Some(v) if v.len() == 1 => Some(v[0]),
        Some(_) => return Err(Error::Data(format!("{origin}: [tol] holds one number"))),
    };
    Ok(QpFile {
        hessian,
        linear,
        constraints: take("constraints").unwrap_or_default(),
        bounds: take("bounds").map(vector).unwrap_or_default(),
        tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolutionFile {
    pub status: String,
    pub objective: f64,
    pub iterations: usize,
    pub theta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub active_set: Vec<usize>,
    pub stationarity: f64,
    pub primal_feasibility: f64,
    pub complementary_slackness: f64,
    pub dual_feasibility: f64,
    pub certificate: Option<Vec<f64>>,
}

fn dense(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<nalgebra::DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Data(format!("{what}: every row needs {ncols} entries")));
    }
    Ok(nalgebra::DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn solve_qp_file(problem: &QpFile) -> Result<QpSolutionFile> {
    let n = problem.linear.len();
    let h = dense(&problem.hessian, n, "hessian")?;
    let g = dense(&problem.constraints, n, "constraints")?;
    let p = QpProblem::new(
        h,
        nalgebra::DVector::from_column_slice(&problem.linear),
        g,
        nalgebra::DVector::from_column_slice(&problem.bounds),
    )?;
    let mut opts = QpOptions::default();
    if let Some(tol) = problem.tol {
        opts.tol = tol;
    }
    let sol = solve_qp(&p, &opts)?;
    Ok(QpSolutionFile {
        status: match sol.status {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::MaxIterations => "max_iterations",
        }
        .into(),
        objective: sol.objective,
        iterations: sol.iterations,
        theta: sol.theta.iter().copied().collect(),
        lambda: sol.lambda.iter().copied().collect(),
        active_set: sol.active_set.clone(),
        stationarity: sol.kkt.stationarity,
        primal_feasibility: sol.kkt.primal_feasibility,
        complementary_slackness: sol.kkt.complementary_slackness,
        dual_feasibility: sol.kkt.dual_feasibility,
        certificate: sol.certificate.map(|c| c.iter().copied().collect()),
    })
}

/// Solves the QP in `problem`; returns the solution as TOML text. An
/// infeasible problem is reported as [`Error::Infeasible`] after the file is
/// written.
pub fn cmd_qp_solve(problem: &Path, out: Option<&Path>) -> Result<String> {
    let file = parse_qp_blocks(&read_text(problem)?, &problem.display().to_string())?;
    let sol = solve_qp_file(&file)?;
    let text = to_toml(&sol)?;
    if let Some(out) = out {
        write_file(&out.join("qp_solution.toml"), text.as_bytes())?;
    }
    if sol.status == "infeasible" {
        return Err(Error::Infeasible(format!("{}: constraints admit no point", problem.display())));
    }
    Ok(text)
}

// ---------------------------------------------------------------- report

pub const STAGES: [&str; 5] = ["simulate", "calibrate", "evaluate", "temp-fit", "control-sim"];
pub const REPORT_FILE: &str = "report.md";
/// Prefix of the only report line that varies between identical runs.
pub const TIMESTAMP_PREFIX: &str = "Generated (unix seconds):";

/// Consolidates a run directory into `report.md`.
pub fn cmd_report(run: &Path) -> Result<PathBuf> {
    let expected: Vec<PathBuf> = STAGES
        .iter()
        .map(|s| run.join(format!("{s}.manifest.toml")))
        .chain([run.join(CONFIG_FILE)])
        .collect();
    let missing: Vec<String> = expected
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{}: missing run artifacts: {}",
            run.display(),
            missing.join(", ")
        )));
    }
    let cfg = load_config(Some(&run.join(CONFIG_FILE)))?;
    let hash = config_hash(&cfg)?;
    let manifests: Vec<Manifest> = STAGES
        .iter()
        .map(|s| read_manifest(&run.join(format!("{s}.manifest.toml"))))
        .collect::<Result<_>>()?;

    let mut r = String::new();
    let _ = writeln!(r, "# Torque sensor run report\n");
    let _ = writeln!(
        r,
        "{TIMESTAMP_PREFIX} {}",
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    );
    let _ = writeln!(r, "Config hash: `{hash}`");
    let _ = writeln!(r, "Seed: {}\n", cfg.seed);
    for m in &manifests {
        if m.config_hash != hash {
            let _ = writeln!(
                r,
                "**Warning:** stage `{}` ran with config `{}`, not the resolved config above.\n",
                m.stage, m.config_hash
            );
        }
    }

    let _ = writeln!(r, "## Files\n");
    let _ = writeln!(r, "| Stage | Role | File | SHA-256 | Status |");
    let _ = writeln!(r, "|---|---|---|---|---|");
    for m in &manifests {
        for (role, list) in [("input", &m.inputs), ("output", &m.outputs)] {
            for f in list {
                let path = run.join(&f.name);
                let status = match sha256_file(&path) {
                    Ok(h) if h == f.sha256 => "ok",
                    Ok(_) => "changed since run",
                    Err(_) => "missing",
                };
                let _ = writeln!(r, "| {} | {role} | {} | `{}` | {status} |", m.stage, f.name, f.sha256);
            }
        }
    }

    let _ = writeln!(r, "\n## Flexure\n");
    let st = torsional_stiffness(&cfg.beam)?;
    let _ = writeln!(r, "- Spoke tip stiffness: {:.6e} N/m", st.k_b);
    let _ = writeln!(r, "- Torsional stiffness: {:.4} N·m/rad", st.k_t);

    let _ = writeln!(r, "\n## Stage results\n");
    for m in &manifests {
        let _ = writeln!(r, "### {}\n", m.stage);
        for n in &m.notes {
            let _ = writeln!(r, "- {n}");
        }
        let _ = writeln!(r);
    }

    let _ = writeln!(r, "## Calibration models\n");
    for name in ["model_ls.toml", "model_qp.toml"] {
        let file = read_model(&run.join(name))?;
        let md = &file.model;
        let _ = writeln!(
            r,
            "{} (gamma {}, e_max {} N·m, training RMSE {:.5} N·m, max residual {:.5} N·m):\n",
            method_label(md.method),
            md.gamma,
            md.e_max,
            md.fit_report.rmse,
            md.fit_report.max_abs_error
        );
        let coeffs: Vec<String> = md.theta.iter().map(|c| format!("{c:.6e}")).collect();
        let _ = writeln!(r, "```\n{}\n```\n", coeffs.join(" "));
    }
    let drift = read_drift_model(&run.join("drift_model.toml"))?;
    let _ = writeln!(
        r,
        "Drift model over [{}, {}] °C: a = [{}]\n",
        drift.model.valid_range.0,
        drift.model.valid_range.1,
        drift.model.a.iter().map(|c| format!("{c:.6e}")).collect::<Vec<_>>().join(", ")
    );

    let _ = writeln!(r, "## Metrics\n");
    r.push_str(&read_text(&run.join("metrics.md"))?);
    let _ = writeln!(r, "\n## Control simulation\n");
    r.push_str(&read_text(&run.join("control_summary.md"))?);

    let _ = writeln!(r, "\n## Plot data\n");
    let mut figures: Vec<&str> = manifests
        .iter()
        .flat_map(|m| m.outputs.iter())
        .map(|f| f.name.as_str())
        .filter(|n| n.ends_with(".csv") && (n.starts_with("fig_") || n.starts_with("control_")))
        .collect();
    figures.sort_unstable();
    for f in figures {
        let _ = writeln!(r, "- {f}");
    }

    let path = run.join(REPORT_FILE);
    write_file(&path, r.as_bytes())?;
    Ok(path)
}

/// Report text without its timestamp line.
pub fn strip_timestamp(report: &str) -> String {
    report
        .lines()
        .filter(|l| !l.starts_with(TIMESTAMP_PREFIX))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Every stage in order on the default file layout, then the report.
pub fn cmd_run(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    cmd_simulate(cfg, out)?;
    cmd_calibrate(cfg, &out.join("calibration.csv"), Some(&out.join("quiet.csv")), out)?;
    let ls = out.join("model_ls.toml");
    let qp = out.join("model_qp.toml");
    let qs = out.join("quiet.csv");
    let cx = out.join("crosstalk_x.csv");
    let cy = out.join("crosstalk_y.csv");
    let data = out.join("evaluation.csv");
    cmd_evaluate(
        cfg,
        &EvaluateInputs {
            data: &data,
            cycles: None,
            models: vec![&ls, &qp],
            quiet: Some(&qs),
            crosstalk_x: Some(&cx),
            crosstalk_y: Some(&cy),
        },
        out,
    )?;
    cmd_temp_fit(
        cfg,
        &out.join("thermal_setpoints.csv"),
        &[&out.join("drift_zero.csv"), &out.join("drift_loaded.csv")],
        out,
    )?;
    cmd_control_sim(cfg, &qp, out)?;
    cmd_report(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(t: f64, xy: bool) -> SensorFrame {
        SensorFrame {
            t,
            v: [0.1, 1.0 / 3.0, 2.0, 3.2999, 1e-7, 1.6, 0.0, 1.2345678901234567],
            temp_c: 25.0,
            tau_ref: Some(-0.1),
            tau_xy: xy.then_some((25.0, -1e-3)),
        }
    }

    #[test]
    fn dataset_round_trip_is_byte_identical() {
        for xy in [false, true] {
            let frames: Vec<_> = (0..50).map(|k| frame(k as f64 * 1e-3, xy)).collect();
            let a = dataset_to_bytes(&frames).unwrap();
            let back = parse_dataset(&a, "mem").unwrap();
            assert_eq!(back, frames);
            assert_eq!(dataset_to_bytes(&back).unwrap(), a);
        }
    }

    #[test]
    fn header_is_exact() {
        let bytes = dataset_to_bytes(&[frame(0.0, false)]).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("t,v1,v2,v3,v4,v5,v6,v7,v8,temp_c,tau_ref\n"));
        let bad = text.replacen("temp_c", "temp", 1);
        assert!(matches!(parse_dataset(bad.as_bytes(), "mem"), Err(Error::Data(_))));
    }

    #[test]
    fn corrupted_row_reports_row_number() {
        let frames: Vec<_> = (0..3).map(|k| frame(k as f64, false)).collect();
        let text = String::from_utf8(dataset_to_bytes(&frames).unwrap()).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        lines[2] = lines[2].replacen("0.1", "abc", 1);
        let err = parse_dataset(lines.join("\n").as_bytes(), "mem").unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn time_must_increase() {
        let frames = vec![frame(1.0, false), frame(1.0, false)];
        let bytes = dataset_to_bytes(&frames).unwrap();
        assert!(parse_dataset(&bytes, "mem").unwrap_err().to_string().contains("row 2"));
    }

    #[test]
    fn unknown_config_key_is_line_anchored() {
        let err = parse_config("seed = 3\n[calibration]\nemax = 1\n", "run.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("run.toml:3"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn config_round_trips_and_hash_is_stable() {
        let cfg = RunConfig::default();
        let text = config_to_toml(&cfg).unwrap();
        let back = parse_config(&text, "mem").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(config_hash(&back).unwrap(), config_hash(&cfg).unwrap());
        let other = RunConfig { seed: 2, ..cfg };
        assert_ne!(config_hash(&other).unwrap(), config_hash(&back).unwrap());
    }

    #[test]
    fn qp_file_solves() {
        let text = "# projection\n[hessian]\n2,0\n0,2\n[linear]\n-2\n-5\n[constraints]\n1, 2\n[bounds]\n2\n";
        let file = parse_qp_blocks(text, "mem").unwrap();
        assert_eq!(file.linear, vec![-2.0, -5.0]);
        let sol = solve_qp_file(&file).unwrap();
        assert_eq!(sol.status, "optimal");
        // projection of (1, 2.5) onto x + 2y ≤ 2: (0.2, 0.9)
        assert!((sol.theta[0] - 0.2).abs() < 1e-9 && (sol.theta[1] - 0.9).abs() < 1e-9);
        let bad = parse_qp_blocks("[hessian]\n1\n[lin]\n", "mem").unwrap_err();
        assert!(bad.to_string().contains("mem:3"), "{bad}");
    }

    #[test]
    fn report_lists_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let msg = cmd_report(dir.path()).unwrap_err().to_string();
        for s in STAGES {
            assert!(msg.contains(&format!("{s}.manifest.toml")), "{msg}");
        }
        assert!(msg.contains(CONFIG_FILE));
    }
}
