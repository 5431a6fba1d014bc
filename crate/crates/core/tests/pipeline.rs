use std::fs;

use torquesense::calibration::{CalibrationModel, FeatureSpec, FitReport, Method};
use torquesense::io::{self, EvaluateInputs, RunConfig};
use torquesense::metrics;
use torquesense::sensor_sim::{SensorFrame, TorqueProfile, N_CHANNELS};
use torquesense::Error;

/// Noise-free array whose first channel is exactly 1.6 + 0.01·τ.
fn linear_frames(profile: &TorqueProfile, rate: f64) -> Vec<SensorFrame> {
    let n = (profile.duration() * rate).round() as usize;
    (0..n)
        .map(|k| {
            let t = k as f64 / rate;
            let tau = profile.torque(t);
            let mut v = [0.0; N_CHANNELS];
            for (i, slot) in v.iter_mut().enumerate() {
                *slot = 1.6 + 0.01 * tau * if i % 2 == 0 { 1.0 } else { -1.0 };
            }
            SensorFrame {
                t,
                v,
                temp_c: 25.0,
                tau_ref: Some(tau),
                tau_xy: None,
            }
        })
        .collect()
}

fn linear_model(n_channels: usize) -> CalibrationModel {
    let spec = FeatureSpec {
        n_channels,
        powers: vec![1],
        include_bias: true,
    };
    let mut theta = vec![0.0; spec.dim()];
    theta[0] = 100.0;
    *theta.last_mut().unwrap() = -160.0;
    CalibrationModel {
        theta,
        spec,
        e_max: f64::INFINITY,
        gamma: 0.0,
        method: Method::LeastSquares,
        fit_report: FitReport {
            rmse: 0.0,
            max_abs_error: 0.0,
            quiet_std: None,
            ridge: None,
        },
    }
}

#[test]
fn perfect_linear_sensor_has_no_nonlinearity_or_hysteresis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let profile = TorqueProfile::calibration_cycles();
    let data = dir.path().join("linear.csv");
    io::write_dataset(&data, &linear_frames(&profile, 1000.0)).unwrap();
    io::write_cycles(&io::cycles_sidecar(&data), &profile.cycle_segments(1000.0)).unwrap();
    let model = dir.path().join("model.toml");
    io::write_model(&model, &linear_model(N_CHANNELS), "none", 0).unwrap();

    io::cmd_evaluate(
        &cfg,
        &EvaluateInputs {
            data: &data,
            cycles: None,
            models: vec![&model],
            quiet: None,
            crosstalk_x: None,
            crosstalk_y: None,
        },
        dir.path(),
    )
    .unwrap();
    let text = fs::read_to_string(dir.path().join("metrics.toml")).unwrap();
    let parsed: toml::Table = toml::from_str(&text).unwrap();
    let r = &parsed["report"].as_array().unwrap()[0];
    let get = |k: &str| r[k].as_float().unwrap();
    assert!(get("nonlinearity_pct_fs") < 1e-9, "{text}");
    assert!(get("hysteresis_pct_fs") < 1e-9, "{text}");
    assert!(get("max_pct_fs") < 1e-9, "{text}");
    assert!(fs::read_to_string(dir.path().join("metrics.md")).unwrap().contains("| LS |"));
}

#[test]
fn channel_count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let profile = TorqueProfile::Constant {
        value: 1.0,
        duration: 0.1,
    };
    let data = dir.path().join("d.csv");
    io::write_dataset(&data, &linear_frames(&profile, 1000.0)).unwrap();
    let model = dir.path().join("m.toml");
    io::write_model(&model, &linear_model(4), "none", 0).unwrap();
    let err = io::cmd_evaluate(
        &RunConfig::default(),
        &EvaluateInputs {
            data: &data,
            cycles: None,
            models: vec![&model],
            quiet: None,
            crosstalk_x: None,
            crosstalk_y: None,
        },
        dir.path(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    assert!(err.to_string().contains("4 channels"), "{err}");
}

#[test]
fn stage_outputs_agree_with_library_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = RunConfig::default();
    io::cmd_simulate(&cfg, out).unwrap();

    // 10 s at 1 kHz
    let quiet = io::read_dataset(&out.join("quiet.csv")).unwrap();
    assert_eq!(quiet.len(), 10_000);
    let segments = io::read_cycles(&out.join("calibration.cycles.csv")).unwrap();
    assert_eq!(segments.len(), 20);
    assert_eq!(segments.iter().filter(|s| s.polarity == 1).count(), 10);

    io::cmd_calibrate(&cfg, &out.join("calibration.csv"), Some(&out.join("quiet.csv")), out).unwrap();
    let summary: io::CalibrationSummary =
        toml::from_str(&fs::read_to_string(out.join("calibration_summary.toml")).unwrap()).unwrap();
    assert!(summary.improvement_ratio >= 1.5, "{summary:?}");
    assert!(!summary.gamma_forced);
    assert!(summary.qp_max_train_residual <= 0.16 + 1e-8);

    let qp = io::read_model(&out.join("model_qp.toml")).unwrap();
    assert_eq!(qp.config_hash, io::config_hash(&cfg).unwrap());
    assert_eq!(qp.seed, cfg.seed);
    let est: Vec<f64> = quiet.iter().map(|f| torquesense::calibration::predict(&qp.model, f)).collect();
    assert_eq!(summary.qp_resolution_3sigma, metrics::resolution_3sigma(&est).unwrap());

    let qp_path = out.join("model_qp.toml");
    let data = out.join("evaluation.csv");
    let quiet_path = out.join("quiet.csv");
    io::cmd_evaluate(
        &cfg,
        &EvaluateInputs {
            data: &data,
            cycles: None,
            models: vec![&qp_path],
            quiet: Some(&quiet_path),
            crosstalk_x: None,
            crosstalk_y: None,
        },
        out,
    )
    .unwrap();
    let parsed: toml::Table = toml::from_str(&fs::read_to_string(out.join("metrics.toml")).unwrap()).unwrap();
    let res = parsed["report"].as_array().unwrap()[0]["resolution_3sigma"].as_float().unwrap();
    assert_eq!(res, summary.qp_resolution_3sigma);
}

#[test]
fn single_gamma_grid_is_marked_forced() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.calibration.gamma_grid = vec![10.0];
    let profile = TorqueProfile::Cycles {
        peak: 25.0,
        cycles: 1,
        ramp_s: 2.0,
        hold_s: 1.0,
        dwell_s: 2.0,
        both_directions: true,
    };
    let data = dir.path().join("short.csv");
    io::write_dataset(&data, &io::simulate_frames(&cfg, profile, 1).unwrap()).unwrap();
    let m = io::cmd_calibrate(&cfg, &data, None, dir.path()).unwrap();
    let summary: io::CalibrationSummary =
        toml::from_str(&fs::read_to_string(dir.path().join("calibration_summary.toml")).unwrap()).unwrap();
    assert!(summary.gamma_forced);
    assert_eq!(summary.gamma, 10.0);
    assert!(m.notes.iter().any(|n| n.contains("forced")));
}

#[test]
fn too_few_rows_for_the_feature_count() {
    let dir = tempfile::tempdir().unwrap();
    let profile = TorqueProfile::Constant {
        value: 1.0,
        duration: 0.024,
    };
    let data = dir.path().join("tiny.csv");
    io::write_dataset(&data, &linear_frames(&profile, 1000.0)).unwrap();
    let err = io::cmd_calibrate(&RunConfig::default(), &data, None, dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("25 coefficients"), "{err}");
}

#[test]
fn drift_model_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let model = torquesense::thermal::DriftScenario::default().planted_model();
    let path = dir.path().join("drift.toml");
    io::write_drift_model(&path, &model, "abc", 7).unwrap();
    let back = io::read_drift_model(&path).unwrap();
    assert_eq!(back.model, model);
    assert_eq!(back.seed, 7);
    fs::write(&path, fs::read_to_string(&path).unwrap().replace("torquesense-drift/1", "other/2")).unwrap();
    assert!(io::read_drift_model(&path).is_err());
}
