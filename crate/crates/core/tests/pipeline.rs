use std::fs;
use std::path::Path;

use phasefield_core::pipeline::{
    read_matrix_csv, report, run_pipeline, sweep, SimConfig, Stage, StationaryMode,
};

fn short_config(dir: &Path) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.sim.t_end = 4.0;
    cfg
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn seeded_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    run_pipeline(&cfg, Stage::Simulate, None).unwrap();
    let first = files(dir.path());
    run_pipeline(&cfg, Stage::Simulate, None).unwrap();
    let second = files(dir.path());
    assert!(first.len() >= 10);
    assert_eq!(first.len(), second.len());
    for ((na, ca), (nb, cb)) in first.iter().zip(&second) {
        assert_eq!(na, nb);
        assert!(ca == cb, "{na} differs");
    }
}

#[test]
fn default_run_decays_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SimConfig::default();
    cfg.output_dir = dir.path().to_path_buf();
    let run = run_pipeline(&cfg, Stage::Simulate, None).unwrap();
    let sim = run.summary.simulation.as_ref().unwrap();
    assert!(sim.fitted_rate.unwrap() > 0.0);
    assert!(sim.margin.unwrap() > 0.0);
    assert!(sim.final_xi < sim.initial_xi);
    assert!(sim.max_norm_identity_gap <= 1e-12);
    for name in [
        "config.json",
        "stationary.json",
        "stationary.csv",
        "stationary_modes.csv",
        "spectrum.json",
        "controllability.json",
        "null_control.csv",
        "synth.json",
        "riccati_R.csv",
        "gain_K.csv",
        "trajectory.csv",
        "summary.json",
    ] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let header = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(header.starts_with("t,xi_norm,h_norm,thm11_norm,mean_y,mean_z,w_1,w_2,w_3\n"));

    let table = report(dir.path()).unwrap();
    assert!(table.contains("fitted_rate"));
    let decay = fs::read_to_string(dir.path().join("decay.dat")).unwrap();
    let xi: Vec<(f64, f64)> = decay
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<f64> = l.split(' ').map(|v| v.parse().unwrap()).collect();
            (c[0], c[1])
        })
        .collect();
    assert!(xi
        .windows(2)
        .filter(|w| w[0].0 >= 5.0)
        .all(|w| w[1].1 <= w[0].1));
}

#[test]
fn report_needs_no_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    run_pipeline(&cfg, Stage::Synth, None).unwrap();
    // only the summary is consulted
    for name in ["riccati_R.csv", "gain_K.csv", "null_control.csv"] {
        fs::remove_file(dir.path().join(name)).unwrap();
    }
    let table = report(dir.path()).unwrap();
    assert!(table.contains("margin"));
    assert!(dir.path().join("report.txt").exists());
}

#[test]
fn stored_gain_reproduces_the_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = short_config(a.path());
    let first = run_pipeline(&cfg, Stage::Simulate, None).unwrap();
    let k = read_matrix_csv(&a.path().join("gain_K.csv")).unwrap();
    assert_eq!(k, first.riccati.as_ref().unwrap().k_gain);
    cfg.output_dir = b.path().to_path_buf();
    let second = run_pipeline(&cfg, Stage::Simulate, Some(&k)).unwrap();
    assert!(second.summary.synth.is_none());
    assert_eq!(
        fs::read(a.path().join("trajectory.csv")).unwrap(),
        fs::read(b.path().join("trajectory.csv")).unwrap()
    );
}

#[test]
fn open_loop_run_has_no_margin() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_config(dir.path());
    cfg.sim.closed_loop = false;
    let run = run_pipeline(&cfg, Stage::Simulate, None).unwrap();
    let sim = run.summary.simulation.unwrap();
    assert!(!sim.closed_loop && sim.margin.is_none());
    assert!(run.summary.synth.is_none());
}

#[test]
fn invalid_inputs_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_config(dir.path());
    cfg.actuator.a = 0.8;
    cfg.actuator.b = 0.3;
    let e = run_pipeline(&cfg, Stage::Controllability, None).unwrap_err();
    assert!(e.is_validation(), "{e}");

    let e = SimConfig::from_json(r#"{"schema_version": 1, "bogus": 3}"#).unwrap_err();
    assert!(e.is_validation());
    let e = report(&dir.path().join("missing")).unwrap_err();
    assert!(e.is_validation());
}

#[test]
fn stage_failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_config(dir.path());
    cfg.sim.dt = 50.0;
    cfg.sim.t_end = 100.0;
    let e = run_pipeline(&cfg, Stage::Simulate, None).unwrap_err();
    assert!(e.to_string().starts_with("simulate stage failed"), "{e}");
}

#[test]
fn minimizing_stationary_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short_config(dir.path());
    cfg.params.nu = 0.02;
    cfg.stationary.mode = StationaryMode::Minimize;
    let run = run_pipeline(&cfg, Stage::Spectrum, None).unwrap();
    let st = run.summary.stationary.unwrap();
    assert!(st.residual <= 1e-8 && st.upsilon_monotone);
    assert!(run.summary.spectrum.unwrap().n_unstable >= 2);
}

#[test]
fn sweep_reports_the_largest_decaying_amplitude() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let s = sweep(&cfg, &[1e-3, 1e-2]).unwrap();
    assert_eq!(s.entries.len(), 2);
    assert!(s.entries.iter().all(|e| e.decayed));
    assert_eq!(s.largest_decaying_rho, Some(1e-2));
    assert!(sweep(&cfg, &[]).unwrap_err().is_validation());
}
