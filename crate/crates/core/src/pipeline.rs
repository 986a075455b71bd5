//! Run configuration, stage orchestration and on-disk artifacts.
//!
//! Every stage writes its own files into the run directory; `summary.json`
//! collects the headline numbers of all stages that ran so that `report`
//! never has to recompute anything.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actuator::{null_control, Actuator, Interval, KalmanCertificate, NullControlPlan};
use crate::error::{Error, Result, StageContext};
use crate::linearization::{assemble_plant, LinearizedPlant, PhysicalParams};
use crate::lqr::{
    closed_loop_spectrum, closed_loop_spectrum_with_gain, riccati_residual, solve_care, ClosedLoopSpectrum, RiccatiMethod, RiccatiOptions,
    RiccatiSolution,
};
use crate::sim::{random_initial, simulate, Feedback, Scheme, SimOptions, TrajectoryRecord};
use crate::spectral::{ScalarField, SpectralBasis};
use crate::stationary::{
    chi_infinity, gbar_infinity, stationary_constant, stationary_minimize, ConstantBranch, MinimizeOptions,
    StationaryState,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub params: PhysicalParams,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub stationary: StationaryConfig,
    #[serde(default)]
    pub actuator: ActuatorConfig,
    #[serde(default)]
    pub riccati: RiccatiConfig,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_seed() -> u64 {
    42
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            schema_version: SCHEMA_VERSION,
            params: PhysicalParams::default(),
            basis: BasisConfig::default(),
            stationary: StationaryConfig::default(),
            actuator: ActuatorConfig::default(),
            riccati: RiccatiConfig::default(),
            sim: SimSection::default(),
            seed: default_seed(),
            output_dir: default_output_dir(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    pub length: f64,
    pub modes: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig { length: 1.0, modes: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StationaryMode {
    Constant,
    Minimize,
}

/// Initial guess `mean + amplitude·cos(kπx/L)` for the minimizing flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitProfile {
    pub mean: f64,
    pub amplitude: f64,
    pub wavenumber: usize,
}

impl Default for InitProfile {
    fn default() -> Self {
        InitProfile {
            mean: 0.0,
            amplitude: 0.1,
            wavenumber: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StationaryConfig {
    pub mode: StationaryMode,
    pub which: ConstantBranch,
    /// The constant `C`; must be zero in constant mode.
    pub lagrange: f64,
    pub theta: f64,
    pub init: InitProfile,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for StationaryConfig {
    fn default() -> Self {
        StationaryConfig {
            mode: StationaryMode::Constant,
            which: ConstantBranch::Zero,
            lagrange: 0.0,
            theta: 0.0,
            init: InitProfile::default(),
            tol: 1e-8,
            max_iters: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActuatorConfig {
    pub a: f64,
    pub b: f64,
    /// Null-control horizon.
    pub t0: f64,
}

impl Default for ActuatorConfig {
    fn default() -> Self {
        let w = Interval::default();
        ActuatorConfig { a: w.a, b: w.b, t0: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiccatiConfig {
    pub method: RiccatiMethod,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for RiccatiConfig {
    fn default() -> Self {
        let o = RiccatiOptions::default();
        RiccatiConfig {
            method: o.method,
            tol: o.tol,
            max_iters: o.max_iters,
        }
    }
}

impl RiccatiConfig {
    pub fn options(&self) -> RiccatiOptions {
        RiccatiOptions {
            method: self.method,
            tol: self.tol,
            max_iters: self.max_iters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub dt: f64,
    pub t_end: f64,
    /// Initial Ξ-norm.
    pub rho: f64,
    pub closed_loop: bool,
    pub nonlinear: bool,
    pub scheme: Scheme,
    pub record_every: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        let o = SimOptions::default();
        SimSection {
            dt: o.dt,
            t_end: o.t_end,
            rho: 1e-2,
            closed_loop: true,
            nonlinear: o.nonlinear,
            scheme: o.scheme,
            record_every: o.record_every,
        }
    }
}

impl SimSection {
    pub fn options(&self) -> SimOptions {
        SimOptions {
            dt: self.dt,
            t_end: self.t_end,
            nonlinear: self.nonlinear,
            scheme: self.scheme,
            record_every: self.record_every,
            fit_window: None,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
    }
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<SimConfig> {
        let cfg: SimConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<SimConfig> {
        SimConfig::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidParameter(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.params.validate()?;
        positive("basis.length", self.basis.length)?;
        let m = self.basis.modes;
        if m < 2 || !m.is_power_of_two() {
            return Err(Error::InvalidParameter(format!(
                "basis.modes must be a power of two >= 2, got {m}"
            )));
        }
        let st = &self.stationary;
        if !st.theta.is_finite() || !st.lagrange.is_finite() {
            return Err(Error::InvalidParameter("stationary.theta and lagrange must be finite".into()));
        }
        if st.mode == StationaryMode::Constant && st.lagrange != 0.0 {
            return Err(Error::InvalidParameter(
                "constant stationary states require lagrange = 0".into(),
            ));
        }
        positive("stationary.tol", st.tol)?;
        if st.init.wavenumber >= m {
            return Err(Error::InvalidParameter(format!(
                "stationary.init.wavenumber must be below {m}"
            )));
        }
        Interval::new(self.actuator.a, self.actuator.b).validate(self.basis.length)?;
        positive("actuator.t0", self.actuator.t0)?;
        positive("riccati.tol", self.riccati.tol)?;
        if self.riccati.max_iters == 0 {
            return Err(Error::InvalidParameter("riccati.max_iters must be positive".into()));
        }
        positive("sim.dt", self.sim.dt)?;
        positive("sim.t_end", self.sim.t_end)?;
        positive("sim.rho", self.sim.rho)?;
        if self.sim.record_every == 0 {
            return Err(Error::InvalidParameter("sim.record_every must be positive".into()));
        }
        if self.sim.dt > self.sim.t_end {
            return Err(Error::InvalidParameter("sim.dt exceeds sim.t_end".into()));
        }
        Ok(())
    }

    pub fn interval(&self) -> Interval {
        Interval::new(self.actuator.a, self.actuator.b)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationarySummary {
    #[serde(rename = "C")]
    pub lagrange: f64,
    pub theta_inf: f64,
    pub mode: StationaryMode,
    pub residual: f64,
    #[serde(rename = "Upsilon")]
    pub upsilon: f64,
    pub chi_inf: f64,
    pub gbar_inf: f64,
    pub mean_phi: f64,
    pub flow_steps: usize,
    pub rejected_steps: usize,
    pub upsilon_monotone: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumSummary {
    #[serde(rename = "F_bar")]
    pub f_bar: f64,
    #[serde(rename = "F_l")]
    pub f_l: f64,
    #[serde(rename = "N_unstable")]
    pub n_unstable: usize,
    pub eigenvalues: Vec<f64>,
    /// `λ_{N+1}`.
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllabilitySummary {
    #[serde(rename = "N")]
    pub n: usize,
    pub omega: (f64, f64),
    pub det_d: f64,
    pub lambda_min_d: f64,
    pub lambda_max_d: f64,
    pub certificate_ok: bool,
    pub gramian_cond: f64,
    #[serde(rename = "T0")]
    pub t0: f64,
    pub steering_error: f64,
    pub control_energy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSummary {
    #[serde(rename = "N")]
    pub n: usize,
    pub method: RiccatiMethod,
    pub residual_rel: f64,
    pub residual_sampled: f64,
    pub residual_log: Vec<f64>,
    pub iterations: usize,
    pub margin: f64,
    /// `(min Re, max Re)` of the closed-loop spectrum.
    pub eig_extremes: (f64, f64),
    pub commutator_defect: f64,
    pub rayleigh_bounds: (f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub closed_loop: bool,
    pub nonlinear: bool,
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    pub rho: f64,
    pub seed: u64,
    pub initial_xi: f64,
    pub final_xi: f64,
    pub fitted_rate: Option<f64>,
    pub fit_r2: f64,
    pub fit_window: (f64, f64),
    pub thm11_rate: Option<f64>,
    pub max_norm_identity_gap: f64,
    pub mean_drift: (f64, f64),
    /// Closed-loop linear margin of the gain used, absent for open-loop runs.
    pub margin: Option<f64>,
    pub chi_inf: f64,
    pub gbar_inf: f64,
}

/// Everything the report needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub config: SimConfig,
    pub stationary: Option<StationarySummary>,
    pub spectrum: Option<SpectrumSummary>,
    pub controllability: Option<ControllabilitySummary>,
    pub synth: Option<SynthSummary>,
    pub simulation: Option<SimulationSummary>,
}

/// Last stage to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Stationary,
    Spectrum,
    Controllability,
    Synth,
    Simulate,
}

/// In-memory products of a pipeline run.
#[derive(Debug)]
pub struct PipelineRun {
    pub summary: RunSummary,
    pub basis: Arc<SpectralBasis>,
    pub stationary: StationaryState,
    pub plant: Option<LinearizedPlant>,
    pub actuator: Option<Actuator>,
    pub plan: Option<NullControlPlan>,
    pub riccati: Option<RiccatiSolution>,
    pub spectrum: Option<ClosedLoopSpectrum>,
    pub trajectory: Option<TrajectoryRecord>,
}

pub fn compute_stationary(cfg: &SimConfig, basis: &Arc<SpectralBasis>) -> Result<(StationaryState, StationarySummary)> {
    let st = &cfg.stationary;
    let (state, steps, rejected, monotone) = match st.mode {
        StationaryMode::Constant => (stationary_constant(basis, st.which, st.theta, cfg.params.nu), 0, 0, true),
        StationaryMode::Minimize => {
            let l = basis.length();
            let init = ScalarField::from_fn(basis, |x| {
                st.init.mean + st.init.amplitude * (st.init.wavenumber as f64 * std::f64::consts::PI * x / l).cos()
            });
            let opts = MinimizeOptions {
                tol: st.tol,
                max_iters: st.max_iters,
                ..MinimizeOptions::default()
            };
            let (s, log) = stationary_minimize(cfg.params.nu, st.lagrange, &init, st.theta, &opts)?;
            let monotone = log.is_monotone();
            (s, log.upsilon.len() - 1, log.rejected_steps, monotone)
        }
    };
    let summary = StationarySummary {
        lagrange: state.lagrange,
        theta_inf: state.theta,
        mode: st.mode,
        residual: state.residual,
        upsilon: state.upsilon,
        chi_inf: chi_infinity(&state),
        gbar_inf: gbar_infinity(&state),
        mean_phi: state.phi.mean(),
        flow_steps: steps,
        rejected_steps: rejected,
        upsilon_monotone: monotone,
    };
    Ok((state, summary))
}

pub fn spectrum_summary(plant: &LinearizedPlant) -> SpectrumSummary {
    SpectrumSummary {
        f_bar: plant.f_bar,
        f_l: plant.f_l,
        n_unstable: plant.n_unstable,
        eigenvalues: plant.eigenvalues(),
        gap: plant.stable_gap(),
    }
}

/// Unstable modal coordinates `ξ₀ᵢ = ⟨x₀, vᵢ⟩` of a stacked state.
pub fn unstable_coordinates(plant: &LinearizedPlant, x0: &DVector<f64>) -> DVector<f64> {
    let m = plant.modes();
    DVector::from_iterator(
        plant.n_unstable,
        plant
            .unstable_subspace()
            .iter()
            .map(|p| p.vector[0] * x0[p.mode] + p.vector[1] * x0[m + p.mode]),
    )
}

/// RK4 steps used for the steering check.
pub const STEERING_RK4_STEPS: usize = 10_000;

pub fn controllability(
    cfg: &SimConfig,
    plant: &LinearizedPlant,
    x0: &DVector<f64>,
) -> Result<(Actuator, NullControlPlan, ControllabilitySummary)> {
    let act = Actuator::new(cfg.interval(), plant)?;
    let cert: KalmanCertificate = act.kalman_certificate();
    if !cert.ok {
        return Err(Error::InvalidParameter(format!(
            "actuator on ({}, {}) fails the controllability test (lambda_min(D) = {:.3e})",
            cfg.actuator.a, cfg.actuator.b, cert.lambda_min
        )));
    }
    let xi0 = unstable_coordinates(plant, x0);
    let plan = null_control(&act, plant, &xi0, cfg.actuator.t0)?;
    let summary = ControllabilitySummary {
        n: act.n_controls(),
        omega: (cfg.actuator.a, cfg.actuator.b),
        det_d: cert.det,
        lambda_min_d: cert.lambda_min,
        lambda_max_d: cert.lambda_max,
        certificate_ok: cert.ok,
        gramian_cond: plan.gramian_cond,
        t0: plan.t0,
        steering_error: plan.steering_error_rk4(STEERING_RK4_STEPS),
        control_energy: plan.energy,
    };
    Ok((act, plan, summary))
}

pub fn synthesize(
    cfg: &SimConfig,
    plant: &LinearizedPlant,
    act: &Actuator,
) -> Result<(RiccatiSolution, ClosedLoopSpectrum, SynthSummary)> {
    let sol = solve_care(plant, act, &cfg.riccati.options())?;
    let cl = closed_loop_spectrum(&sol, plant, act);
    if !(cl.margin > 0.0) {
        return Err(Error::Unstable(cl.margin));
    }
    let re = cl.eigs.iter().map(|e| e.re);
    let eig_extremes = (
        re.clone().fold(f64::INFINITY, f64::min),
        re.fold(f64::NEG_INFINITY, f64::max),
    );
    let summary = SynthSummary {
        n: act.n_controls(),
        method: sol.method,
        residual_rel: sol.residual_rel,
        residual_sampled: riccati_residual(&sol.r, plant, act, 100, cfg.seed),
        residual_log: sol.residual_log.clone(),
        iterations: sol.iterations,
        margin: cl.margin,
        eig_extremes,
        commutator_defect: sol.commutator_defect(plant),
        rayleigh_bounds: sol.rayleigh_bounds(&plant.basis, 100, cfg.seed),
    };
    Ok((sol, cl, summary))
}

pub fn simulation_summary(
    cfg: &SimConfig,
    rec: &TrajectoryRecord,
    s: &StationaryState,
    margin: Option<f64>,
) -> SimulationSummary {
    let gap = rec
        .xi_norms
        .iter()
        .zip(&rec.thm11_norms)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let (m0, mn) = (rec.means[0], *rec.means.last().expect("nonempty trajectory"));
    SimulationSummary {
        closed_loop: margin.is_some(),
        nonlinear: cfg.sim.nonlinear,
        scheme: cfg.sim.scheme,
        dt: cfg.sim.dt,
        t_end: cfg.sim.t_end,
        rho: cfg.sim.rho,
        seed: cfg.seed,
        initial_xi: rec.initial_xi(),
        final_xi: rec.final_xi(),
        fitted_rate: rec.fit.rate,
        fit_r2: rec.fit.r2,
        fit_window: rec.fit.window,
        thm11_rate: rec.thm11_fit.rate,
        max_norm_identity_gap: gap,
        mean_drift: ((mn.0 - m0.0).abs(), (mn.1 - m0.1).abs()),
        margin,
        chi_inf: chi_infinity(s),
        gbar_inf: gbar_infinity(s),
    }
}

/// Runs the stages up to `last` in memory, without touching the disk.
pub fn run_stages(cfg: &SimConfig, last: Stage, gain: Option<&DMatrix<f64>>) -> Result<PipelineRun> {
    cfg.validate()?;
    let basis = SpectralBasis::new(cfg.basis.length, cfg.basis.modes)?;
    let (stationary, st_summary) = compute_stationary(cfg, &basis).stage("stationary")?;
    let mut run = PipelineRun {
        summary: RunSummary {
            schema_version: SCHEMA_VERSION,
            config: cfg.clone(),
            stationary: Some(st_summary),
            spectrum: None,
            controllability: None,
            synth: None,
            simulation: None,
        },
        basis: Arc::clone(&basis),
        stationary,
        plant: None,
        actuator: None,
        plan: None,
        riccati: None,
        spectrum: None,
        trajectory: None,
    };
    if last == Stage::Stationary {
        return Ok(run);
    }

    let plant = assemble_plant(cfg.params, &run.stationary, &basis).stage("spectrum")?;
    run.summary.spectrum = Some(spectrum_summary(&plant));
    if last == Stage::Spectrum {
        run.plant = Some(plant);
        return Ok(run);
    }

    let initial = random_initial(&basis, cfg.sim.rho, cfg.seed).stage("controllability")?;
    let x0 = initial.stacked();
    let (act, plan, c_summary) = controllability(cfg, &plant, &x0).stage("controllability")?;
    run.summary.controllability = Some(c_summary);

    let wants_feedback = last == Stage::Synth || (last == Stage::Simulate && cfg.sim.closed_loop);
    if wants_feedback && gain.is_none() {
        let (sol, cl, s_summary) = synthesize(cfg, &plant, &act).stage("synth")?;
        run.summary.synth = Some(s_summary);
        run.riccati = Some(sol);
        run.spectrum = Some(cl);
    }

    if last == Stage::Simulate {
        let k = gain.or(run.riccati.as_ref().map(|s| &s.k_gain));
        let feedback = if cfg.sim.closed_loop {
            let k = k.ok_or_else(|| Error::InvalidParameter("closed-loop run without a gain".into()))?;
            Some(Feedback { gain: k, act: &act })
        } else {
            None
        };
        let rec = simulate(&plant, &run.stationary, feedback, &initial, &cfg.sim.options()).stage("simulate")?;
        let margin = feedback.map(|fb| closed_loop_spectrum_with_gain(&plant, &act, fb.gain).margin);
        run.summary.simulation = Some(simulation_summary(cfg, &rec, &run.stationary, margin));
        run.trajectory = Some(rec);
    }
    run.plant = Some(plant);
    run.actuator = Some(act);
    run.plan = Some(plan);
    Ok(run)
}

/// Shortest round-trip representation, in exponent form.
fn num(v: f64) -> String {
    format!("{v:e}")
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| num(m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Format(format!("{}: ragged rows", path.display())));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_stationary_csv(path: &Path, cfg: &SimConfig, s: &StationaryState) -> Result<()> {
    let p = &cfg.params;
    let sigma = s.sigma(p.alpha0(), p.l0).values();
    let phi = s.phi.values();
    let mut out = String::from("x,phi,theta,sigma\n");
    for (i, x) in s.basis().nodes().iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", num(*x), num(phi[i]), num(s.theta), num(sigma[i]));
    }
    fs::write(path, out)?;
    Ok(())
}

/// One row per mode: `k,coeff`.
fn write_modes_csv(path: &Path, f: &ScalarField) -> Result<()> {
    let mut out = String::from("k,coeff\n");
    for (k, c) in f.coeffs().iter().enumerate() {
        let _ = writeln!(out, "{k},{}", num(*c));
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_null_control_csv(path: &Path, plan: &NullControlPlan) -> Result<()> {
    let mut out = String::from("t");
    for j in 0..plan.lambdas.len() {
        let _ = write!(out, ",w_{}", j + 1);
    }
    out.push('\n');
    for (t, w) in plan.times.iter().zip(&plan.samples) {
        out.push_str(&num(*t));
        for v in w.iter() {
            out.push(',');
            out.push_str(&num(*v));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_trajectory_csv(path: &Path, rec: &TrajectoryRecord, n_controls: usize) -> Result<()> {
    let mut out = String::from("t,xi_norm,h_norm,thm11_norm,mean_y,mean_z");
    for j in 0..n_controls {
        let _ = write!(out, ",w_{}", j + 1);
    }
    out.push('\n');
    for i in 0..rec.times.len() {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            num(rec.times[i]),
            num(rec.xi_norms[i]),
            num(rec.h_norms[i]),
            num(rec.thm11_norms[i]),
            num(rec.means[i].0),
            num(rec.means[i].1)
        );
        let w = &rec.control_amplitudes[i];
        for j in 0..n_controls {
            out.push(',');
            out.push_str(&num(w.get(j).copied().unwrap_or(0.0)));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes the artifacts of every stage that ran into `dir`.
pub fn write_run(run: &PipelineRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let cfg = &run.summary.config;
    fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
    if let Some(s) = &run.summary.stationary {
        write_json(&dir.join("stationary.json"), s)?;
        write_stationary_csv(&dir.join("stationary.csv"), cfg, &run.stationary)?;
        write_modes_csv(&dir.join("stationary_modes.csv"), &run.stationary.phi)?;
    }
    if let Some(s) = &run.summary.spectrum {
        write_json(&dir.join("spectrum.json"), s)?;
    }
    if let (Some(s), Some(plan)) = (&run.summary.controllability, &run.plan) {
        write_json(&dir.join("controllability.json"), s)?;
        write_null_control_csv(&dir.join("null_control.csv"), plan)?;
    }
    if let (Some(s), Some(sol)) = (&run.summary.synth, &run.riccati) {
        write_json(&dir.join("synth.json"), s)?;
        write_matrix_csv(&dir.join("riccati_R.csv"), &sol.r)?;
        write_matrix_csv(&dir.join("gain_K.csv"), &sol.k_gain)?;
    }
    if let Some(rec) = &run.trajectory {
        let n = run.actuator.as_ref().map_or(0, Actuator::n_controls);
        let n = if run.summary.simulation.as_ref().is_some_and(|s| s.closed_loop) { n } else { 0 };
        write_trajectory_csv(&dir.join("trajectory.csv"), rec, n)?;
    }
    write_json(&dir.join("summary.json"), &run.summary)?;
    Ok(())
}

/// Runs up to `last` and writes everything into `cfg.output_dir`.
pub fn run_pipeline(cfg: &SimConfig, last: Stage, gain: Option<&DMatrix<f64>>) -> Result<PipelineRun> {
    let run = run_stages(cfg, last, gain)?;
    write_run(&run, &cfg.output_dir).stage("output")?;
    Ok(run)
}

pub fn load_summary(run_dir: &Path) -> Result<RunSummary> {
    let path = run_dir.join("summary.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn row(out: &mut String, key: &str, value: String) {
    let _ = writeln!(out, "{key:<28} {value}");
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.6e}"))
}

/// Text table of a completed run.
pub fn report_table(s: &RunSummary) -> String {
    let mut out = String::new();
    let c = &s.config;
    let _ = writeln!(
        out,
        "run: nu={} l0={} gamma0={} L={} M={} omega=({}, {}) seed={}",
        c.params.nu, c.params.l0, c.params.gamma0, c.basis.length, c.basis.modes, c.actuator.a, c.actuator.b, c.seed
    );
    let _ = writeln!(out, "{}", "-".repeat(60));
    match &s.stationary {
        Some(st) => {
            row(&mut out, "stationary_residual", format!("{:.6e}", st.residual));
            row(&mut out, "Upsilon", format!("{:.6e}", st.upsilon));
            row(&mut out, "chi_inf", format!("{:.6e}", st.chi_inf));
            row(&mut out, "gbar_inf", format!("{:.6e}", st.gbar_inf));
        }
        None => row(&mut out, "stationary", "absent".into()),
    }
    match &s.spectrum {
        Some(sp) => {
            row(&mut out, "F_bar", format!("{:.6e}", sp.f_bar));
            row(&mut out, "F_l", format!("{:.6e}", sp.f_l));
            row(&mut out, "N_unstable", sp.n_unstable.to_string());
            let head: Vec<String> = sp.eigenvalues.iter().take(6).map(|v| format!("{v:.4e}")).collect();
            row(&mut out, "eigenvalues (lowest)", head.join(" "));
            row(&mut out, "lambda_N+1", opt(sp.gap));
        }
        None => row(&mut out, "spectrum", "absent".into()),
    }
    match &s.controllability {
        Some(ct) => {
            row(&mut out, "lambda_min(D)", format!("{:.6e}", ct.lambda_min_d));
            row(&mut out, "gramian_cond", format!("{:.6e}", ct.gramian_cond));
            row(&mut out, "steering_error", format!("{:.6e}", ct.steering_error));
            row(&mut out, "control_energy", format!("{:.6e}", ct.control_energy));
        }
        None => row(&mut out, "controllability", "absent".into()),
    }
    match &s.synth {
        Some(sy) => {
            row(&mut out, "riccati_residual_rel", format!("{:.6e}", sy.residual_rel));
            row(&mut out, "riccati_iterations", sy.iterations.to_string());
            row(&mut out, "margin", format!("{:.6e}", sy.margin));
        }
        None => {
            row(&mut out, "riccati_residual_rel", "absent".into());
            row(&mut out, "riccati_iterations", "absent".into());
            row(&mut out, "margin", "absent".into());
        }
    }
    match &s.simulation {
        Some(sim) => {
            row(&mut out, "closed_loop", sim.closed_loop.to_string());
            row(&mut out, "initial_xi", format!("{:.6e}", sim.initial_xi));
            row(&mut out, "final_xi", format!("{:.6e}", sim.final_xi));
            row(&mut out, "fitted_rate", opt(sim.fitted_rate));
            row(&mut out, "fit_r2", format!("{:.6}", sim.fit_r2));
            row(&mut out, "thm11_rate", opt(sim.thm11_rate));
        }
        None => row(&mut out, "fitted_rate", "absent".into()),
    }
    out
}

/// Writes `report.txt` and gnuplot data files into `run_dir`; returns the table.
pub fn report(run_dir: &Path) -> Result<String> {
    let summary = load_summary(run_dir)?;
    let table = report_table(&summary);
    fs::write(run_dir.join("report.txt"), &table)?;
    if let Some(sp) = &summary.spectrum {
        let mut out = String::from("# index eigenvalue\n");
        for (i, v) in sp.eigenvalues.iter().enumerate() {
            let _ = writeln!(out, "{} {}", i + 1, num(*v));
        }
        fs::write(run_dir.join("eigenvalues.dat"), out)?;
    }
    let traj = run_dir.join("trajectory.csv");
    if traj.exists() {
        let text = fs::read_to_string(&traj)?;
        let mut out = String::from("# t xi_norm h_norm thm11_norm\n");
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 4 {
                return Err(Error::Format(format!("{}: short row", traj.display())));
            }
            let _ = writeln!(out, "{} {} {} {}", cols[0], cols[1], cols[2], cols[3]);
        }
        fs::write(run_dir.join("decay.dat"), out)?;
    }
    Ok(table)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub rho: f64,
    pub decayed: bool,
    pub fitted_rate: Option<f64>,
    pub final_xi: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub entries: Vec<SweepEntry>,
    /// Largest tested `ρ` whose run decayed.
    pub largest_decaying_rho: Option<f64>,
}

/// Closed-loop runs over initial amplitudes, sharing one synthesis. A run
/// counts as decaying when its fitted rate is positive and it ends below
/// its starting Ξ-norm.
pub fn sweep(cfg: &SimConfig, rhos: &[f64]) -> Result<SweepSummary> {
    cfg.validate()?;
    if rhos.is_empty() || rhos.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::InvalidParameter("sweep needs positive rho values".into()));
    }
    let run = run_stages(cfg, Stage::Synth, None)?;
    let plant = run.plant.as_ref().expect("synth stage builds the plant");
    let act = run.actuator.as_ref().expect("synth stage builds the actuator");
    let sol = run.riccati.as_ref().expect("synth stage solves the Riccati equation");
    let feedback = Feedback::from_solution(sol, act);
    let entries: Vec<SweepEntry> = rhos
        .par_iter()
        .map(|&rho| {
            let outcome = random_initial(&run.basis, rho, cfg.seed)
                .and_then(|x0| simulate(plant, &run.stationary, Some(feedback), &x0, &cfg.sim.options()));
            match outcome {
                Ok(rec) => SweepEntry {
                    rho,
                    decayed: rec.fit.rate.is_some_and(|k| k > 0.0) && rec.final_xi() < rec.initial_xi(),
                    fitted_rate: rec.fit.rate,
                    final_xi: Some(rec.final_xi()),
                    error: None,
                },
                Err(e) => SweepEntry {
                    rho,
                    decayed: false,
                    fitted_rate: None,
                    final_xi: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let largest_decaying_rho = entries
        .iter()
        .filter(|e| e.decayed)
        .map(|e| e.rho)
        .fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r))));
    Ok(SweepSummary {
        entries,
        largest_decaying_rho,
    })
}

pub fn write_sweep(dir: &Path, s: &SweepSummary) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("sweep.json"), s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = SimConfig::default();
        let back = SimConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = SimConfig::from_json(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(cfg.basis.modes, 64);
        assert_eq!(cfg.sim.dt, 1e-3);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            r#"{"schema_version": 2}"#,
            r#"{"schema_version": 1, "basis": {"modes": 48}}"#,
            r#"{"schema_version": 1, "actuator": {"a": 0.5, "b": 1.5}}"#,
            r#"{"schema_version": 1, "params": {"nu": -1, "l0": 1, "gamma0": 1}}"#,
            r#"{"schema_version": 1, "sim": {"dt": 0}}"#,
            r#"{"schema_version": 1, "stationary": {"lagrange": 0.2}}"#,
            r#"{"schema_version": 1, "bogus": true}"#,
        ] {
            let err = SimConfig::from_json(text).unwrap_err();
            assert!(err.is_validation(), "{text}: {err}");
        }
    }

    #[test]
    fn stage_errors_keep_their_class() {
        let e: Result<()> = Err(Error::NoConvergence {
            iterations: 3,
            residual: 1.0,
        });
        let e = e.stage("stationary").unwrap_err();
        assert!(!e.is_validation());
        assert!(e.to_string().starts_with("stationary stage failed"));
    }

    #[test]
    fn matrix_csv_round_trips_exactly() {
        let dir = std::env::temp_dir().join(format!("pf-matrix-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -2.5e-300, 1.0 / 3.0, 7.0, f64::MIN_POSITIVE, -0.0]);
        let p = dir.join("m.csv");
        write_matrix_csv(&p, &m).unwrap();
        assert_eq!(read_matrix_csv(&p).unwrap(), m);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn report_marks_missing_riccati_rows() {
        let cfg = SimConfig {
            basis: BasisConfig { length: 1.0, modes: 16 },
            ..SimConfig::default()
        };
        let run = run_stages(&cfg, Stage::Spectrum, None).unwrap();
        let table = report_table(&run.summary);
        assert!(table.lines().any(|l| l.starts_with("riccati_residual_rel") && l.ends_with("absent")));
        assert!(table.lines().any(|l| l.starts_with("N_unstable") && l.ends_with('3')));
    }
}
