//! `phasefield` command-line driver.
//!
//! Exit codes: 0 success, 2 invalid input, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use phasefield_core::lqr::RiccatiMethod;
use phasefield_core::pipeline::{
    read_matrix_csv, report, run_pipeline, sweep, write_sweep, SimConfig, Stage, StationaryMode,
};
use phasefield_core::sim::Scheme;
use phasefield_core::stationary::ConstantBranch;
use phasefield_core::{Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "phasefield", version, about = "Riccati feedback stabilization of a conserved phase-field system")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the stationary state.
    Stationary(PipelineArgs),
    /// Linearize and report the spectrum of the linear operator.
    Spectrum(PipelineArgs),
    /// Build the actuator, check controllability and compute the null control.
    Controllability(PipelineArgs),
    /// Solve the Riccati equation and certify the closed loop.
    Synth(PipelineArgs),
    /// Run the (closed- or open-loop) simulation.
    Simulate {
        #[command(flatten)]
        args: PipelineArgs,
        /// Reuse a gain matrix written by `synth` (gain_K.csv) instead of
        /// solving the Riccati equation again.
        #[arg(long)]
        gain: Option<PathBuf>,
    },
    /// Summarize a finished run directory.
    Report {
        run_dir: PathBuf,
    },
    /// Closed-loop runs over several initial amplitudes.
    Sweep {
        #[command(flatten)]
        args: PipelineArgs,
        /// Comma-separated initial Ξ-norms.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1e-3, 1e-2, 1e-1, 0.3, 1.0])]
        rhos: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Newton,
    Integrate,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    ImexEuler,
    CnAb2,
}

#[derive(Clone, Copy, ValueEnum)]
enum StationaryArg {
    Constant,
    Minimize,
}

/// Config file plus field overrides.
#[derive(Args, Clone)]
struct PipelineArgs {
    /// JSON configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, short)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    l0: Option<f64>,
    #[arg(long)]
    gamma0: Option<f64>,
    #[arg(long)]
    length: Option<f64>,
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long, value_enum)]
    stationary: Option<StationaryArg>,
    /// Constant stationary state: -1, 0 or 1.
    #[arg(long, allow_hyphen_values = true)]
    which: Option<i32>,
    #[arg(long, allow_hyphen_values = true)]
    lagrange: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<f64>,
    /// Left end of the control patch.
    #[arg(long)]
    omega_a: Option<f64>,
    /// Right end of the control patch.
    #[arg(long)]
    omega_b: Option<f64>,
    #[arg(long)]
    t0: Option<f64>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    riccati_tol: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    /// Simulate without feedback.
    #[arg(long)]
    open_loop: bool,
    /// Drop the nonlinear remainder.
    #[arg(long)]
    linear: bool,
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    #[arg(long)]
    record_every: Option<usize>,
}

impl PipelineArgs {
    fn config(&self) -> Result<SimConfig> {
        let mut cfg = match &self.config {
            Some(path) => SimConfig::load(path)?,
            None => SimConfig::default(),
        };
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.nu {
            cfg.params.nu = v;
        }
        if let Some(v) = self.l0 {
            cfg.params.l0 = v;
        }
        if let Some(v) = self.gamma0 {
            cfg.params.gamma0 = v;
        }
        if let Some(v) = self.length {
            cfg.basis.length = v;
        }
        if let Some(v) = self.modes {
            cfg.basis.modes = v;
        }
        if let Some(v) = self.stationary {
            cfg.stationary.mode = match v {
                StationaryArg::Constant => StationaryMode::Constant,
                StationaryArg::Minimize => StationaryMode::Minimize,
            };
        }
        if let Some(v) = self.which {
            cfg.stationary.which = ConstantBranch::from_sign(v)?;
        }
        if let Some(v) = self.lagrange {
            cfg.stationary.lagrange = v;
        }
        if let Some(v) = self.theta {
            cfg.stationary.theta = v;
        }
        if let Some(v) = self.omega_a {
            cfg.actuator.a = v;
        }
        if let Some(v) = self.omega_b {
            cfg.actuator.b = v;
        }
        if let Some(v) = self.t0 {
            cfg.actuator.t0 = v;
        }
        if let Some(v) = self.method {
            cfg.riccati.method = match v {
                MethodArg::Newton => RiccatiMethod::Newton,
                MethodArg::Integrate => RiccatiMethod::Integrate,
            };
        }
        if let Some(v) = self.riccati_tol {
            cfg.riccati.tol = v;
        }
        if let Some(v) = self.dt {
            cfg.sim.dt = v;
        }
        if let Some(v) = self.t_end {
            cfg.sim.t_end = v;
        }
        if let Some(v) = self.rho {
            cfg.sim.rho = v;
        }
        if self.open_loop {
            cfg.sim.closed_loop = false;
        }
        if self.linear {
            cfg.sim.nonlinear = false;
        }
        if let Some(v) = self.scheme {
            cfg.sim.scheme = match v {
                SchemeArg::ImexEuler => Scheme::ImexEuler,
                SchemeArg::CnAb2 => Scheme::CnAb2,
            };
        }
        if let Some(v) = self.record_every {
            cfg.sim.record_every = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn stage(args: &PipelineArgs, last: Stage) -> Result<()> {
    let cfg = args.config()?;
    let run = run_pipeline(&cfg, last, None)?;
    let s = &run.summary;
    match last {
        Stage::Stationary => print_json(&s.stationary),
        Stage::Spectrum => print_json(&s.spectrum),
        Stage::Controllability => print_json(&s.controllability),
        Stage::Synth => print_json(&s.synth),
        Stage::Simulate => print_json(&s.simulation),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Stationary(a) => stage(&a, Stage::Stationary),
        Command::Spectrum(a) => stage(&a, Stage::Spectrum),
        Command::Controllability(a) => stage(&a, Stage::Controllability),
        Command::Synth(a) => stage(&a, Stage::Synth),
        Command::Simulate { args, gain } => {
            let cfg = args.config()?;
            let k = gain.as_deref().map(read_matrix_csv).transpose()?;
            let run = run_pipeline(&cfg, Stage::Simulate, k.as_ref())?;
            print_json(&run.summary.simulation)
        }
        Command::Report { run_dir } => {
            print!("{}", report(&run_dir)?);
            Ok(())
        }
        Command::Sweep { args, rhos } => {
            let cfg = args.config()?;
            let s = sweep(&cfg, &rhos)?;
            write_sweep(&cfg.output_dir, &s)?;
            print_json(&s)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        2
    } else {
        3
    }
}
