//! Closed-loop nonlinear simulation in the deviation variables
//! `y = φ − φ∞`, `z = σ − σ∞`:
//!
//! ```text
//! (y, z)' + 𝒜(y, z) = (G(y), 0) − BBᵀR(y, z),
//! G(y) = Δ(y³ + 3φ∞y² + g y).
//! ```
//!
//! `𝒜` is block diagonal in the cosine basis, so the implicit part of each
//! step is an exact 2×2 solve per mode. `G` and the feedback are explicit.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::actuator::Actuator;
use crate::error::{Error, Result};
use crate::linearization::{stack, unstack, LinearizedPlant, PhysicalParams};
use crate::lqr::RiccatiSolution;
use crate::spectral::{Padding, ScalarField, SpectralBasis};
use crate::stationary::StationaryState;

/// Deviation state at time `t`.
#[derive(Debug, Clone)]
pub struct StateYZ {
    pub y: ScalarField,
    pub z: ScalarField,
    pub t: f64,
}

impl StateYZ {
    pub fn zeros(basis: &Arc<SpectralBasis>) -> StateYZ {
        StateYZ {
            y: ScalarField::zeros(basis),
            z: ScalarField::zeros(basis),
            t: 0.0,
        }
    }

    pub fn from_stacked(basis: &Arc<SpectralBasis>, x: &DVector<f64>, t: f64) -> StateYZ {
        let (y, z) = unstack(basis, x);
        StateYZ { y, z, t }
    }

    pub fn stacked(&self) -> DVector<f64> {
        stack(&self.y, &self.z)
    }

    pub fn basis(&self) -> &Arc<SpectralBasis> {
        self.y.basis()
    }

    /// `‖A^{1/2}y‖ + ‖A^{1/4}z‖`.
    pub fn xi_norm(&self) -> f64 {
        xi_norm(&self.y, &self.z)
    }

    /// `(‖y‖² + ‖z‖²)^{1/2}`.
    pub fn h_norm(&self) -> f64 {
        (self.y.l2_norm().powi(2) + self.z.l2_norm().powi(2)).sqrt()
    }
}

pub fn xi_norm(y: &ScalarField, z: &ScalarField) -> f64 {
    y.norm_d_alpha(0.5) + z.norm_d_alpha(0.25)
}

/// Values of `f`, `f'` and `f''` on the cubic grid.
struct Jet {
    v: Vec<f64>,
    d: Vec<f64>,
    dd: Vec<f64>,
}

impl Jet {
    fn new(f: &ScalarField) -> Jet {
        Jet {
            v: f.values_on(Padding::Cubic),
            d: f.gradient_values_on(Padding::Cubic),
            dd: f.laplacian().values_on(Padding::Cubic),
        }
    }
}

fn check_bases(y: &ScalarField, s: &StationaryState, g: &ScalarField) -> Result<()> {
    if y.same_basis(&s.phi) && y.same_basis(g) {
        Ok(())
    } else {
        Err(Error::BasisMismatch)
    }
}

/// `G(y) = Δ P(y³ + 3φ∞y² + g y)`, with the product formed on the grid that
/// projects cubic terms exactly.
pub fn remainder_g_direct(y: &ScalarField, s: &StationaryState, g: &ScalarField) -> Result<ScalarField> {
    check_bases(y, s, g)?;
    let yv = y.values_on(Padding::Cubic);
    let pv = s.phi.values_on(Padding::Cubic);
    let gv = g.values_on(Padding::Cubic);
    Ok(direct_from_values(y.basis(), &yv, &pv, &gv))
}

fn direct_from_values(basis: &Arc<SpectralBasis>, yv: &[f64], pv: &[f64], gv: &[f64]) -> ScalarField {
    let values: Vec<f64> = yv
        .iter()
        .zip(pv)
        .zip(gv)
        .map(|((&y, &p), &g)| y * y * y + 3.0 * p * y * y + g * y)
        .collect();
    let coeffs = basis.grid(Padding::Cubic).analyze(&values);
    ScalarField::from_coeffs(basis, coeffs)
        .expect("grid analysis returns M coefficients")
        .laplacian()
}

/// The seven product-rule terms `I₁ … I₇` of `G(y)`, each projected on the
/// cubic grid.
pub fn remainder_g_terms(y: &ScalarField, s: &StationaryState, g: &ScalarField) -> Result<[ScalarField; 7]> {
    check_bases(y, s, g)?;
    let (yj, pj, gj) = (Jet::new(y), Jet::new(&s.phi), Jet::new(g));
    let basis = y.basis();
    let grid = basis.grid(Padding::Cubic);
    let term = |f: &dyn Fn(usize) -> f64| {
        let values: Vec<f64> = (0..grid.points()).map(f).collect();
        ScalarField::from_coeffs(basis, grid.analyze(&values)).expect("grid analysis returns M coefficients")
    };
    Ok([
        term(&|i| 3.0 * yj.v[i] * yj.v[i] * yj.dd[i]),
        term(&|i| 6.0 * yj.v[i] * yj.d[i] * yj.d[i]),
        term(&|i| 12.0 * yj.v[i] * yj.d[i] * pj.d[i]),
        term(&|i| 3.0 * yj.v[i] * yj.v[i] * pj.dd[i]),
        term(&|i| 6.0 * pj.v[i] * yj.v[i] * yj.dd[i]),
        term(&|i| 6.0 * pj.v[i] * yj.d[i] * yj.d[i]),
        term(&|i| gj.v[i] * yj.dd[i] + yj.v[i] * gj.dd[i] + 2.0 * yj.d[i] * gj.d[i]),
    ])
}

/// `Σ I_j(y)`, the expanded form of `G(y)`.
pub fn remainder_g_expanded(y: &ScalarField, s: &StationaryState, g: &ScalarField) -> Result<ScalarField> {
    let terms = remainder_g_terms(y, s, g)?;
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = &acc + t;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// First order: implicit `𝒜`, explicit `G` and feedback.
    ImexEuler,
    /// Second order: Crank–Nicolson on `𝒜`, Adams–Bashforth 2 on the rest.
    CnAb2,
}

/// Closed-loop feedback `W = −Kx`, forcing `BW`.
#[derive(Debug, Clone, Copy)]
pub struct Feedback<'a> {
    /// `K = BᵀR`, `N × 2M`.
    pub gain: &'a DMatrix<f64>,
    pub act: &'a Actuator,
}

impl<'a> Feedback<'a> {
    pub fn from_solution(sol: &'a RiccatiSolution, act: &'a Actuator) -> Feedback<'a> {
        Feedback { gain: &sol.k_gain, act }
    }

    pub fn amplitudes(&self, x: &DVector<f64>) -> DVector<f64> {
        -(self.gain * x)
    }
}

/// Reusable time stepper with cached grid data and block inverses.
pub struct Stepper<'a> {
    plant: &'a LinearizedPlant,
    feedback: Option<Feedback<'a>>,
    nonlinear: bool,
    scheme: Scheme,
    dt: f64,
    phi_nodes: Vec<f64>,
    g_nodes: Vec<f64>,
    // per-mode inverse of (I + θ dt block) and, for CN, the explicit (I − dt/2 block)
    implicit_inv: Vec<[[f64; 2]; 2]>,
    explicit: Vec<[[f64; 2]; 2]>,
    previous: Option<DVector<f64>>,
}

/// Largest step for which every `I + dt·block` stays invertible.
pub fn max_stable_dt(plant: &LinearizedPlant) -> f64 {
    let lowest = plant.eigenpairs.first().map_or(0.0, |p| p.value);
    if lowest < 0.0 {
        1.0 / -lowest
    } else {
        f64::INFINITY
    }
}

fn inverse_2x2(m: [[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    if det.abs() <= 1e-14 * scale * scale {
        return None;
    }
    Some([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

impl<'a> Stepper<'a> {
    pub fn new(
        plant: &'a LinearizedPlant,
        s: &StationaryState,
        feedback: Option<Feedback<'a>>,
        nonlinear: bool,
        scheme: Scheme,
        dt: f64,
    ) -> Result<Stepper<'a>> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let theta = match scheme {
            Scheme::ImexEuler => 1.0,
            Scheme::CnAb2 => 0.5,
        };
        let bound = max_stable_dt(plant) / theta;
        if dt >= bound {
            return Err(Error::InvalidParameter(format!(
                "dt = {dt} makes the implicit blocks singular (need dt < {bound:.4e})"
            )));
        }
        let mut implicit_inv = Vec::with_capacity(plant.modes());
        let mut explicit = Vec::with_capacity(plant.modes());
        for b in &plant.blocks {
            let m = [
                [1.0 + theta * dt * b[0][0], theta * dt * b[0][1]],
                [theta * dt * b[1][0], 1.0 + theta * dt * b[1][1]],
            ];
            let inv = inverse_2x2(m).ok_or_else(|| {
                Error::InvalidParameter(format!("implicit block is ill-conditioned at dt = {dt}"))
            })?;
            implicit_inv.push(inv);
            let e = 1.0 - theta;
            explicit.push([
                [1.0 - e * dt * b[0][0], -e * dt * b[0][1]],
                [-e * dt * b[1][0], 1.0 - e * dt * b[1][1]],
            ]);
        }
        if let Some(fb) = feedback {
            if fb.act.n_controls() != fb.gain.nrows() || fb.gain.ncols() != plant.dim() {
                return Err(Error::LengthMismatch {
                    expected: plant.dim(),
                    got: fb.gain.ncols(),
                });
            }
        }
        Ok(Stepper {
            plant,
            feedback,
            nonlinear,
            scheme,
            dt,
            phi_nodes: s.phi.values_on(Padding::Cubic),
            g_nodes: plant.g.values_on(Padding::Cubic),
            implicit_inv,
            explicit,
            previous: None,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Explicit right-hand side `(G(y), 0) − BKx` and the amplitudes `W`.
    pub fn explicit_rhs(&self, x: &DVector<f64>) -> (DVector<f64>, Option<DVector<f64>>) {
        let m = self.plant.modes();
        let mut rhs = DVector::zeros(2 * m);
        if self.nonlinear {
            let basis = &self.plant.basis;
            let y = ScalarField::from_coeffs(basis, x.as_slice()[..m].to_vec()).expect("length");
            let yv = y.values_on(Padding::Cubic);
            let gy = direct_from_values(basis, &yv, &self.phi_nodes, &self.g_nodes);
            rhs.as_mut_slice()[..m].copy_from_slice(gy.coeffs());
        }
        let w = self.feedback.map(|fb| {
            let w = fb.amplitudes(x);
            rhs += &fb.act.b_matrix * &w;
            w
        });
        (rhs, w)
    }

    /// Advances `x` by one step; returns the new state and the amplitudes
    /// used in this step.
    pub fn step(&mut self, x: &DVector<f64>) -> (DVector<f64>, Option<DVector<f64>>) {
        let m = self.plant.modes();
        let (rhs, w) = self.explicit_rhs(x);
        let dt = self.dt;
        let mut pre = DVector::zeros(2 * m);
        match (self.scheme, &self.previous) {
            (Scheme::CnAb2, Some(prev)) => {
                for k in 0..m {
                    let e = &self.explicit[k];
                    let (a, b) = (x[k], x[m + k]);
                    pre[k] = e[0][0] * a + e[0][1] * b + dt * (1.5 * rhs[k] - 0.5 * prev[k]);
                    pre[m + k] = e[1][0] * a + e[1][1] * b + dt * (1.5 * rhs[m + k] - 0.5 * prev[m + k]);
                }
            }
            (Scheme::CnAb2, None) => {
                // first step: CN with a forward-Euler explicit part
                for k in 0..m {
                    let e = &self.explicit[k];
                    let (a, b) = (x[k], x[m + k]);
                    pre[k] = e[0][0] * a + e[0][1] * b + dt * rhs[k];
                    pre[m + k] = e[1][0] * a + e[1][1] * b + dt * rhs[m + k];
                }
            }
            (Scheme::ImexEuler, _) => {
                pre = x + &rhs * dt;
            }
        }
        if self.scheme == Scheme::CnAb2 {
            self.previous = Some(rhs);
        }
        let mut out = DVector::zeros(2 * m);
        for (k, inv) in self.implicit_inv.iter().enumerate() {
            let (a, b) = (pre[k], pre[m + k]);
            out[k] = inv[0][0] * a + inv[0][1] * b;
            out[m + k] = inv[1][0] * a + inv[1][1] * b;
        }
        (out, w)
    }
}

/// One IMEX-Euler step of the (optionally controlled, optionally nonlinear)
/// system.
pub fn step_imex(
    state: &StateYZ,
    dt: f64,
    plant: &LinearizedPlant,
    s: &StationaryState,
    feedback: Option<Feedback<'_>>,
    nonlinear: bool,
) -> Result<StateYZ> {
    let mut stepper = Stepper::new(plant, s, feedback, nonlinear, Scheme::ImexEuler, dt)?;
    let (x, _) = stepper.step(&state.stacked());
    Ok(StateYZ::from_stacked(&plant.basis, &x, state.t + dt))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimOptions {
    pub dt: f64,
    pub t_end: f64,
    pub nonlinear: bool,
    pub scheme: Scheme,
    /// Record every this many steps.
    pub record_every: usize,
    /// Fit window; defaults to `[t_end/2, t_end]`.
    pub fit_window: Option<(f64, f64)>,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            dt: 1e-3,
            t_end: 20.0,
            nonlinear: true,
            scheme: Scheme::ImexEuler,
            record_every: 10,
            fit_window: None,
        }
    }
}

/// Least-squares fit of `log v = c − k t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// `k`; `None` when the fit is rejected.
    pub rate: Option<f64>,
    pub slope_estimate: f64,
    pub r2: f64,
    pub samples: usize,
    pub window: (f64, f64),
}

/// Smallest admissible sample in a decay fit.
pub const FIT_FLOOR: f64 = 1e-14;
pub const FIT_MIN_SAMPLES: usize = 20;
pub const FIT_MIN_R2: f64 = 0.99;

pub fn fit_decay(times: &[f64], values: &[f64], window: (f64, f64)) -> DecayFit {
    let eps = 1e-9 * window.1.abs().max(1.0);
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= window.0 - eps && **t <= window.1 + eps)
        .map(|(t, v)| (*t, *v))
        .collect();
    let n = pts.len();
    let underflow = pts.iter().any(|(_, v)| !(*v >= FIT_FLOOR));
    if n < 2 || underflow {
        return DecayFit {
            rate: None,
            slope_estimate: f64::NAN,
            r2: f64::NAN,
            samples: n,
            window,
        };
    }
    let nf = n as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let lm = pts.iter().map(|p| p.1.ln()).sum::<f64>() / nf;
    let (mut stt, mut stl, mut sll) = (0.0, 0.0, 0.0);
    for &(t, v) in &pts {
        let (dt, dl) = (t - tm, v.ln() - lm);
        stt += dt * dt;
        stl += dt * dl;
        sll += dl * dl;
    }
    let slope = stl / stt;
    let r2 = if sll == 0.0 { 1.0 } else { stl * stl / (stt * sll) };
    let accepted = n >= FIT_MIN_SAMPLES && r2 >= FIT_MIN_R2;
    DecayFit {
        rate: accepted.then_some(-slope),
        slope_estimate: -slope,
        r2,
        samples: n,
        window,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub xi_norms: Vec<f64>,
    pub h_norms: Vec<f64>,
    pub thm11_norms: Vec<f64>,
    /// `W(t)` per recorded sample; empty rows for open-loop runs.
    pub control_amplitudes: Vec<Vec<f64>>,
    pub means: Vec<(f64, f64)>,
    pub fit: DecayFit,
    pub thm11_fit: DecayFit,
    pub final_state: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn fitted_rate(&self) -> Option<f64> {
        self.fit.rate
    }

    pub fn initial_xi(&self) -> f64 {
        self.xi_norms.first().copied().unwrap_or(0.0)
    }

    pub fn final_xi(&self) -> f64 {
        self.xi_norms.last().copied().unwrap_or(0.0)
    }
}

/// Blow-up threshold relative to the initial Ξ-norm.
pub const BLOW_UP_FACTOR: f64 = 1e6;

/// Integrates from `initial` to `opts.t_end`.
pub fn simulate(
    plant: &LinearizedPlant,
    s: &StationaryState,
    feedback: Option<Feedback<'_>>,
    initial: &StateYZ,
    opts: &SimOptions,
) -> Result<TrajectoryRecord> {
    if !(opts.t_end > 0.0) || opts.record_every == 0 {
        return Err(Error::InvalidParameter("t_end must be positive and record_every nonzero".into()));
    }
    let mut stepper = Stepper::new(plant, s, feedback, opts.nonlinear, opts.scheme, opts.dt)?;
    let steps = (opts.t_end / opts.dt).round() as usize;
    let basis = &plant.basis;
    let n_controls = feedback.map_or(0, |fb| fb.act.n_controls());

    let mut x = initial.stacked();
    let xi0 = initial.xi_norm();
    let limit = BLOW_UP_FACTOR * xi0.max(f64::MIN_POSITIVE);
    let mut rec = TrajectoryRecord {
        times: Vec::new(),
        xi_norms: Vec::new(),
        h_norms: Vec::new(),
        thm11_norms: Vec::new(),
        control_amplitudes: Vec::new(),
        means: Vec::new(),
        fit: fit_decay(&[], &[], (0.0, 0.0)),
        thm11_fit: fit_decay(&[], &[], (0.0, 0.0)),
        final_state: Vec::new(),
    };
    let record = |rec: &mut TrajectoryRecord, x: &DVector<f64>, t: f64, w: DVector<f64>| {
        let state = StateYZ::from_stacked(basis, x, t);
        rec.times.push(t);
        rec.xi_norms.push(state.xi_norm());
        rec.h_norms.push(state.h_norm());
        rec.thm11_norms.push(theorem11_norm(&state, s, &plant.params));
        rec.control_amplitudes.push(w.iter().copied().collect());
        rec.means.push((state.y.mean(), state.z.mean()));
    };
    let amplitudes = |x: &DVector<f64>| {
        feedback.map_or_else(|| DVector::zeros(0), |fb| fb.amplitudes(x))
    };
    record(&mut rec, &x, initial.t, amplitudes(&x));

    for n in 1..=steps {
        let (next, _) = stepper.step(&x);
        x = next;
        let t = initial.t + n as f64 * opts.dt;
        if n % opts.record_every == 0 || n == steps {
            record(&mut rec, &x, t, amplitudes(&x));
            let xi = *rec.xi_norms.last().expect("just recorded");
            if !(xi <= limit) {
                return Err(Error::BlowUp { t, norm: xi, limit });
            }
        }
    }
    debug_assert!(rec.control_amplitudes.iter().all(|w| w.len() == n_controls));

    let t_end = initial.t + opts.t_end;
    let window = opts.fit_window.unwrap_or((initial.t + 0.5 * opts.t_end, t_end));
    rec.fit = fit_decay(&rec.times, &rec.xi_norms, window);
    rec.thm11_fit = fit_decay(&rec.times, &rec.thm11_norms, window);
    rec.final_state = x.iter().copied().collect();
    Ok(rec)
}

/// `φ = y + φ∞`, `σ = z + σ∞`, `θ = σ/α₀ − l₀φ`.
pub fn to_physical(state: &StateYZ, s: &StationaryState, p: &PhysicalParams) -> (ScalarField, ScalarField) {
    let alpha0 = p.alpha0();
    let phi = &state.y + &s.phi;
    let sigma = &state.z + &s.sigma(alpha0, p.l0);
    let theta = &sigma.scale(1.0 / alpha0) - &phi.scale(p.l0);
    (phi, theta)
}

/// Inverse of [`to_physical`].
pub fn from_physical(
    phi: &ScalarField,
    theta: &ScalarField,
    s: &StationaryState,
    p: &PhysicalParams,
    t: f64,
) -> StateYZ {
    let alpha0 = p.alpha0();
    let y = phi - &s.phi;
    let sigma = &(theta + &phi.scale(p.l0)) * alpha0;
    let z = &sigma - &s.sigma(alpha0, p.l0);
    StateYZ { y, z, t }
}

/// `‖φ − φ∞‖_{D(A^{1/2})} + ‖α₀(θ − θ∞) + α₀l₀(φ − φ∞)‖_{D(A^{1/4})}`,
/// evaluated from the physical fields.
pub fn theorem11_norm(state: &StateYZ, s: &StationaryState, p: &PhysicalParams) -> f64 {
    let (phi, theta) = to_physical(state, s, p);
    let alpha0 = p.alpha0();
    let dphi = &phi - &s.phi;
    let theta_inf = ScalarField::constant(phi.basis(), s.theta);
    let dtheta = &theta - &theta_inf;
    let mixed = &dtheta.scale(alpha0) + &dphi.scale(alpha0 * p.l0);
    dphi.norm_d_alpha(0.5) + mixed.norm_d_alpha(0.25)
}

/// Seeded Gaussian modal coefficients with `μ_k^{-2}` decay, rescaled so
/// that the Ξ-norm equals `rho`.
pub fn random_initial(basis: &Arc<SpectralBasis>, rho: f64, seed: u64) -> Result<StateYZ> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidParameter(format!("rho must be positive, got {rho}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> Vec<f64> {
        basis
            .mu()
            .iter()
            .map(|m| {
                let n: f64 = StandardNormal.sample(&mut rng);
                n / (m * m)
            })
            .collect()
    };
    let y = ScalarField::from_coeffs(basis, draw())?;
    let z = ScalarField::from_coeffs(basis, draw())?;
    let xi = xi_norm(&y, &z);
    let scale = rho / xi;
    Ok(StateYZ {
        y: y.scale(scale),
        z: z.scale(scale),
        t: 0.0,
    })
}
