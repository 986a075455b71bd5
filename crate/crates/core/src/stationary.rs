//! Stationary states of the uncontrolled system.
//!
//! `θ∞` is an arbitrary constant and `φ∞` solves `νΔφ − φ³ + φ = C` with
//! Neumann conditions, i.e. it is a critical point of
//! `Υ(φ) = ∫ ν|∇φ|²/2 + (φ² − 1)²/4 + Cφ`.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{pointwise_product, Padding, ScalarField, SpectralBasis};

#[derive(Debug, Clone)]
pub struct StationaryState {
    pub phi: ScalarField,
    pub theta: f64,
    /// Integration constant `C` of the stationary equation.
    pub lagrange: f64,
    pub nu: f64,
    /// `‖νΔφ − φ³ + φ − C‖_{L²}`.
    pub residual: f64,
    pub upsilon: f64,
}

impl StationaryState {
    /// Wraps an arbitrary field as a (not necessarily exact) stationary state,
    /// recording its residual. Useful for probing the linearization around
    /// prescribed profiles.
    pub fn from_field(phi: ScalarField, theta: f64, nu: f64, lagrange: f64) -> StationaryState {
        let residual = residual_field(&phi, nu, lagrange).l2_norm();
        let upsilon = upsilon(&phi, nu, lagrange);
        StationaryState {
            phi,
            theta,
            lagrange,
            nu,
            residual,
            upsilon,
        }
    }

    pub fn basis(&self) -> &Arc<SpectralBasis> {
        self.phi.basis()
    }

    pub fn is_constant(&self) -> bool {
        self.phi.coeffs()[1..].iter().all(|c| *c == 0.0)
    }

    /// `σ∞ = α₀(θ∞ + l₀φ∞)`.
    pub fn sigma(&self, alpha0: f64, l0: f64) -> ScalarField {
        let mut s = self.phi.scale(alpha0 * l0);
        s.coeffs_mut()[0] += alpha0 * self.theta * self.basis().length().sqrt();
        s
    }
}

/// Which root of `φ³ − φ = 0` to use as a constant stationary state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstantBranch {
    #[serde(rename = "-1")]
    Minus,
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "+1")]
    Plus,
}

impl ConstantBranch {
    pub fn value(self) -> f64 {
        match self {
            ConstantBranch::Minus => -1.0,
            ConstantBranch::Zero => 0.0,
            ConstantBranch::Plus => 1.0,
        }
    }

    pub fn from_sign(which: i32) -> Result<ConstantBranch> {
        match which {
            -1 => Ok(ConstantBranch::Minus),
            0 => Ok(ConstantBranch::Zero),
            1 => Ok(ConstantBranch::Plus),
            other => Err(Error::InvalidParameter(format!(
                "constant stationary state must be -1, 0 or +1, got {other}"
            ))),
        }
    }
}

/// One of the three constant stationary states for `C = 0`.
pub fn stationary_constant(
    basis: &Arc<SpectralBasis>,
    which: ConstantBranch,
    theta: f64,
    nu: f64,
) -> StationaryState {
    let phi = ScalarField::constant(basis, which.value());
    let upsilon = upsilon(&phi, nu, 0.0);
    StationaryState {
        phi,
        theta,
        lagrange: 0.0,
        nu,
        residual: 0.0,
        upsilon,
    }
}

/// `νΔφ − φ³ + φ − C` as a field.
pub fn residual_field(phi: &ScalarField, nu: f64, lagrange: f64) -> ScalarField {
    let cube = pointwise_product(&[phi, phi, phi], true).expect("shared basis");
    let mut r = &(&phi.laplacian().scale(nu) - &cube) + phi;
    r.coeffs_mut()[0] -= lagrange * phi.basis().length().sqrt();
    r
}

/// The Lyapunov functional `Υ`.
pub fn upsilon(phi: &ScalarField, nu: f64, lagrange: f64) -> f64 {
    let basis = phi.basis();
    let gradient: f64 = phi
        .coeffs()
        .iter()
        .zip(basis.kappa())
        .map(|(c, k)| k * c * c)
        .sum();
    let grid = basis.grid(Padding::Cubic);
    let well: Vec<f64> = phi
        .values_on(Padding::Cubic)
        .into_iter()
        .map(|v| {
            let w = v * v - 1.0;
            0.25 * w * w
        })
        .collect();
    0.5 * nu * gradient + grid.integrate(&well) + lagrange * phi.mean() * basis.length()
}

#[derive(Debug, Clone, Copy)]
pub struct MinimizeOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Initial pseudo-time step of the gradient flow.
    pub step: f64,
    /// Newton iterations applied after the flow has converged.
    pub polish_iters: usize,
    pub polish_tol: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            tol: 1e-8,
            max_iters: 20_000,
            step: 1.0,
            polish_iters: 3,
            polish_tol: 1e-12,
        }
    }
}

/// Relative slack for comparing `Υ` values; evaluating `Υ` itself rounds
/// at this level.
pub const UPSILON_SLACK: f64 = 1e-15;

/// History of an accepted gradient-flow run.
#[derive(Debug, Clone, Default)]
pub struct FlowLog {
    pub upsilon: Vec<f64>,
    pub residual: Vec<f64>,
    pub rejected_steps: usize,
}

impl FlowLog {
    /// `Υ` non-increasing along the accepted steps, up to [`UPSILON_SLACK`].
    pub fn is_monotone(&self) -> bool {
        self.upsilon
            .windows(2)
            .all(|w| w[1] <= w[0] + UPSILON_SLACK * w[0].abs().max(1.0))
    }
}

/// Semi-implicit `L²` gradient flow of `Υ`, started from `init`.
///
/// Each step solves `(1 + τ(νκ_k + 1)) φ̂ⁿ⁺¹ = φ̂ⁿ − τ P(φ³ − 2φ + C)ⁿ`, i.e.
/// the linear part `−νΔ + I` is implicit and the remaining cubic explicit.
/// A step that would increase `Υ` is retried with half the step size, so
/// the accepted sequence is non-increasing.
pub fn stationary_minimize(
    nu: f64,
    lagrange: f64,
    init: &ScalarField,
    theta: f64,
    opts: &MinimizeOptions,
) -> Result<(StationaryState, FlowLog)> {
    if !(nu > 0.0) {
        return Err(Error::InvalidParameter(format!("nu must be positive, got {nu}")));
    }
    let basis = Arc::clone(init.basis());
    let sqrt_l = basis.length().sqrt();
    let mut phi = init.clone();
    let mut energy = upsilon(&phi, nu, lagrange);
    let mut residual = residual_field(&phi, nu, lagrange).l2_norm();
    let mut log = FlowLog {
        upsilon: vec![energy],
        residual: vec![residual],
        rejected_steps: 0,
    };
    let mut tau = opts.step;
    let mut iters = 0;
    while residual > opts.tol {
        if iters >= opts.max_iters {
            return Err(Error::NoConvergence {
                iterations: iters,
                residual,
            });
        }
        iters += 1;
        let cube = pointwise_product(&[&phi, &phi, &phi], true)?;
        let candidate = loop {
            let mut next = phi.clone();
            for (k, c) in next.coeffs_mut().iter_mut().enumerate() {
                let mut explicit = cube.coeffs()[k] - 2.0 * phi.coeffs()[k];
                if k == 0 {
                    explicit += lagrange * sqrt_l;
                }
                *c = (*c - tau * explicit) / (1.0 + tau * (nu * basis.kappa()[k] + 1.0));
            }
            let e = upsilon(&next, nu, lagrange);
            if e <= energy + UPSILON_SLACK * energy.abs().max(1.0) {
                break (next, e);
            }
            log.rejected_steps += 1;
            tau *= 0.5;
            if tau < 1e-12 {
                return Err(Error::NoConvergence {
                    iterations: iters,
                    residual,
                });
            }
        };
        phi = candidate.0;
        energy = candidate.1;
        residual = residual_field(&phi, nu, lagrange).l2_norm();
        log.upsilon.push(energy);
        log.residual.push(residual);
        tau = (tau * 1.25).min(opts.step);
    }

    for _ in 0..opts.polish_iters {
        if residual <= opts.polish_tol {
            break;
        }
        match newton_step(&phi, nu, lagrange) {
            Some(next) => {
                let r = residual_field(&next, nu, lagrange).l2_norm();
                if r < residual {
                    phi = next;
                    residual = r;
                } else {
                    break;
                }
            }
            None => break,
        }
    }

    let upsilon = upsilon(&phi, nu, lagrange);
    Ok((
        StationaryState {
            phi,
            theta,
            lagrange,
            nu,
            residual,
            upsilon,
        },
        log,
    ))
}

fn newton_step(phi: &ScalarField, nu: f64, lagrange: f64) -> Option<ScalarField> {
    let basis = phi.basis();
    let grid = basis.grid(Padding::Cubic);
    let slope: Vec<f64> = phi
        .values_on(Padding::Cubic)
        .into_iter()
        .map(|v| 3.0 * v * v - 1.0)
        .collect();
    let mut jac = -grid.multiplication_matrix(&slope);
    for (k, kappa) in basis.kappa().iter().enumerate() {
        jac[(k, k)] -= nu * kappa;
    }
    let r = residual_field(phi, nu, lagrange);
    let rhs = -DVector::from_column_slice(r.coeffs());
    let delta = jac.lu().solve(&rhs)?;
    if delta.iter().any(|d| !d.is_finite()) {
        return None;
    }
    let mut next = phi.clone();
    for (c, d) in next.coeffs_mut().iter_mut().zip(delta.iter()) {
        *c += d;
    }
    Some(next)
}

/// Samples used for sup-norms: `16M + 1` equispaced points including both
/// endpoints and the midpoint.
fn sup_samples(basis: &SpectralBasis) -> impl Iterator<Item = f64> + '_ {
    let n = 16 * basis.modes();
    (0..=n).map(move |i| basis.length() * i as f64 / n as f64)
}

fn sup_norm(basis: &SpectralBasis, f: impl Fn(f64) -> f64) -> f64 {
    sup_samples(basis).fold(0.0, |m, x| m.max(f(x).abs()))
}

/// `(‖φ∞‖∞, ‖∇φ∞‖∞, ‖Δφ∞‖∞)`.
pub fn sup_norms(phi: &ScalarField) -> (f64, f64, f64) {
    let basis = phi.basis();
    let lap = phi.laplacian();
    (
        sup_norm(basis, |x| phi.eval(x)),
        sup_norm(basis, |x| phi.eval_derivative(x)),
        sup_norm(basis, |x| lap.eval(x)),
    )
}

/// `χ∞ = ‖∇φ∞‖∞ + ‖Δφ∞‖∞`.
pub fn chi_infinity(s: &StationaryState) -> f64 {
    let (_, grad, lap) = sup_norms(&s.phi);
    grad + lap
}

/// `ḡ∞ = ‖φ∞‖∞‖∇φ∞‖∞ + ‖φ∞‖∞‖Δφ∞‖∞ + ‖∇φ∞‖∞²`.
pub fn gbar_infinity(s: &StationaryState) -> f64 {
    let (val, grad, lap) = sup_norms(&s.phi);
    val * grad + val * lap + grad * grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn basis() -> Arc<SpectralBasis> {
        SpectralBasis::new(1.0, 32).unwrap()
    }

    #[test]
    fn constant_states() {
        let b = basis();
        let zero = stationary_constant(&b, ConstantBranch::Zero, 0.0, 0.1);
        assert_eq!(zero.phi.coeffs().iter().map(|c| c.abs()).sum::<f64>(), 0.0);
        assert_eq!(zero.residual, 0.0);
        let plus = stationary_constant(&b, ConstantBranch::Plus, 0.0, 0.1);
        assert!((plus.phi.mean() - 1.0).abs() < 1e-15);
        assert_eq!(plus.lagrange, 0.0);
        let minus = stationary_constant(&b, ConstantBranch::Minus, 0.3, 0.1);
        assert!((minus.phi.mean() + 1.0).abs() < 1e-15);
        assert_eq!(minus.theta, 0.3);
        for s in [&zero, &plus, &minus] {
            assert!(residual_field(&s.phi, 0.1, 0.0).l2_norm() < 1e-14);
        }
    }

    #[test]
    fn branch_from_sign() {
        assert_eq!(ConstantBranch::from_sign(-1).unwrap(), ConstantBranch::Minus);
        assert!(ConstantBranch::from_sign(2).is_err());
    }

    #[test]
    fn flow_reaches_nearest_well() {
        let b = basis();
        let init = ScalarField::constant(&b, 0.9);
        let (s, log) = stationary_minimize(0.1, 0.0, &init, 0.0, &MinimizeOptions::default()).unwrap();
        assert!(s.residual <= 1e-8);
        assert!((s.phi.mean() - 1.0).abs() < 1e-9);
        assert!(log.upsilon.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let b = basis();
        let (s, log) =
            stationary_minimize(0.1, 0.0, &ScalarField::zeros(&b), 0.0, &MinimizeOptions::default()).unwrap();
        assert_eq!(s.residual, 0.0);
        assert_eq!(log.upsilon.len(), 1);
        assert!(s.phi.coeffs().iter().all(|c| *c == 0.0));
    }

    #[test]
    fn large_nu_gives_a_constant() {
        let b = basis();
        let init = ScalarField::from_fn(&b, |x| 0.1 * (PI * x).cos());
        let (s, log) = stationary_minimize(1.0, 0.0, &init, 0.0, &MinimizeOptions::default()).unwrap();
        assert!(s.residual <= 1e-8);
        let (_, grad, _) = sup_norms(&s.phi);
        assert!(grad <= 1e-6, "grad = {grad}");
        assert!(log.upsilon.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn non_convergence_is_reported() {
        let b = basis();
        let init = ScalarField::constant(&b, 0.5);
        let opts = MinimizeOptions {
            max_iters: 2,
            ..MinimizeOptions::default()
        };
        match stationary_minimize(0.1, 0.0, &init, 0.0, &opts) {
            Err(Error::NoConvergence { iterations, residual }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn chi_and_gbar_of_cosine() {
        let b = basis();
        let eps = 0.01;
        let s = StationaryState::from_field(ScalarField::from_fn(&b, |x| eps * (PI * x).cos()), 0.0, 0.1, 0.0);
        assert!((chi_infinity(&s) - eps * (PI + PI * PI)).abs() < 1e-6);
        let double = StationaryState::from_field(s.phi.scale(2.0), 0.0, 0.1, 0.0);
        assert!((chi_infinity(&double) - 2.0 * chi_infinity(&s)).abs() < 1e-12);

        let unit = StationaryState::from_field(ScalarField::from_fn(&b, |x| (PI * x).cos()), 0.0, 0.1, 0.0);
        assert!((gbar_infinity(&unit) - (PI + 2.0 * PI * PI)).abs() < 1e-6);
        let scaled = StationaryState::from_field(unit.phi.scale(3.0), 0.0, 0.1, 0.0);
        assert!((gbar_infinity(&scaled) - 9.0 * gbar_infinity(&unit)).abs() < 1e-10 * gbar_infinity(&scaled));

        let c = stationary_constant(&b, ConstantBranch::Plus, 0.0, 0.1);
        assert_eq!(chi_infinity(&c), 0.0);
        assert_eq!(gbar_infinity(&c), 0.0);
    }
}
