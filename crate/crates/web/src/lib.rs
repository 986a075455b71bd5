//! Browser bindings. Each export takes plain numbers and returns a JSON
//! string, so the page needs nothing beyond `JSON.parse`.
//!
//! The `*_report` functions hold the logic and run natively; the
//! `#[wasm_bindgen]` wrappers only convert errors to `JsValue`.

use phasefield_core::actuator::{Actuator, Interval};
use phasefield_core::linearization::{assemble_plant, PhysicalParams};
use phasefield_core::lqr::{closed_loop_spectrum, solve_care, RiccatiOptions};
use phasefield_core::sim::{random_initial, simulate, Feedback, SimOptions};
use phasefield_core::spectral::{ScalarField, SpectralBasis};
use phasefield_core::stationary::{stationary_constant, stationary_minimize, ConstantBranch, MinimizeOptions};
use phasefield_core::Result;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest basis the page may request; keeps a click under a second.
pub const MAX_MODES: usize = 128;

fn basis(modes: usize) -> Result<std::sync::Arc<SpectralBasis>> {
    if modes > MAX_MODES {
        return Err(phasefield_core::Error::InvalidParameter(format!(
            "at most {MAX_MODES} modes in the browser"
        )));
    }
    SpectralBasis::new(1.0, modes)
}

#[derive(Debug, Serialize)]
pub struct SpectrumReport {
    pub n_unstable: usize,
    pub f_l: f64,
    /// `(mode, eigenvalue)` for the lowest eigenvalues.
    pub lowest: Vec<(usize, f64)>,
    pub gap: Option<f64>,
}

/// Spectrum of the linearization around `φ∞ ≡ 0` on `(0, 1)`.
pub fn spectrum_report(nu: f64, l0: f64, gamma0: f64, modes: usize) -> Result<SpectrumReport> {
    let params = PhysicalParams::new(nu, l0, gamma0)?;
    let b = basis(modes)?;
    let s = stationary_constant(&b, ConstantBranch::Zero, 0.0, nu);
    let plant = assemble_plant(params, &s, &b)?;
    Ok(SpectrumReport {
        n_unstable: plant.n_unstable,
        f_l: plant.f_l,
        lowest: plant.eigenpairs.iter().take(12).map(|p| (p.mode, p.value)).collect(),
        gap: plant.stable_gap(),
    })
}

#[derive(Debug, Serialize)]
pub struct ProfileReport {
    pub x: Vec<f64>,
    pub phi: Vec<f64>,
    pub residual: f64,
    pub upsilon: f64,
}

/// Stationary profile reached by the gradient flow from
/// `mean + amplitude·cos(πx)`.
pub fn stationary_report(nu: f64, lagrange: f64, mean: f64, amplitude: f64, modes: usize) -> Result<ProfileReport> {
    let b = basis(modes)?;
    let init = ScalarField::from_fn(&b, |x| mean + amplitude * (std::f64::consts::PI * x).cos());
    let (s, _) = stationary_minimize(nu, lagrange, &init, 0.0, &MinimizeOptions::default())?;
    let x: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
    let phi = x.iter().map(|&x| s.phi.eval(x)).collect();
    Ok(ProfileReport {
        x,
        phi,
        residual: s.residual,
        upsilon: s.upsilon,
    })
}

#[derive(Debug, Serialize)]
pub struct DecayReport {
    pub margin: f64,
    pub t: Vec<f64>,
    pub xi: Vec<f64>,
    pub fitted_rate: Option<f64>,
}

/// Closed-loop nonlinear run around `φ∞ ≡ 0` with the patch `(a, b)`.
pub fn decay_report(nu: f64, a: f64, b: f64, rho: f64, t_end: f64, modes: usize, seed: u64) -> Result<DecayReport> {
    let params = PhysicalParams::new(nu, 1.0, 1.0)?;
    let basis = basis(modes)?;
    let s = stationary_constant(&basis, ConstantBranch::Zero, 0.0, nu);
    let plant = assemble_plant(params, &s, &basis)?;
    let act = Actuator::new(Interval::new(a, b), &plant)?;
    let sol = solve_care(&plant, &act, &RiccatiOptions::default())?;
    let margin = closed_loop_spectrum(&sol, &plant, &act).margin;
    let init = random_initial(&basis, rho, seed)?;
    let opts = SimOptions {
        t_end,
        record_every: ((t_end / 1e-3) as usize / 400).max(1),
        ..SimOptions::default()
    };
    let rec = simulate(&plant, &s, Some(Feedback::from_solution(&sol, &act)), &init, &opts)?;
    Ok(DecayReport {
        margin,
        t: rec.times,
        xi: rec.xi_norms,
        fitted_rate: rec.fit.rate,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
        .and_then(|v| serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string())))
}

#[wasm_bindgen]
pub fn spectrum(nu: f64, l0: f64, gamma0: f64, modes: usize) -> std::result::Result<String, JsValue> {
    to_js(spectrum_report(nu, l0, gamma0, modes))
}

#[wasm_bindgen]
pub fn stationary_profile(
    nu: f64,
    lagrange: f64,
    mean: f64,
    amplitude: f64,
    modes: usize,
) -> std::result::Result<String, JsValue> {
    to_js(stationary_report(nu, lagrange, mean, amplitude, modes))
}

#[wasm_bindgen]
pub fn closed_loop_decay(
    nu: f64,
    a: f64,
    b: f64,
    rho: f64,
    t_end: f64,
    modes: usize,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    to_js(decay_report(nu, a, b, rho, t_end, modes, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectrum_counts_default_unstable_modes() {
        let r = spectrum_report(0.1, 1.0, 1.0, 32).unwrap();
        assert_eq!(r.n_unstable, 3);
        assert!(r.lowest[0].1 < 0.0);
    }

    #[test]
    fn oversized_basis_is_rejected() {
        assert!(spectrum_report(0.1, 1.0, 1.0, 4096).is_err());
    }
}
