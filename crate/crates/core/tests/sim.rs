use std::sync::Arc;

use nalgebra::DVector;
use phasefield_core::actuator::{Actuator, Interval};
use phasefield_core::linearization::{assemble_plant, LinearizedPlant, PhysicalParams};
use phasefield_core::lqr::{solve_care, RiccatiOptions, RiccatiSolution};
use phasefield_core::sim::{
    from_physical, random_initial, remainder_g_direct, remainder_g_expanded, simulate, theorem11_norm, to_physical,
    xi_norm, Feedback, Scheme, SimOptions, StateYZ,
};
use phasefield_core::spectral::{ScalarField, SpectralBasis};
use phasefield_core::stationary::{
    stationary_constant, stationary_minimize, ConstantBranch, MinimizeOptions, StationaryState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Setup {
    basis: Arc<SpectralBasis>,
    s: StationaryState,
    plant: LinearizedPlant,
    act: Actuator,
    sol: RiccatiSolution,
}

fn setup() -> Setup {
    let basis = SpectralBasis::new(1.0, 64).unwrap();
    let params = PhysicalParams::default();
    let s = stationary_constant(&basis, ConstantBranch::Zero, 0.0, params.nu);
    let plant = assemble_plant(params, &s, &basis).unwrap();
    let act = Actuator::new(Interval::default(), &plant).unwrap();
    let sol = solve_care(&plant, &act, &RiccatiOptions::default()).unwrap();
    Setup { basis, s, plant, act, sol }
}

fn kink(basis: &Arc<SpectralBasis>) -> StationaryState {
    let init = ScalarField::from_fn(basis, |x| 0.1 * (std::f64::consts::PI * x).cos());
    let (s, _) = stationary_minimize(0.02, 0.0, &init, 0.0, &MinimizeOptions::default()).unwrap();
    assert!(s.phi.coeffs()[1..].iter().any(|c| c.abs() > 1e-3), "profile should be nonconstant");
    s
}

fn smooth_random(basis: &Arc<SpectralBasis>, rng: &mut ChaCha8Rng, amp: f64) -> ScalarField {
    let coeffs = (0..basis.modes())
        .map(|k| amp * rng.random_range(-1.0..1.0) / (1.0 + k as f64).powi(3))
        .collect();
    ScalarField::from_coeffs(basis, coeffs).unwrap()
}

fn assert_g_forms_agree(s: &StationaryState, seed: u64) {
    let basis = s.basis().clone();
    let g = phasefield_core::linearization::g_field(&s.phi);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..100 {
        let y = smooth_random(&basis, &mut rng, 0.5);
        let d = remainder_g_direct(&y, s, &g).unwrap();
        let e = remainder_g_expanded(&y, s, &g).unwrap();
        let rel = (&d - &e).l2_norm() / d.l2_norm();
        assert!(rel <= 1e-8, "sample {i}: relative gap {rel:e}");
    }
}

#[test]
fn remainder_forms_agree_for_constant_states() {
    let basis = SpectralBasis::new(1.0, 64).unwrap();
    for branch in [ConstantBranch::Zero, ConstantBranch::Plus, ConstantBranch::Minus] {
        assert_g_forms_agree(&stationary_constant(&basis, branch, 0.0, 0.1), 1);
    }
}

#[test]
fn remainder_forms_agree_for_a_nonconstant_state() {
    let basis = SpectralBasis::new(1.0, 64).unwrap();
    assert_g_forms_agree(&kink(&basis), 2);
}

#[test]
fn remainder_is_quadratic_near_a_pure_phase() {
    let basis = SpectralBasis::new(1.0, 64).unwrap();
    let s = stationary_constant(&basis, ConstantBranch::Plus, 0.0, 0.1);
    let g = phasefield_core::linearization::g_field(&s.phi);
    let norm = |eps: f64| {
        let y = ScalarField::mode(&basis, 1).scale(eps);
        remainder_g_direct(&y, &s, &g).unwrap().l2_norm()
    };
    let ratio = norm(1e-2) / norm(1e-3);
    assert!((ratio - 100.0).abs() <= 5.0, "ratio {ratio}");
}

#[test]
fn uncontrolled_runs_conserve_means() {
    let t = setup();
    let init = random_initial(&t.basis, 1e-1, 7).unwrap();
    let opts = SimOptions {
        t_end: 1.0,
        record_every: 50,
        ..SimOptions::default()
    };
    let rec = simulate(&t.plant, &t.s, None, &init, &opts).unwrap();
    assert_eq!(rec.times.len(), 21);
    let (y0, z0) = rec.means[0];
    for &(y, z) in &rec.means {
        assert!((y - y0).abs() <= 1e-10 && (z - z0).abs() <= 1e-10);
    }

    // the same holds around a nonconstant profile
    let s = kink(&t.basis);
    let plant = assemble_plant(PhysicalParams::new(0.02, 1.0, 1.0).unwrap(), &s, &t.basis).unwrap();
    let rec = simulate(&plant, &s, None, &init, &SimOptions { dt: 1e-4, t_end: 0.1, ..opts }).unwrap();
    let (y0, z0) = rec.means[0];
    for &(y, z) in &rec.means {
        assert!((y - y0).abs() <= 1e-10 && (z - z0).abs() <= 1e-10);
    }
}

#[test]
fn open_loop_unstable_mode_grows_at_its_rate() {
    let t = setup();
    let lead = t.plant.eigenpairs[0];
    assert!(lead.value < 0.0);
    let x0 = lead.dense(t.plant.modes()) * 1e-3;
    let init = StateYZ::from_stacked(&t.basis, &x0, 0.0);
    let opts = SimOptions {
        t_end: 1.0,
        nonlinear: false,
        record_every: 1000,
        ..SimOptions::default()
    };
    let rec = simulate(&t.plant, &t.s, None, &init, &opts).unwrap();
    let growth = DVector::from_vec(rec.final_state).norm() / x0.norm();
    let expected = (-lead.value).exp();
    assert!((growth / expected - 1.0).abs() <= 0.02, "growth {growth} vs {expected}");
}

#[test]
fn theorem_norm_matches_state_norm_along_the_trajectory() {
    let t = setup();
    let init = random_initial(&t.basis, 1e-2, 42).unwrap();
    let opts = SimOptions {
        t_end: 2.0,
        record_every: 20,
        ..SimOptions::default()
    };
    let rec = simulate(&t.plant, &t.s, Some(Feedback::from_solution(&t.sol, &t.act)), &init, &opts).unwrap();
    for (a, b) in rec.xi_norms.iter().zip(&rec.thm11_norms) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    // around a nonconstant profile with θ∞ ≠ 0
    let mut s = kink(&t.basis);
    s.theta = 0.3;
    let p = PhysicalParams::new(0.02, 1.5, 0.7).unwrap();
    let state = random_initial(&t.basis, 1e-2, 3).unwrap();
    assert!((theorem11_norm(&state, &s, &p) - state.xi_norm()).abs() <= 1e-12);
    let (phi, theta) = to_physical(&state, &s, &p);
    let back = from_physical(&phi, &theta, &s, &p, 0.0);
    assert!((&back.y - &state.y).max_abs() <= 1e-13 && (&back.z - &state.z).max_abs() <= 1e-13);
}

#[test]
fn control_forcing_stays_inside_the_patch() {
    let t = setup();
    let init = random_initial(&t.basis, 1e-2, 42).unwrap();
    let opts = SimOptions {
        t_end: 1.0,
        record_every: 100,
        ..SimOptions::default()
    };
    let rec = simulate(&t.plant, &t.s, Some(Feedback::from_solution(&t.sol, &t.act)), &init, &opts).unwrap();
    let nodes: Vec<f64> = (0..=400).map(|i| i as f64 / 400.0).collect();
    for w in &rec.control_amplitudes {
        let w = DVector::from_column_slice(w);
        assert!(w.amax() > 0.0);
        let (fy, fz) = t.act.forcing_at_nodes(&w, &nodes).unwrap();
        for (i, &x) in nodes.iter().enumerate() {
            if !t.act.omega.contains(x) {
                assert!(fy[i].abs() <= 1e-300 && fz[i].abs() <= 1e-300, "x = {x}");
            }
        }
    }
}

fn final_state(t: &Setup, dt: f64, scheme: Scheme, init: &StateYZ) -> DVector<f64> {
    let opts = SimOptions {
        dt,
        t_end: 1.0,
        scheme,
        record_every: usize::MAX,
        ..SimOptions::default()
    };
    let rec = simulate(&t.plant, &t.s, Some(Feedback::from_solution(&t.sol, &t.act)), init, &opts).unwrap();
    DVector::from_vec(rec.final_state)
}

#[test]
fn imex_euler_is_first_order() {
    let t = setup();
    let init = random_initial(&t.basis, 1e-2, 42).unwrap();
    let dt = 1e-3;
    let reference = final_state(&t, dt / 8.0, Scheme::ImexEuler, &init);
    let err = |x: DVector<f64>| {
        let d = StateYZ::from_stacked(&t.basis, &(x - &reference), 1.0);
        xi_norm(&d.y, &d.z)
    };
    let e1 = err(final_state(&t, dt, Scheme::ImexEuler, &init));
    let e2 = err(final_state(&t, dt / 2.0, Scheme::ImexEuler, &init));
    let ratio = e1 / e2;
    assert!((ratio - 2.0).abs() <= 0.4, "ratio {ratio}");

    let cn = err(final_state(&t, dt, Scheme::CnAb2, &init));
    assert!(cn < e1);
}

#[test]
fn oversized_step_is_rejected() {
    let t = setup();
    let init = random_initial(&t.basis, 1e-2, 42).unwrap();
    let opts = SimOptions {
        dt: 20.0,
        t_end: 40.0,
        ..SimOptions::default()
    };
    assert!(simulate(&t.plant, &t.s, None, &init, &opts).is_err());
}
