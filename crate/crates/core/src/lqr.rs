//! Riccati feedback synthesis.
//!
//! With `x' = −𝒜x + BW` and cost `½∫ xᵀÂx + ‖W‖²`, the value function is
//! `½ xᵀRx` where `R` solves
//!
//! ```text
//! 𝒜R + R𝒜 + RBBᵀR = Â,     Â = diag(A³, A^{3/2}).
//! ```
//!
//! The optimal feedback is `W = −BᵀRx` and the closed loop is
//! `x' = −(𝒜 + BBᵀR)x`.

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actuator::Actuator;
use crate::error::{Error, Result};
use crate::linearization::{LinearizedPlant, TOL_ZERO};
use crate::lyapunov::solve_lyapunov;
use crate::spectral::{ScalarField, SpectralBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiccatiMethod {
    /// Newton–Kleinman with Bartels–Stewart inner solves.
    Newton,
    /// Marching the differential Riccati equation to steady state.
    Integrate,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RiccatiOptions {
    pub method: RiccatiMethod,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        RiccatiOptions {
            method: RiccatiMethod::Newton,
            tol: 1e-9,
            max_iters: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub r: DMatrix<f64>,
    /// `K = BᵀR`, `N × 2M`.
    pub k_gain: DMatrix<f64>,
    /// `‖𝒜R + R𝒜 + RBBᵀR − Â‖_F / ‖Â‖_F`.
    pub residual_rel: f64,
    /// Residual after each Newton step (one entry for `Integrate`).
    pub residual_log: Vec<f64>,
    pub iterations: usize,
    pub closed_loop_eigs: Vec<Complex<f64>>,
    /// Diagonal of `Â` in the stacked layout.
    pub q_weights: DVector<f64>,
    pub method: RiccatiMethod,
}

/// Diagonal of `Â = diag(μ_k³, μ_k^{3/2})`.
pub fn state_weights(basis: &SpectralBasis) -> DVector<f64> {
    let m = basis.modes();
    DVector::from_fn(2 * m, |i, _| {
        if i < m {
            basis.mu()[i].powi(3)
        } else {
            basis.mu()[i - m].powf(1.5)
        }
    })
}

/// Relative Frobenius residual of `aR + Ra + RbbᵀR = q`.
pub fn care_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    let rb = r * b;
    let res = a * r + r * a + &rb * rb.transpose() - q;
    res.norm() / q.norm()
}

/// Solves `aR + Ra + RbbᵀR = q` for symmetric `a` and `q`.
pub fn solve_care_dense(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    opts: &RiccatiOptions,
) -> Result<(DMatrix<f64>, Vec<f64>, usize)> {
    match opts.method {
        RiccatiMethod::Newton => newton_kleinman(a, b, q, opts),
        RiccatiMethod::Integrate => {
            let (r, steps) = integrate_dre(a, b, q, opts)?;
            let res = care_residual(a, b, q, &r);
            Ok((r, vec![res], steps))
        }
    }
}

fn newton_kleinman(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    opts: &RiccatiOptions,
) -> Result<(DMatrix<f64>, Vec<f64>, usize)> {
    let mut k = initial_gain(a, b, q)?;
    let mut log = Vec::new();
    for it in 1..=opts.max_iters {
        let f = -(a + b * &k);
        let rhs = -(q + k.transpose() * &k);
        let sol = solve_lyapunov(&f, &rhs).map_err(|e| Error::Riccati {
            reason: format!("Lyapunov solve failed at iteration {it}: {e}"),
            log: log.clone(),
        })?;
        let max_re = sol.eigenvalues.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);
        if max_re >= 0.0 {
            return Err(Error::Riccati {
                reason: format!("iterate {it} is not stabilizing (max Re = {max_re:.3e})"),
                log,
            });
        }
        let r = sol.x;
        k = b.transpose() * &r;
        let res = care_residual(a, b, q, &r);
        log.push(res);
        if res <= opts.tol {
            return Ok((r, log, it));
        }
    }
    let last = log.last().copied().unwrap_or(f64::NAN);
    Err(Error::Riccati {
        reason: format!("Newton-Kleinman stopped after {} iterations at residual {last:.3e}", opts.max_iters),
        log,
    })
}

/// Stabilizing gain that is the LQR gain of the block `λ ≤ 0` of `a` and
/// zero on its (already stable) complement.
fn initial_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = a.clone().symmetric_eigen();
    let unstable: Vec<usize> = (0..a.nrows())
        .filter(|&i| eig.eigenvalues[i] <= TOL_ZERO)
        .collect();
    let n = a.nrows();
    if unstable.is_empty() {
        return Ok(DMatrix::zeros(b.ncols(), n));
    }
    let vu = DMatrix::from_fn(n, unstable.len(), |r, c| eig.eigenvectors[(r, unstable[c])]);
    let au = DMatrix::from_diagonal(&DVector::from_iterator(
        unstable.len(),
        unstable.iter().map(|&i| eig.eigenvalues[i]),
    ));
    let bu = vu.transpose() * b;
    let qu = vu.transpose() * q * &vu;
    let xu = care_sign_function(&(-au), &bu, &qu)?;
    Ok(bu.transpose() * xu * vu.transpose())
}

/// Stabilizing solution of `AᵀX + XA − XBBᵀX + Q = 0` from the matrix sign
/// function of the Hamiltonian `[[A, −BBᵀ], [−Q, −Aᵀ]]`.
pub fn care_sign_function(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let g = b * b.transpose();
    let mut z = DMatrix::zeros(2 * n, 2 * n);
    z.view_mut((0, 0), (n, n)).copy_from(a);
    z.view_mut((0, n), (n, n)).copy_from(&(-&g));
    z.view_mut((n, 0), (n, n)).copy_from(&(-q));
    z.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let fail = |reason: &str| Error::Riccati {
        reason: reason.to_string(),
        log: Vec::new(),
    };
    let mut converged = false;
    for _ in 0..100 {
        let det = z.determinant();
        let inv = z.clone().try_inverse().ok_or_else(|| fail("Hamiltonian has eigenvalues on the imaginary axis"))?;
        let c = det.abs().powf(-1.0 / (2 * n) as f64);
        let c = if c.is_finite() && c > 0.0 { c } else { 1.0 };
        let next = (&z * c + inv / c) * 0.5;
        let delta = (&next - &z).norm();
        z = next;
        if delta <= 1e-13 * z.norm() {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(fail("matrix sign iteration did not converge"));
    }
    let w11 = z.view((0, 0), (n, n)).into_owned();
    let w12 = z.view((0, n), (n, n)).into_owned();
    let w21 = z.view((n, 0), (n, n)).into_owned();
    let w22 = z.view((n, n), (n, n)).into_owned();
    let id = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w12);
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w22 + &id));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w11 + &id)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w21));
    let x = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| fail(e))?;
    Ok((&x + x.transpose()) * 0.5)
}

/// IMEX march of `dR/dt = Â − 𝒜R − R𝒜 − RBBᵀR` from `R = 0` in the
/// eigenbasis of `𝒜`, until the algebraic residual reaches `1e-13` or stops
/// improving below the requested tolerance.
fn integrate_dre(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    opts: &RiccatiOptions,
) -> Result<(DMatrix<f64>, usize)> {
    let eig = a.clone().symmetric_eigen();
    let v = eig.eigenvectors.clone();
    let lam = eig.eigenvalues.clone();
    let n = a.nrows();
    let qt = v.transpose() * q * &v;
    let bt = v.transpose() * b;
    let gt = &bt * bt.transpose();
    let target = opts.tol.min(1e-13);
    let mut r = DMatrix::<f64>::zeros(n, n);
    let max_steps = 5_000_000;
    let mut steps = 0;
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    loop {
        for _ in 0..200 {
            let gr = &gt * &r;
            let dt = (0.2 / gr.norm().max(1e-12)).min(0.05);
            let rhs = &r + (&qt - &r * &gr) * dt;
            r = DMatrix::from_fn(n, n, |i, j| rhs[(i, j)] / (1.0 + dt * (lam[i] + lam[j])));
            r = (&r + r.transpose()) * 0.5;
            steps += 1;
        }
        let rho = DMatrix::from_diagonal(&lam);
        let res = care_residual(&rho, &bt, &qt, &r);
        if !res.is_finite() {
            return Err(Error::Riccati {
                reason: "differential Riccati march diverged".into(),
                log: vec![res],
            });
        }
        if res <= target {
            break;
        }
        // roundoff floor: accept once progress stalls below the requested tolerance
        if res < 0.999 * best {
            best = res;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= 20 && res <= opts.tol {
                break;
            }
        }
        if steps >= max_steps {
            return Err(Error::Riccati {
                reason: format!("differential Riccati march stalled at residual {res:.3e}"),
                log: vec![res],
            });
        }
    }
    Ok((&v * r * v.transpose(), steps))
}

/// Synthesizes the Riccati feedback for `plant` actuated by `act`.
pub fn solve_care(plant: &LinearizedPlant, act: &Actuator, opts: &RiccatiOptions) -> Result<RiccatiSolution> {
    let cert = act.kalman_certificate();
    if !cert.ok {
        return Err(Error::InvalidParameter(format!(
            "actuator is not controllable (lambda_min(D) = {:.3e})",
            cert.lambda_min
        )));
    }
    let a = plant.dense_matrix();
    let q_weights = state_weights(&plant.basis);
    let q = DMatrix::from_diagonal(&q_weights);
    let (r, residual_log, iterations) = solve_care_dense(&a, &act.b_matrix, &q, opts)?;
    let residual_rel = care_residual(&a, &act.b_matrix, &q, &r);
    let k_gain = act.b_matrix.transpose() * &r;
    let closed = -(&a + &act.b_matrix * &k_gain);
    let closed_loop_eigs = closed.complex_eigenvalues().iter().copied().collect();
    Ok(RiccatiSolution {
        r,
        k_gain,
        residual_rel,
        residual_log,
        iterations,
        closed_loop_eigs,
        q_weights,
        method: opts.method,
    })
}

impl RiccatiSolution {
    /// Feedback amplitudes `W = −BᵀR x`.
    pub fn feedback_amplitudes(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.k_gain * x)
    }

    /// `‖𝒜R − R𝒜‖_F / ‖R‖_F`.
    pub fn commutator_defect(&self, plant: &LinearizedPlant) -> f64 {
        let a = plant.dense_matrix();
        (&a * &self.r - &self.r * &a).norm() / self.r.norm()
    }

    /// Empirical `(min, max)` of `xᵀRx / ‖x‖²_Ξ` over seeded random samples.
    pub fn rayleigh_bounds(&self, basis: &SpectralBasis, samples: usize, seed: u64) -> (f64, f64) {
        let m = basis.modes();
        let xi_weights = DVector::from_fn(2 * m, |i, _| {
            if i < m {
                basis.mu()[i]
            } else {
                basis.mu()[i - m].sqrt()
            }
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for _ in 0..samples {
            let x = DVector::from_fn(2 * m, |_, _| rng.random_range(-1.0..1.0));
            let xi2: f64 = x.iter().zip(xi_weights.iter()).map(|(v, w)| w * v * v).sum();
            let ratio = x.dot(&(&self.r * &x)) / xi2;
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
        (lo, hi)
    }
}

/// `max |2xᵀR𝒜x + ‖BᵀRx‖² − xᵀÂx| / xᵀÂx` over seeded random unit `x`.
pub fn riccati_residual(
    r: &DMatrix<f64>,
    plant: &LinearizedPlant,
    act: &Actuator,
    samples: usize,
    seed: u64,
) -> f64 {
    let q = state_weights(&plant.basis);
    let n = plant.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        x /= x.norm();
        let rx = r * &x;
        let ax = plant.apply(&x);
        let brx = act.b_matrix.transpose() * &rx;
        let qx: f64 = x.iter().zip(q.iter()).map(|(v, w)| w * v * v).sum();
        let lhs = 2.0 * rx.dot(&ax) + brx.norm_squared();
        worst = worst.max((lhs - qx).abs() / qx);
    }
    worst
}

/// Closed-loop feedback forcing `−BBᵀR(y, z)` and the amplitudes `W`.
pub fn feedback_force(
    sol: &RiccatiSolution,
    act: &Actuator,
    x: &DVector<f64>,
) -> Result<((ScalarField, ScalarField), DVector<f64>)> {
    let w = sol.feedback_amplitudes(x);
    let forcing = act.apply_b(&w)?;
    Ok((forcing, w))
}

#[derive(Debug, Clone)]
pub struct ClosedLoopSpectrum {
    pub eigs: Vec<Complex<f64>>,
    /// `−max Re λ`; positive iff the closed loop is exponentially stable.
    pub margin: f64,
}

/// Spectrum of `−(𝒜 + B K)` for an arbitrary gain `K`.
pub fn closed_loop_spectrum_with_gain(
    plant: &LinearizedPlant,
    act: &Actuator,
    k_gain: &DMatrix<f64>,
) -> ClosedLoopSpectrum {
    let closed = -(plant.dense_matrix() + &act.b_matrix * k_gain);
    let eigs: Vec<Complex<f64>> = closed.complex_eigenvalues().iter().copied().collect();
    let margin = -eigs.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);
    ClosedLoopSpectrum { eigs, margin }
}

pub fn closed_loop_spectrum(sol: &RiccatiSolution, plant: &LinearizedPlant, act: &Actuator) -> ClosedLoopSpectrum {
    closed_loop_spectrum_with_gain(plant, act, &sol.k_gain)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_without_actuation() {
        let (lam, q) = (0.7, 3.0);
        let (r, _, _) = solve_care_dense(&scalar(lam), &scalar(0.0), &scalar(q), &RiccatiOptions::default()).unwrap();
        assert!((r[(0, 0)] - q / (2.0 * lam)).abs() < 1e-10);
    }

    #[test]
    fn scalar_with_actuation() {
        for lam in [-0.5f64, 0.0, 0.7] {
            let (b, q) = (0.4f64, 2.0f64);
            let want = (-lam + (lam * lam + b * b * q).sqrt()) / (b * b);
            for method in [RiccatiMethod::Newton, RiccatiMethod::Integrate] {
                let opts = RiccatiOptions {
                    method,
                    ..RiccatiOptions::default()
                };
                let (r, _, _) = solve_care_dense(&scalar(lam), &scalar(b), &scalar(q), &opts).unwrap();
                assert!((r[(0, 0)] - want).abs() < 1e-10 * want, "{method:?} lam={lam}");
            }
        }
    }

    #[test]
    fn sign_function_small_care() {
        // Aᵀ X + X A − X G X + Q = 0
        let a = DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let x = care_sign_function(&a, &b, &q).unwrap();
        let res = a.transpose() * &x + &x * &a - &x * &b * b.transpose() * &x + &q;
        assert!(res.amax() < 1e-10);
        let closed = &a - &b * b.transpose() * &x;
        assert!(closed.complex_eigenvalues().iter().all(|e| e.re < 0.0));
    }
}
