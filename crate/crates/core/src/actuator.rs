//! Localized actuator: the bump weight `1*_ω`, the maps `B: R^N → H×H` and
//! `B*`, the modal coupling matrix `d_ij = ∫ 1*_ω (φ_iφ_j + ψ_iψ_j)`, and
//! minimum-energy steering of the unstable modal coordinates.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linearization::{unstack, LinearizedPlant};
use crate::quadrature::gauss_legendre;
use crate::spectral::{ScalarField, SpectralBasis};

/// Open control patch `(a, b) ⊂ (0, L)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub a: f64,
    pub b: f64,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Interval {
        Interval { a, b }
    }

    pub fn validate(&self, length: f64) -> Result<()> {
        if self.a.is_finite() && self.b.is_finite() && 0.0 < self.a && self.a < self.b && self.b < length {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "control interval ({}, {}) must satisfy 0 < a < b < {length}",
                self.a, self.b
            )))
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.a < x && x < self.b
    }

    /// The middle half of the interval.
    pub fn middle_half(&self) -> Interval {
        let q = 0.25 * (self.b - self.a);
        Interval {
            a: self.a + q,
            b: self.b - q,
        }
    }
}

impl Default for Interval {
    fn default() -> Self {
        Interval { a: 0.25, b: 0.75 }
    }
}

/// `exp(−1/(1 − s²))` with `s = (2x − a − b)/(b − a)` inside `ω`, zero outside.
pub fn bump(omega: Interval, x: f64) -> f64 {
    if !omega.contains(x) {
        return 0.0;
    }
    let s = (2.0 * x - omega.a - omega.b) / (omega.b - omega.a);
    let d = 1.0 - s * s;
    if d <= 0.0 {
        0.0
    } else {
        (-1.0 / d).exp()
    }
}

/// Gauss–Legendre rule on `ω` with the bump folded into the weights.
/// The node count follows the highest cosine mode so that products with
/// `e_{M−1}` stay resolved.
fn bump_rule(omega: Interval, modes: usize) -> (Vec<f64>, Vec<f64>) {
    let (nodes, weights) = gauss_legendre(256 + 2 * modes, omega.a, omega.b);
    let weights = nodes.iter().zip(weights).map(|(&x, w)| w * bump(omega, x)).collect();
    (nodes, weights)
}

/// `e_k(x_n)` for all modes and nodes, mode-major.
fn basis_at(basis: &SpectralBasis, nodes: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(basis.modes(), nodes.len(), |k, n| basis.basis_function(k, nodes[n]))
}

/// Modal projection of the bump weight.
pub fn bump_weight(omega: Interval, basis: &Arc<SpectralBasis>) -> Result<ScalarField> {
    omega.validate(basis.length())?;
    let (nodes, weights) = bump_rule(omega, basis.modes());
    let e = basis_at(basis, &nodes);
    ScalarField::from_coeffs(basis, (e * DVector::from_vec(weights)).as_slice().to_vec())
}

#[derive(Debug, Clone)]
pub struct Actuator {
    pub omega: Interval,
    pub omega0: Interval,
    /// Modal projection of `1*_ω`.
    pub weight: ScalarField,
    /// `(φ_i, ψ_i)` for the actuated modes.
    pub modes: Vec<(ScalarField, ScalarField)>,
    pub d_matrix: DMatrix<f64>,
    /// `2M × N`; column `j` holds the coefficients of `(1*_ω φ_j, 1*_ω ψ_j)`.
    pub b_matrix: DMatrix<f64>,
    // bump-weighted quadrature rule on ω, basis values and mode values there
    quad_weights: Vec<f64>,
    basis_nodes: DMatrix<f64>,
    mode_nodes: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Actuator {
    /// Actuator acting on the unstable eigenpairs of `plant`.
    pub fn new(omega: Interval, plant: &LinearizedPlant) -> Result<Actuator> {
        let modes = plant
            .unstable_subspace()
            .iter()
            .map(|p| p.fields(&plant.basis))
            .collect();
        Actuator::with_modes(omega, &plant.basis, modes)
    }

    /// Actuator for an arbitrary family of mode pairs.
    pub fn with_modes(
        omega: Interval,
        basis: &Arc<SpectralBasis>,
        modes: Vec<(ScalarField, ScalarField)>,
    ) -> Result<Actuator> {
        omega.validate(basis.length())?;
        let weight = bump_weight(omega, basis)?;
        let (nodes, quad_weights) = bump_rule(omega, basis.modes());
        let basis_nodes = basis_at(basis, &nodes);
        let at_nodes = |f: &ScalarField| -> Vec<f64> {
            (basis_nodes.transpose() * DVector::from_column_slice(f.coeffs()))
                .as_slice()
                .to_vec()
        };
        let mode_nodes: Vec<(Vec<f64>, Vec<f64>)> = modes.iter().map(|(p, q)| (at_nodes(p), at_nodes(q))).collect();

        let n = modes.len();
        let m = basis.modes();
        let mut d_matrix = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = (0..nodes.len())
                    .map(|x| {
                        quad_weights[x]
                            * (mode_nodes[i].0[x] * mode_nodes[j].0[x] + mode_nodes[i].1[x] * mode_nodes[j].1[x])
                    })
                    .sum();
                d_matrix[(i, j)] = v;
                d_matrix[(j, i)] = v;
            }
        }

        let mut b_matrix = DMatrix::zeros(2 * m, n);
        for (j, (p, q)) in mode_nodes.iter().enumerate() {
            let wp = DVector::from_iterator(nodes.len(), quad_weights.iter().zip(p).map(|(w, v)| w * v));
            let wq = DVector::from_iterator(nodes.len(), quad_weights.iter().zip(q).map(|(w, v)| w * v));
            b_matrix.view_mut((0, j), (m, 1)).copy_from(&(&basis_nodes * wp));
            b_matrix.view_mut((m, j), (m, 1)).copy_from(&(&basis_nodes * wq));
        }

        Ok(Actuator {
            omega,
            omega0: omega.middle_half(),
            weight,
            modes,
            d_matrix,
            b_matrix,
            quad_weights,
            basis_nodes,
            mode_nodes,
        })
    }

    pub fn n_controls(&self) -> usize {
        self.modes.len()
    }

    pub fn basis(&self) -> &Arc<SpectralBasis> {
        self.weight.basis()
    }

    fn check_dim(&self, w: &DVector<f64>) -> Result<()> {
        if w.len() != self.n_controls() {
            return Err(Error::LengthMismatch {
                expected: self.n_controls(),
                got: w.len(),
            });
        }
        Ok(())
    }

    /// `BW = (Σ 1*_ω φ_i w_i, Σ 1*_ω ψ_i w_i)`.
    pub fn apply_b(&self, w: &DVector<f64>) -> Result<(ScalarField, ScalarField)> {
        self.check_dim(w)?;
        Ok(unstack(self.basis(), &(&self.b_matrix * w)))
    }

    /// Nodal values of `BW` at arbitrary points, using the exact bump.
    pub fn forcing_at_nodes(&self, w: &DVector<f64>, nodes: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dim(w)?;
        let mut y = Vec::with_capacity(nodes.len());
        let mut z = Vec::with_capacity(nodes.len());
        for &x in nodes {
            let b = bump(self.omega, x);
            if b == 0.0 {
                y.push(0.0);
                z.push(0.0);
                continue;
            }
            let (mut sy, mut sz) = (0.0, 0.0);
            for ((p, q), wi) in self.modes.iter().zip(w.iter()) {
                sy += p.eval(x) * wi;
                sz += q.eval(x) * wi;
            }
            y.push(b * sy);
            z.push(b * sz);
        }
        Ok((y, z))
    }

    /// `B*q = (∫ 1*_ω (φ_i q₁ + ψ_i q₂))_i`, by quadrature.
    pub fn apply_b_star(&self, q: (&ScalarField, &ScalarField)) -> Result<DVector<f64>> {
        if !q.0.same_basis(&self.weight) || !q.1.same_basis(&self.weight) {
            return Err(Error::BasisMismatch);
        }
        let q1 = self.basis_nodes.transpose() * DVector::from_column_slice(q.0.coeffs());
        let q2 = self.basis_nodes.transpose() * DVector::from_column_slice(q.1.coeffs());
        Ok(DVector::from_iterator(
            self.n_controls(),
            self.mode_nodes.iter().map(|(p, s)| {
                (0..self.quad_weights.len())
                    .map(|x| self.quad_weights[x] * (p[x] * q1[x] + s[x] * q2[x]))
                    .sum::<f64>()
            }),
        ))
    }

    /// `B*` applied to a stacked coefficient vector (`Bᵀ q`).
    pub fn apply_b_star_stacked(&self, q: &DVector<f64>) -> DVector<f64> {
        self.b_matrix.transpose() * q
    }

    /// Controllability certificate from the spectrum of `D`.
    pub fn kalman_certificate(&self) -> KalmanCertificate {
        let eig = self.d_matrix.clone().symmetric_eigen();
        let lambda_min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let lambda_max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let det = self.d_matrix.determinant();
        KalmanCertificate {
            det,
            lambda_min,
            lambda_max,
            ok: lambda_min > 1e-12 * lambda_max && lambda_max > 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanCertificate {
    pub det: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub ok: bool,
}

/// Minimum-energy control steering `ξ' = −Λξ + DW` from `ξ₀` to zero at `T₀`.
#[derive(Debug, Clone)]
pub struct NullControlPlan {
    pub t0: f64,
    pub lambdas: Vec<f64>,
    pub d_matrix: DMatrix<f64>,
    pub xi0: DVector<f64>,
    /// `G⁻¹(−e^{−ΛT₀}ξ₀)`.
    pub multiplier: DVector<f64>,
    pub gramian: DMatrix<f64>,
    pub gramian_cond: f64,
    pub times: Vec<f64>,
    pub quad_weights: Vec<f64>,
    pub samples: Vec<DVector<f64>>,
    pub energy: f64,
}

/// Default number of Gauss–Legendre samples of the control.
pub const NULL_CONTROL_NODES: usize = 512;

fn integral_exp(rate: f64, t: f64) -> f64 {
    // ∫₀ᵗ e^{−rate·s} ds
    if rate == 0.0 {
        t
    } else {
        -(-rate * t).exp_m1() / rate
    }
}

/// Lemma-style minimum-energy open-loop null control.
pub fn null_control(
    act: &Actuator,
    plant: &LinearizedPlant,
    xi0: &DVector<f64>,
    t0: f64,
) -> Result<NullControlPlan> {
    let n = act.n_controls();
    if xi0.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: xi0.len(),
        });
    }
    if !(t0 > 0.0 && t0.is_finite()) {
        return Err(Error::InvalidParameter(format!("T0 must be positive, got {t0}")));
    }
    if !act.kalman_certificate().ok {
        return Err(Error::InvalidParameter("actuator fails the controllability test".into()));
    }
    let lambdas: Vec<f64> = plant.unstable_subspace().iter().map(|p| p.value).collect();
    if lambdas.len() != n {
        return Err(Error::LengthMismatch {
            expected: lambdas.len(),
            got: n,
        });
    }
    let d = act.d_matrix.clone();
    let ddt = &d * d.transpose();
    let gramian = DMatrix::from_fn(n, n, |i, j| ddt[(i, j)] * integral_exp(lambdas[i] + lambdas[j], t0));

    let eig = gramian.clone().symmetric_eigen();
    let gmin = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let gmax = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gramian_cond = if gmin > 0.0 { gmax / gmin } else { f64::INFINITY };
    if gramian_cond > 1e12 {
        return Err(Error::IllConditionedGramian {
            condition: gramian_cond,
        });
    }

    let target = DVector::from_fn(n, |i, _| -(-lambdas[i] * t0).exp() * xi0[i]);
    let multiplier = gramian
        .clone()
        .cholesky()
        .map(|c| c.solve(&target))
        .ok_or(Error::IllConditionedGramian {
            condition: gramian_cond,
        })?;
    let energy = multiplier.dot(&(&gramian * &multiplier));

    let mut plan = NullControlPlan {
        t0,
        lambdas,
        d_matrix: d,
        xi0: xi0.clone(),
        multiplier,
        gramian,
        gramian_cond,
        times: Vec::new(),
        quad_weights: Vec::new(),
        samples: Vec::new(),
        energy,
    };
    let (times, weights) = gauss_legendre(NULL_CONTROL_NODES, 0.0, t0);
    plan.samples = times.iter().map(|&t| plan.control_at(t)).collect();
    plan.times = times;
    plan.quad_weights = weights;
    Ok(plan)
}

impl NullControlPlan {
    /// `W(t) = Dᵀ e^{−Λ(T₀−t)} G⁻¹(−e^{−ΛT₀}ξ₀)` on `[0, T₀]`.
    pub fn control_at(&self, t: f64) -> DVector<f64> {
        let scaled = DVector::from_fn(self.lambdas.len(), |i, _| {
            (-self.lambdas[i] * (self.t0 - t)).exp() * self.multiplier[i]
        });
        self.d_matrix.transpose() * scaled
    }

    /// `∫ ‖W‖²` by Gauss–Legendre quadrature of the stored samples.
    pub fn quadrature_energy(&self) -> f64 {
        self.samples
            .iter()
            .zip(&self.quad_weights)
            .map(|(w, q)| q * w.norm_squared())
            .sum()
    }

    /// `‖ξ(T₀)‖ / ‖ξ₀‖` after integrating `ξ' = −Λξ + DW(t)` with classical
    /// Runge–Kutta in `steps` steps.
    pub fn steering_error_rk4(&self, steps: usize) -> f64 {
        let h = self.t0 / steps as f64;
        let rhs = |t: f64, xi: &DVector<f64>| -> DVector<f64> {
            let drift = DVector::from_fn(xi.len(), |i, _| -self.lambdas[i] * xi[i]);
            drift + &self.d_matrix * self.control_at(t)
        };
        let mut xi = self.xi0.clone();
        for n in 0..steps {
            let t = n as f64 * h;
            let k1 = rhs(t, &xi);
            let k2 = rhs(t + 0.5 * h, &(&xi + &k1 * (0.5 * h)));
            let k3 = rhs(t + 0.5 * h, &(&xi + &k2 * (0.5 * h)));
            let k4 = rhs(t + h, &(&xi + &k3 * h));
            xi += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        let base = self.xi0.norm();
        if base == 0.0 {
            xi.norm()
        } else {
            xi.norm() / base
        }
    }

    /// Zero extension of the plan to `[0, ∞)`.
    pub fn open_loop_extend(&self) -> OpenLoopControl<'_> {
        OpenLoopControl { plan: self }
    }
}

/// `W(t)` for `t < T₀`, zero afterwards.
#[derive(Debug, Clone, Copy)]
pub struct OpenLoopControl<'a> {
    plan: &'a NullControlPlan,
}

impl OpenLoopControl<'_> {
    pub fn at(&self, t: f64) -> DVector<f64> {
        if t >= self.plan.t0 || t < 0.0 {
            DVector::zeros(self.plan.lambdas.len())
        } else {
            self.plan.control_at(t)
        }
    }

    /// Exact modal solution of `x' + 𝒜x = BW(t)` at the requested times,
    /// starting from the stacked state `x0`.
    pub fn propagate(
        &self,
        plant: &LinearizedPlant,
        act: &Actuator,
        x0: &DVector<f64>,
        times: &[f64],
    ) -> Vec<DVector<f64>> {
        let plan = self.plan;
        let v = plant.eigenvector_matrix();
        let coords0 = v.transpose() * x0;
        // input map in eigen-coordinates composed with Dᵀ
        let input = v.transpose() * &act.b_matrix * plan.d_matrix.transpose();
        let lam: Vec<f64> = plant.eigenpairs.iter().map(|p| p.value).collect();
        times
            .iter()
            .map(|&t| {
                let tau = t.min(plan.t0);
                let coords = DVector::from_fn(lam.len(), |i, _| {
                    let mut xi = (-lam[i] * t).exp() * coords0[i];
                    for (m, &lm) in plan.lambdas.iter().enumerate() {
                        let c = input[(i, m)] * plan.multiplier[m];
                        if c == 0.0 {
                            continue;
                        }
                        let pre = (-lam[i] * (t - tau) - lm * (plan.t0 - tau)).exp();
                        xi += c * pre * integral_exp(lam[i] + lm, tau);
                    }
                    xi
                });
                &v * coords
            })
            .collect()
    }
}
