//! Linearization around a stationary state.
//!
//! In the variables `y = φ − φ∞`, `z = σ − σ∞` the linear part is the
//! self-adjoint operator
//!
//! ```text
//! 𝒜 = [ νΔ² − F_l Δ    γΔ ]
//!     [ γΔ             −Δ ]
//! ```
//!
//! which is block-diagonal in the cosine basis: mode `k` contributes
//! `[[νκ² + F_l κ, −γκ], [−γκ, κ]]`. The `g(x)y` term is kept in the
//! nonlinear remainder, so no mode coupling enters `𝒜`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{pointwise_product, ScalarField, SpectralBasis};
use crate::stationary::StationaryState;

/// Eigenvalues at or below this are counted as unstable.
pub const TOL_ZERO: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    pub nu: f64,
    pub l0: f64,
    pub gamma0: f64,
}

impl PhysicalParams {
    pub fn new(nu: f64, l0: f64, gamma0: f64) -> Result<PhysicalParams> {
        let p = PhysicalParams { nu, l0, gamma0 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("nu", self.nu), ("l0", self.l0), ("gamma0", self.gamma0)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// `α₀ = sqrt(γ₀ / l₀)`.
    pub fn alpha0(&self) -> f64 {
        (self.gamma0 / self.l0).sqrt()
    }

    /// `γ = α₀ l₀ = γ₀ / α₀`.
    pub fn gamma(&self) -> f64 {
        self.alpha0() * self.l0
    }

    /// `l = γ₀ l₀`.
    pub fn l(&self) -> f64 {
        self.gamma0 * self.l0
    }
}

impl Default for PhysicalParams {
    fn default() -> Self {
        PhysicalParams {
            nu: 0.1,
            l0: 1.0,
            gamma0: 1.0,
        }
    }
}

/// Mean of `F''(φ∞) = 3φ∞² − 1` over `Ω`.
pub fn mean_f_second(phi_inf: &ScalarField) -> f64 {
    let l = phi_inf.basis().length();
    let sq: f64 = phi_inf.coeffs().iter().map(|c| c * c).sum();
    3.0 * sq / l - 1.0
}

/// `g(x) = 3φ∞(x)² − (3/|Ω|) ∫ φ∞²`, the zero-mean part of `F''(φ∞)`.
pub fn g_field(phi_inf: &ScalarField) -> ScalarField {
    if phi_inf.coeffs()[1..].iter().all(|c| *c == 0.0) {
        // exact for constant profiles, free of grid roundoff
        return ScalarField::zeros(phi_inf.basis());
    }
    let mut g = pointwise_product(&[phi_inf, phi_inf], true)
        .expect("shared basis")
        .scale(3.0);
    g.coeffs_mut()[0] = 0.0;
    g
}

/// An eigenpair of one modal block: `(φ_i, ψ_i) = (a e_k, b e_k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalEigenpair {
    pub value: f64,
    pub mode: usize,
    /// Coefficients `(a, b)` of the `y` and `z` components.
    pub vector: [f64; 2],
}

impl ModalEigenpair {
    /// Dense coefficient vector in the stacked `[y; z]` layout.
    pub fn dense(&self, modes: usize) -> DVector<f64> {
        let mut v = DVector::zeros(2 * modes);
        v[self.mode] = self.vector[0];
        v[modes + self.mode] = self.vector[1];
        v
    }

    /// The eigenfunction pair `(φ_i, ψ_i)` as fields.
    pub fn fields(&self, basis: &Arc<SpectralBasis>) -> (ScalarField, ScalarField) {
        let mut y = ScalarField::zeros(basis);
        let mut z = ScalarField::zeros(basis);
        y.coeffs_mut()[self.mode] = self.vector[0];
        z.coeffs_mut()[self.mode] = self.vector[1];
        (y, z)
    }
}

/// Closed-form eigendecomposition of a symmetric 2×2 matrix. Returns the
/// pairs `(λ_min, v_min)`, `(λ_max, v_max)`.
pub fn symmetric_2x2_eigen(m: [[f64; 2]; 2]) -> [(f64, [f64; 2]); 2] {
    let (a, b, d) = (m[0][0], m[0][1], m[1][1]);
    let half_trace = 0.5 * (a + d);
    let half_gap = 0.5 * (a - d).hypot(2.0 * b);
    let theta = 0.5 * (2.0 * b).atan2(a - d);
    let (s, c) = theta.sin_cos();
    [
        (half_trace - half_gap, [-s, c]),
        (half_trace + half_gap, [c, s]),
    ]
}

#[derive(Debug, Clone)]
pub struct LinearizedPlant {
    pub params: PhysicalParams,
    pub basis: Arc<SpectralBasis>,
    pub f_bar: f64,
    pub f_l: f64,
    pub g: ScalarField,
    pub blocks: Vec<[[f64; 2]; 2]>,
    /// All `2M` eigenpairs, ascending.
    pub eigenpairs: Vec<ModalEigenpair>,
    pub n_unstable: usize,
}

/// Builds `𝒜` around `s` and diagonalizes it block by block.
pub fn assemble_plant(
    params: PhysicalParams,
    s: &StationaryState,
    basis: &Arc<SpectralBasis>,
) -> Result<LinearizedPlant> {
    params.validate()?;
    if s.basis().modes() != basis.modes() || s.basis().length() != basis.length() {
        return Err(Error::BasisMismatch);
    }
    let f_bar = mean_f_second(&s.phi);
    let f_l = f_bar + params.l();
    let g = g_field(&s.phi);
    Ok(LinearizedPlant::from_constants(params, basis, f_bar, f_l, g))
}

impl LinearizedPlant {
    fn from_constants(
        params: PhysicalParams,
        basis: &Arc<SpectralBasis>,
        f_bar: f64,
        f_l: f64,
        g: ScalarField,
    ) -> LinearizedPlant {
        let gamma = params.gamma();
        let blocks: Vec<[[f64; 2]; 2]> = basis
            .kappa()
            .iter()
            .map(|&k| {
                [
                    [params.nu * k * k + f_l * k, -gamma * k],
                    [-gamma * k, k],
                ]
            })
            .collect();

        let mut eigenpairs: Vec<ModalEigenpair> = blocks
            .iter()
            .enumerate()
            .flat_map(|(mode, &block)| {
                symmetric_2x2_eigen(block)
                    .into_iter()
                    .map(move |(value, vector)| ModalEigenpair { value, mode, vector })
            })
            .collect();
        // Within a repeated eigenvalue: y-dominant vectors first, then by mode.
        eigenpairs.sort_by(|p, q| {
            p.value
                .total_cmp(&q.value)
                .then_with(|| y_dominant(q).cmp(&y_dominant(p)))
                .then_with(|| p.mode.cmp(&q.mode))
        });
        let n_unstable = eigenpairs.iter().filter(|p| p.value <= TOL_ZERO).count();
        LinearizedPlant {
            params,
            basis: Arc::clone(basis),
            f_bar,
            f_l,
            g,
            blocks,
            eigenpairs,
            n_unstable,
        }
    }

    pub fn modes(&self) -> usize {
        self.basis.modes()
    }

    pub fn dim(&self) -> usize {
        2 * self.modes()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.eigenpairs.iter().map(|p| p.value).collect()
    }

    /// The `N` eigenpairs with `λ ≤ 0`.
    pub fn unstable_subspace(&self) -> &[ModalEigenpair] {
        &self.eigenpairs[..self.n_unstable]
    }

    /// First stable eigenvalue `λ_{N+1}`.
    pub fn stable_gap(&self) -> Option<f64> {
        self.eigenpairs.get(self.n_unstable).map(|p| p.value)
    }

    /// Dense `2M × 2M` matrix of `𝒜` in the stacked `[y; z]` layout.
    pub fn dense_matrix(&self) -> DMatrix<f64> {
        let m = self.modes();
        let mut a = DMatrix::zeros(2 * m, 2 * m);
        for (k, b) in self.blocks.iter().enumerate() {
            a[(k, k)] = b[0][0];
            a[(k, m + k)] = b[0][1];
            a[(m + k, k)] = b[1][0];
            a[(m + k, m + k)] = b[1][1];
        }
        a
    }

    /// Eigenvector matrix, one column per eigenpair in ascending order.
    pub fn eigenvector_matrix(&self) -> DMatrix<f64> {
        let m = self.modes();
        let mut v = DMatrix::zeros(2 * m, 2 * m);
        for (i, p) in self.eigenpairs.iter().enumerate() {
            v[(p.mode, i)] = p.vector[0];
            v[(m + p.mode, i)] = p.vector[1];
        }
        v
    }

    /// `𝒜 x` for a stacked coefficient vector.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.modes();
        let mut out = DVector::zeros(2 * m);
        for (k, b) in self.blocks.iter().enumerate() {
            out[k] = b[0][0] * x[k] + b[0][1] * x[m + k];
            out[m + k] = b[1][0] * x[k] + b[1][1] * x[m + k];
        }
        out
    }
}

fn y_dominant(p: &ModalEigenpair) -> bool {
    p.vector[0].abs() >= p.vector[1].abs()
}

/// Stacks `(y, z)` coefficients into one vector.
pub fn stack(y: &ScalarField, z: &ScalarField) -> DVector<f64> {
    let m = y.coeffs().len();
    let mut v = DVector::zeros(2 * m);
    v.as_mut_slice()[..m].copy_from_slice(y.coeffs());
    v.as_mut_slice()[m..].copy_from_slice(z.coeffs());
    v
}

/// Splits a stacked vector back into `(y, z)`.
pub fn unstack(basis: &Arc<SpectralBasis>, v: &DVector<f64>) -> (ScalarField, ScalarField) {
    let m = basis.modes();
    let y = ScalarField::from_coeffs(basis, v.as_slice()[..m].to_vec()).expect("length");
    let z = ScalarField::from_coeffs(basis, v.as_slice()[m..].to_vec()).expect("length");
    (y, z)
}
