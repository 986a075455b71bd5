//! Orthonormal cosine discretization of `(0, L)` with homogeneous Neumann
//! boundary conditions.
//!
//! The basis functions `e_0 = sqrt(1/L)` and `e_k = sqrt(2/L) cos(k pi x / L)`
//! are exact eigenfunctions of the Neumann Laplacian, so `A = -Δ + I`, its
//! fractional powers and `Δ²` all act diagonally on modal coefficients.
//! Pointwise products are evaluated on zero-padded midpoint grids and projected
//! back onto the first `M` modes.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Collocation grid used for a transform.
///
/// `Quadratic` has `ceil(3M/2)` points and projects products of two
/// band-limited fields exactly; `Cubic` has `2M` points and does the same for
/// triple products.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    None,
    Quadratic,
    Cubic,
}

impl Padding {
    fn for_factors(n: usize) -> Padding {
        if n <= 2 {
            Padding::Quadratic
        } else {
            Padding::Cubic
        }
    }

    fn index(self) -> usize {
        match self {
            Padding::None => 0,
            Padding::Quadratic => 1,
            Padding::Cubic => 2,
        }
    }
}

/// Midpoint grid with precomputed synthesis tables for the first `modes`
/// basis functions and their derivatives.
#[derive(Debug, Clone)]
pub struct Grid {
    points: usize,
    modes: usize,
    weight: f64,
    nodes: Vec<f64>,
    // row-major, `points x modes`
    basis: Vec<f64>,
    derivative: Vec<f64>,
}

impl Grid {
    fn new(length: f64, modes: usize, points: usize) -> Grid {
        let nodes: Vec<f64> = (0..points)
            .map(|j| (j as f64 + 0.5) * length / points as f64)
            .collect();
        let mut basis = vec![0.0; points * modes];
        let mut derivative = vec![0.0; points * modes];
        let amp0 = (1.0 / length).sqrt();
        let amp = (2.0 / length).sqrt();
        for (j, &x) in nodes.iter().enumerate() {
            let row = j * modes;
            basis[row] = amp0;
            for k in 1..modes {
                let wave = k as f64 * PI / length;
                let (s, c) = (wave * x).sin_cos();
                basis[row + k] = amp * c;
                derivative[row + k] = -amp * wave * s;
            }
        }
        Grid {
            points,
            modes,
            weight: length / points as f64,
            nodes,
            basis,
            derivative,
        }
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Quadrature weight of every node (`L / points`).
    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// Values of `Σ c_k e_k` at the grid nodes.
    pub fn synthesize(&self, coeffs: &[f64]) -> Vec<f64> {
        self.apply_table(&self.basis, coeffs)
    }

    /// Values of `d/dx Σ c_k e_k` at the grid nodes.
    pub fn synthesize_derivative(&self, coeffs: &[f64]) -> Vec<f64> {
        self.apply_table(&self.derivative, coeffs)
    }

    fn apply_table(&self, table: &[f64], coeffs: &[f64]) -> Vec<f64> {
        debug_assert_eq!(coeffs.len(), self.modes);
        table
            .chunks_exact(self.modes)
            .map(|row| row.iter().zip(coeffs).map(|(b, c)| b * c).sum())
            .collect()
    }

    /// Discrete projection of nodal values onto the first `modes` basis functions.
    pub fn analyze(&self, values: &[f64]) -> Vec<f64> {
        debug_assert_eq!(values.len(), self.points);
        let mut coeffs = vec![0.0; self.modes];
        for (row, &v) in self.basis.chunks_exact(self.modes).zip(values) {
            for (c, b) in coeffs.iter_mut().zip(row) {
                *c += b * v;
            }
        }
        for c in &mut coeffs {
            *c *= self.weight;
        }
        coeffs
    }

    /// Matrix of `f ↦ P_M(m f)` in the modal basis, with `m` given by its
    /// values at the grid nodes.
    pub fn multiplication_matrix(&self, values: &[f64]) -> nalgebra::DMatrix<f64> {
        debug_assert_eq!(values.len(), self.points);
        let mut out = nalgebra::DMatrix::zeros(self.modes, self.modes);
        for (row, &v) in self.basis.chunks_exact(self.modes).zip(values) {
            for k in 0..self.modes {
                let bk = row[k] * v * self.weight;
                for l in 0..self.modes {
                    out[(k, l)] += bk * row[l];
                }
            }
        }
        out
    }

    /// Midpoint quadrature of nodal values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weight * values.iter().sum::<f64>()
    }
}

/// Cosine-mode discretization of `Ω = (0, L)`.
#[derive(Debug)]
pub struct SpectralBasis {
    length: f64,
    modes: usize,
    kappa: Vec<f64>,
    mu: Vec<f64>,
    grids: [Grid; 3],
}

impl SpectralBasis {
    pub fn new(length: f64, modes: usize) -> Result<Arc<SpectralBasis>> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "domain length must be positive, got {length}"
            )));
        }
        if modes < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 modes, got {modes}"
            )));
        }
        let kappa: Vec<f64> = (0..modes)
            .map(|k| {
                let w = k as f64 * PI / length;
                w * w
            })
            .collect();
        let mu = kappa.iter().map(|k| 1.0 + k).collect();
        let grids = [
            Grid::new(length, modes, modes),
            Grid::new(length, modes, (3 * modes).div_ceil(2)),
            Grid::new(length, modes, 2 * modes),
        ];
        Ok(Arc::new(SpectralBasis {
            length,
            modes,
            kappa,
            mu,
            grids,
        }))
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    /// Neumann Laplacian eigenvalues `κ_k = (kπ/L)²`.
    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    /// Eigenvalues `μ_k = 1 + κ_k` of `A = -Δ + I`.
    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// Collocation nodes `x_j = (j + 1/2) L / M`.
    pub fn nodes(&self) -> &[f64] {
        self.grids[0].nodes()
    }

    pub fn grid(&self, padding: Padding) -> &Grid {
        &self.grids[padding.index()]
    }

    /// Value of the `k`-th orthonormal basis function at `x`.
    pub fn basis_function(&self, k: usize, x: f64) -> f64 {
        if k == 0 {
            (1.0 / self.length).sqrt()
        } else {
            (2.0 / self.length).sqrt() * (k as f64 * PI * x / self.length).cos()
        }
    }

    /// Orthonormal cosine analysis of collocation values.
    pub fn transform_forward(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.modes {
            return Err(Error::LengthMismatch {
                expected: self.modes,
                got: values.len(),
            });
        }
        Ok(self.grids[0].analyze(values))
    }

    /// Collocation values of a modal expansion.
    pub fn transform_inverse(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.modes {
            return Err(Error::LengthMismatch {
                expected: self.modes,
                got: coeffs.len(),
            });
        }
        Ok(self.grids[0].synthesize(coeffs))
    }

    fn same_as(&self, other: &SpectralBasis) -> bool {
        std::ptr::eq(self, other) || (self.modes == other.modes && self.length == other.length)
    }
}

/// A scalar field stored by its modal coefficients.
#[derive(Debug, Clone)]
pub struct ScalarField {
    basis: Arc<SpectralBasis>,
    coeffs: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(basis: &Arc<SpectralBasis>) -> ScalarField {
        ScalarField {
            basis: Arc::clone(basis),
            coeffs: vec![0.0; basis.modes()],
        }
    }

    pub fn constant(basis: &Arc<SpectralBasis>, value: f64) -> ScalarField {
        let mut f = ScalarField::zeros(basis);
        f.coeffs[0] = value * basis.length().sqrt();
        f
    }

    /// The `k`-th orthonormal basis function.
    pub fn mode(basis: &Arc<SpectralBasis>, k: usize) -> ScalarField {
        let mut f = ScalarField::zeros(basis);
        f.coeffs[k] = 1.0;
        f
    }

    pub fn from_coeffs(basis: &Arc<SpectralBasis>, coeffs: Vec<f64>) -> Result<ScalarField> {
        if coeffs.len() != basis.modes() {
            return Err(Error::LengthMismatch {
                expected: basis.modes(),
                got: coeffs.len(),
            });
        }
        Ok(ScalarField {
            basis: Arc::clone(basis),
            coeffs,
        })
    }

    pub fn from_values(basis: &Arc<SpectralBasis>, values: &[f64]) -> Result<ScalarField> {
        let coeffs = basis.transform_forward(values)?;
        Ok(ScalarField {
            basis: Arc::clone(basis),
            coeffs,
        })
    }

    /// Interpolates `f` at the collocation nodes. Exact for functions in the
    /// span of the first `M` modes.
    pub fn from_fn(basis: &Arc<SpectralBasis>, f: impl Fn(f64) -> f64) -> ScalarField {
        let values: Vec<f64> = basis.nodes().iter().map(|&x| f(x)).collect();
        ScalarField {
            basis: Arc::clone(basis),
            coeffs: basis.grid(Padding::None).analyze(&values),
        }
    }

    pub fn basis(&self) -> &Arc<SpectralBasis> {
        &self.basis
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// Collocation values at the basis nodes.
    pub fn values(&self) -> Vec<f64> {
        self.basis.grid(Padding::None).synthesize(&self.coeffs)
    }

    pub fn values_on(&self, padding: Padding) -> Vec<f64> {
        self.basis.grid(padding).synthesize(&self.coeffs)
    }

    /// Values of the spatial derivative on the requested grid.
    pub fn gradient_values_on(&self, padding: Padding) -> Vec<f64> {
        self.basis.grid(padding).synthesize_derivative(&self.coeffs)
    }

    /// Evaluates the modal series at an arbitrary point.
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(k, c)| c * self.basis.basis_function(k, x))
            .sum()
    }

    /// Evaluates the derivative of the modal series at an arbitrary point.
    pub fn eval_derivative(&self, x: f64) -> f64 {
        let l = self.basis.length();
        let amp = (2.0 / l).sqrt();
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, c)| {
                let w = k as f64 * PI / l;
                -c * amp * w * (w * x).sin()
            })
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.coeffs[0] / self.basis.length().sqrt()
    }

    pub fn l2_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ScalarField) -> f64 {
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a * b).sum()
    }

    /// `A^α f` with `A = -Δ + I`.
    pub fn apply_a_power(&self, alpha: f64) -> ScalarField {
        self.scaled_by(|k| self.basis.mu[k].powf(alpha))
    }

    /// Graph norm `‖A^α f‖`.
    pub fn norm_d_alpha(&self, alpha: f64) -> f64 {
        self.coeffs
            .iter()
            .zip(&self.basis.mu)
            .map(|(c, m)| {
                let s = m.powf(alpha) * c;
                s * s
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn laplacian(&self) -> ScalarField {
        self.scaled_by(|k| -self.basis.kappa[k])
    }

    fn scaled_by(&self, factor: impl Fn(usize) -> f64) -> ScalarField {
        ScalarField {
            basis: Arc::clone(&self.basis),
            coeffs: self
                .coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| c * factor(k))
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> ScalarField {
        self.scaled_by(|_| s)
    }

    /// Maximum absolute collocation value on the basis nodes.
    pub fn max_abs(&self) -> f64 {
        self.values().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn same_basis(&self, other: &ScalarField) -> bool {
        self.basis.same_as(&other.basis)
    }
}

impl Add for &ScalarField {
    type Output = ScalarField;
    fn add(self, rhs: &ScalarField) -> ScalarField {
        assert!(self.same_basis(rhs), "basis mismatch");
        ScalarField {
            basis: Arc::clone(&self.basis),
            coeffs: self.coeffs.iter().zip(&rhs.coeffs).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &ScalarField {
    type Output = ScalarField;
    fn sub(self, rhs: &ScalarField) -> ScalarField {
        assert!(self.same_basis(rhs), "basis mismatch");
        ScalarField {
            basis: Arc::clone(&self.basis),
            coeffs: self.coeffs.iter().zip(&rhs.coeffs).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Mul<f64> for &ScalarField {
    type Output = ScalarField;
    fn mul(self, rhs: f64) -> ScalarField {
        self.scale(rhs)
    }
}

impl Neg for &ScalarField {
    type Output = ScalarField;
    fn neg(self) -> ScalarField {
        self.scale(-1.0)
    }
}

fn check_shared(fs: &[&ScalarField]) -> Result<()> {
    let first = fs
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty product".into()))?;
    if fs.iter().all(|f| f.same_basis(first)) {
        Ok(())
    } else {
        Err(Error::BasisMismatch)
    }
}

/// Pointwise product of two or three fields, projected onto the first `M`
/// modes. With `dealias` the product is formed on a zero-padded grid large
/// enough that the projection is exact for band-limited inputs.
pub fn pointwise_product(fs: &[&ScalarField], dealias: bool) -> Result<ScalarField> {
    check_shared(fs)?;
    if fs.len() > 3 {
        return Err(Error::InvalidParameter(format!(
            "products of {} factors are not supported",
            fs.len()
        )));
    }
    let padding = if dealias {
        Padding::for_factors(fs.len())
    } else {
        Padding::None
    };
    let basis = fs[0].basis();
    let grid = basis.grid(padding);
    let mut acc = fs[0].values_on(padding);
    for f in &fs[1..] {
        for (a, v) in acc.iter_mut().zip(f.values_on(padding)) {
            *a *= v;
        }
    }
    Ok(ScalarField {
        basis: Arc::clone(basis),
        coeffs: grid.analyze(&acc),
    })
}

/// `|∇f|²` as a field, differentiated through the sine series and squared on
/// the dealiased grid.
pub fn gradient_squared(f: &ScalarField) -> ScalarField {
    let padding = Padding::Quadratic;
    let grid = f.basis().grid(padding);
    let values: Vec<f64> = f
        .gradient_values_on(padding)
        .into_iter()
        .map(|d| d * d)
        .collect();
    ScalarField {
        basis: Arc::clone(f.basis()),
        coeffs: grid.analyze(&values),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_basis(m: usize) -> Arc<SpectralBasis> {
        SpectralBasis::new(1.0, m).unwrap()
    }

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn eigenvalues_start_at_zero_and_increase() {
        let b = unit_basis(16);
        assert_eq!(b.kappa()[0], 0.0);
        assert!(b.kappa().windows(2).all(|w| w[1] > w[0]));
        for (k, m) in b.kappa().iter().zip(b.mu()) {
            assert_eq!(*m, 1.0 + k);
        }
    }

    #[test]
    fn constant_is_mode_zero() {
        let b = SpectralBasis::new(2.0, 8).unwrap();
        let c = b.transform_forward(&[3.0; 8]).unwrap();
        assert!((c[0] - 3.0 * 2f64.sqrt()).abs() < 1e-13);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn sampled_mode_one_is_unit_vector() {
        let b = unit_basis(16);
        let v: Vec<f64> = b.nodes().iter().map(|&x| b.basis_function(1, x)).collect();
        let c = b.transform_forward(&v).unwrap();
        for (k, ck) in c.iter().enumerate() {
            let want = if k == 1 { 1.0 } else { 0.0 };
            assert!((ck - want).abs() <= 1e-12, "k={k} c={ck}");
        }
    }

    #[test]
    fn round_trip_is_identity() {
        for m in [8, 64, 256] {
            let b = unit_basis(m);
            let v = lcg(m as u64, m);
            let back = b.transform_inverse(&b.transform_forward(&v).unwrap()).unwrap();
            let scale = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            for (a, w) in v.iter().zip(&back) {
                assert!((a - w).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn wrong_length_is_rejected() {
        let b = unit_basis(8);
        assert!(matches!(
            b.transform_forward(&[0.0; 7]),
            Err(Error::LengthMismatch { expected: 8, got: 7 })
        ));
    }

    #[test]
    fn discrete_gram_matrix_is_identity() {
        let b = unit_basis(32);
        let g = b.grid(Padding::None);
        for k in 0..32 {
            for l in 0..32 {
                let vals: Vec<f64> = b
                    .nodes()
                    .iter()
                    .map(|&x| b.basis_function(k, x) * b.basis_function(l, x))
                    .collect();
                let want = if k == l { 1.0 } else { 0.0 };
                assert!((g.integrate(&vals) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parseval_and_mean() {
        let b = SpectralBasis::new(1.5, 32).unwrap();
        let f = ScalarField::from_coeffs(&b, lcg(3, 32)).unwrap();
        let vals = f.values();
        let discrete = b.grid(Padding::None).integrate(&vals.iter().map(|v| v * v).collect::<Vec<_>>());
        assert!((discrete.sqrt() - f.l2_norm()).abs() <= 1e-10 * f.l2_norm());
        let avg = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((avg - f.mean()).abs() < 1e-13);
    }

    #[test]
    fn fractional_powers() {
        let b = unit_basis(16);
        let e1 = ScalarField::mode(&b, 1);
        let f = ScalarField::from_coeffs(&b, lcg(9, 16)).unwrap();
        let id = f.apply_a_power(0.0);
        assert_eq!(id.coeffs(), f.coeffs());
        let a1 = e1.apply_a_power(1.0);
        assert!((a1.coeffs()[1] - (1.0 + PI * PI)).abs() < 1e-12);
        let half_twice = f.apply_a_power(0.5).apply_a_power(0.5);
        let once = f.apply_a_power(1.0);
        for (a, c) in half_twice.coeffs().iter().zip(once.coeffs()) {
            assert!((a - c).abs() <= 1e-12 * c.abs().max(1.0));
        }
        let neg = f.apply_a_power(-0.75).apply_a_power(0.75);
        for (a, c) in neg.coeffs().iter().zip(f.coeffs()) {
            assert!((a - c).abs() <= 1e-12);
        }
    }

    #[test]
    fn graph_norms() {
        let b = unit_basis(16);
        assert_eq!(ScalarField::zeros(&b).norm_d_alpha(0.5), 0.0);
        let e1 = ScalarField::mode(&b, 1);
        assert!((e1.norm_d_alpha(0.5) - (1.0 + PI * PI).sqrt()).abs() < 1e-12);
        let f = ScalarField::from_coeffs(&b, lcg(5, 16)).unwrap();
        let brute = f.apply_a_power(1.5).l2_norm();
        assert!((f.norm_d_alpha(1.5) - brute).abs() <= 1e-12 * brute);
    }

    #[test]
    fn laplacian_properties() {
        let b = unit_basis(16);
        let c = ScalarField::constant(&b, 2.5).laplacian();
        assert!(c.coeffs().iter().all(|v| *v == 0.0));
        let e2 = ScalarField::mode(&b, 2).laplacian();
        assert!((e2.coeffs()[2] + 4.0 * PI * PI).abs() < 1e-12);
        let f = ScalarField::from_coeffs(&b, lcg(11, 16)).unwrap();
        let lap = f.laplacian();
        assert_eq!(lap.coeffs()[0], 0.0);
        let other = &f - &f.apply_a_power(1.0);
        for (a, c) in lap.coeffs().iter().zip(other.coeffs()) {
            assert!((a - c).abs() <= 1e-12 * c.abs().max(1.0));
        }
    }

    #[test]
    fn products_of_constants_and_identity() {
        let b = unit_basis(16);
        let f = ScalarField::from_coeffs(&b, lcg(2, 16)).unwrap();
        let one = ScalarField::constant(&b, 1.0);
        let p = pointwise_product(&[&f, &one], true).unwrap();
        for (a, c) in p.coeffs().iter().zip(f.coeffs()) {
            assert!((a - c).abs() < 1e-12);
        }
        let ab = pointwise_product(
            &[&ScalarField::constant(&b, 2.0), &ScalarField::constant(&b, -3.5)],
            true,
        )
        .unwrap();
        assert!((ab.mean() + 7.0).abs() < 1e-13);
    }

    #[test]
    fn cosine_squared_identity() {
        let b = unit_basis(16);
        let c = ScalarField::from_fn(&b, |x| (PI * x).cos());
        let p = pointwise_product(&[&c, &c], true).unwrap();
        // ½ + ½cos(2πx) = ½ e_0 + (1/(2√2)) e_2
        let want = [0.5, 0.0, 0.5 / 2f64.sqrt()];
        for (k, ck) in p.coeffs().iter().enumerate() {
            let w = want.get(k).copied().unwrap_or(0.0);
            assert!((ck - w).abs() < 1e-10, "k={k}");
        }
    }

    #[test]
    fn basis_mismatch_is_an_error() {
        let a = ScalarField::zeros(&unit_basis(8));
        let b = ScalarField::zeros(&unit_basis(16));
        assert!(matches!(pointwise_product(&[&a, &b], true), Err(Error::BasisMismatch)));
    }

    #[test]
    fn gradient_squared_of_cosine() {
        let b = unit_basis(16);
        assert!(gradient_squared(&ScalarField::constant(&b, 4.0))
            .coeffs()
            .iter()
            .all(|c| c.abs() < 1e-14));
        let f = ScalarField::from_fn(&b, |x| (PI * x).cos());
        let g = gradient_squared(&f);
        let want = ScalarField::from_fn(&b, |x| PI * PI * (0.5 - 0.5 * (2.0 * PI * x).cos()));
        for (a, w) in g.coeffs().iter().zip(want.coeffs()) {
            assert!((a - w).abs() < 1e-10);
        }
    }
}
