use std::f64::consts::PI;
use std::sync::Arc;

use phasefield_core::spectral::{gradient_squared, pointwise_product, ScalarField, SpectralBasis};
use proptest::prelude::*;

fn amp(l: f64, k: usize) -> f64 {
    if k == 0 {
        (1.0 / l).sqrt()
    } else {
        (2.0 / l).sqrt()
    }
}

/// Product coefficients from the product-to-sum identity, no grids involved.
fn convolve(l: f64, m: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (k, &ak) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            let c = ak * bj * amp(l, k) * amp(l, j) / 2.0;
            let d = k.abs_diff(j);
            out[d] += c / amp(l, d);
            if k + j < m {
                out[k + j] += c / amp(l, k + j);
            }
        }
    }
    out
}

fn band_limited(basis: &Arc<SpectralBasis>, coeffs: &[f64]) -> ScalarField {
    let mut c = vec![0.0; basis.modes()];
    c[..coeffs.len()].copy_from_slice(coeffs);
    ScalarField::from_coeffs(basis, c).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dealiased_product_is_exact(
        m_exp in 3u32..=8,
        len in 0.5f64..3.0,
        seed in proptest::collection::vec(-1.0f64..1.0, 256),
    ) {
        let m = 1usize << m_exp;
        let basis = SpectralBasis::new(len, m).unwrap();
        let half = m / 2;
        let a: Vec<f64> = seed[..half].to_vec();
        let b: Vec<f64> = seed[half..2 * half.min(128)].iter().chain(std::iter::repeat(&0.0)).take(half).copied().collect();
        let fa = band_limited(&basis, &a);
        let fb = band_limited(&basis, &b);
        let got = pointwise_product(&[&fa, &fb], true).unwrap();
        let want = convolve(len, m, &a, &b);
        let scale = want.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        for (g, w) in got.coeffs().iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12 * scale, "{g} vs {w}");
        }
    }

    #[test]
    fn round_trip_and_semigroup(
        m_idx in 0usize..3,
        values in proptest::collection::vec(-5.0f64..5.0, 256),
        alpha in -1.0f64..1.5,
        beta in -1.0f64..1.5,
    ) {
        let m = [8, 64, 256][m_idx];
        let basis = SpectralBasis::new(1.0, m).unwrap();
        let v = &values[..m];
        let back = basis.transform_inverse(&basis.transform_forward(v).unwrap()).unwrap();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        let err = v.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-12 * norm);

        let f = ScalarField::from_values(&basis, v).unwrap();
        let two = f.apply_a_power(alpha).apply_a_power(beta);
        let one = f.apply_a_power(alpha + beta);
        let d = (&two - &one).l2_norm();
        prop_assert!(d <= 1e-12 * one.l2_norm().max(1e-300));
        prop_assert_eq!(f.laplacian().coeffs()[0], 0.0);
    }
}

#[test]
fn gradient_squared_matches_finite_differences() {
    let basis = SpectralBasis::new(1.0, 32).unwrap();
    for seed in 0..5u64 {
        // smooth, band-limited to 16 modes so |∇f|² is representable
        let coeffs: Vec<f64> = (0..16)
            .map(|k| {
                let s = ((seed * 31 + k as u64 * 17) % 97) as f64 / 48.5 - 1.0;
                s / (1.0 + (k as f64 * PI).powi(2))
            })
            .collect();
        let f = band_limited(&basis, &coeffs);
        let g2 = gradient_squared(&f);
        let n = 4096;
        let h = 1.0 / n as f64;
        let mut worst = 0.0f64;
        for i in 2..n - 1 {
            let x = i as f64 * h;
            // fourth-order central difference
            let d = (f.eval(x - 2.0 * h) - 8.0 * f.eval(x - h) + 8.0 * f.eval(x + h) - f.eval(x + 2.0 * h)) / (12.0 * h);
            worst = worst.max((d * d - g2.eval(x)).abs());
        }
        assert!(worst <= 1e-6, "seed {seed}: {worst}");
    }
}

#[test]
fn norm_d_alpha_matches_compose_and_norm() {
    let basis = SpectralBasis::new(1.0, 64).unwrap();
    let f = ScalarField::from_fn(&basis, |x| (3.0 * x).sin() * x.exp());
    let direct = f.norm_d_alpha(1.5);
    let composed = f.apply_a_power(1.5).l2_norm();
    assert!((direct - composed).abs() <= 1e-12 * composed);
    let e1 = ScalarField::mode(&basis, 1);
    assert!((e1.norm_d_alpha(0.5) - (1.0 + PI * PI).sqrt()).abs() < 1e-12);
}

#[test]
fn laplacian_is_identity_minus_a() {
    let basis = SpectralBasis::new(2.0, 64).unwrap();
    let f = ScalarField::from_fn(&basis, |x| (x - 1.0).powi(3) - 0.4 * x);
    let lhs = f.laplacian();
    let rhs = &f - &f.apply_a_power(1.0);
    assert!((&lhs - &rhs).l2_norm() <= 1e-12 * lhs.l2_norm());
}
