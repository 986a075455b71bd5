//! Dense Bartels–Stewart solver for `Fᵀ X + X F = C`.
//!
//! `F` is reduced to complex Schur form `F = U T Uᴴ`; the transformed
//! equation `Tᴴ Y + Y T = Uᴴ C U` is then solved by forward substitution,
//! since `Tᴴ` is lower and `T` upper triangular.

use nalgebra::{Complex, DMatrix, Schur};

use crate::error::{Error, Result};

/// Solution of a Lyapunov equation together with the spectrum of `F`
/// read off the Schur diagonal.
#[derive(Debug, Clone)]
pub struct LyapunovSolution {
    pub x: DMatrix<f64>,
    pub eigenvalues: Vec<Complex<f64>>,
}

pub fn solve_lyapunov(f: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<LyapunovSolution> {
    let n = f.nrows();
    assert_eq!(f.ncols(), n, "F must be square");
    assert_eq!(c.shape(), (n, n), "C must match F");

    let fc: DMatrix<Complex<f64>> = f.map(|v| Complex::new(v, 0.0));
    let (u, t) = Schur::new(fc).unpack();
    let cc: DMatrix<Complex<f64>> = c.map(|v| Complex::new(v, 0.0));
    let rhs = u.adjoint() * cc * &u;

    let mut y = DMatrix::<Complex<f64>>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = rhs[(i, j)];
            for k in 0..i {
                acc -= t[(k, i)].conj() * y[(k, j)];
            }
            for k in 0..j {
                acc -= y[(i, k)] * t[(k, j)];
            }
            let denom = t[(i, i)].conj() + t[(j, j)];
            if denom.norm() <= f64::EPSILON * t[(i, i)].norm().max(t[(j, j)].norm()).max(1.0) {
                return Err(Error::SingularLyapunov(denom.norm()));
            }
            y[(i, j)] = acc / denom;
        }
    }
    let x = (&u * y * u.adjoint()).map(|v| v.re);
    let x = (&x + x.transpose()) * 0.5;
    let eigenvalues = (0..n).map(|i| t[(i, i)]).collect();
    Ok(LyapunovSolution { x, eigenvalues })
}
