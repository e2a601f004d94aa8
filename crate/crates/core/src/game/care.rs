//! Continuous algebraic Riccati equation by Kleinman–Newton iteration.
//!
//! Each Newton step solves a Lyapunov equation through its vectorized
//! Kronecker form, which is exact for the small state dimensions used here.

use nalgebra::{DMatrix, DVector};

use crate::error::ControlError;

pub const MAX_ITERATIONS: usize = 100;
pub const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct CareSolution {
    pub p: DMatrix<f64>,
    pub iterations: usize,
    /// Frobenius norm of `AᵀP + PA − P B R⁻¹ Bᵀ P + Q`.
    pub residual: f64,
}

/// Solves `Aᵀ X + X A + Q = 0` for `X`.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, ControlError> {
    let n = a.nrows();
    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    // column-major vec: vec(AᵀX) = (I ⊗ Aᵀ) vec X, vec(XA) = (Aᵀ ⊗ I) vec X
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let x = op.lu().solve(&rhs).ok_or(ControlError::SingularLyapunov)?;
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    Ok(symmetrize(&x))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    (a.transpose() * p + p * a - p * b * r_inv * b.transpose() * p + q).norm()
}

/// Largest real part among the eigenvalues of `m`.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    spectral_abscissa(m) < 0.0
}

/// A stabilizing gain. Zero if `A` is already Hurwitz, otherwise Bass's
/// pole-shifting construction `K = Bᵀ Z⁻¹` with
/// `(A + βI) Z + Z (A + βI)ᵀ = 2 B Bᵀ`, where `β` makes `A + βI` anti-stable.
fn initial_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, ControlError> {
    let n = a.nrows();
    let eigs = a.complex_eigenvalues();
    if eigs.iter().all(|l| l.re < 0.0) {
        return Ok(DMatrix::zeros(b.ncols(), n));
    }
    let lowest = eigs.iter().map(|l| l.re).fold(f64::INFINITY, f64::min);
    let beta = (-lowest).max(0.0) + 1.0;
    let shifted = -(a + DMatrix::identity(n, n) * beta);
    // Lyapunov form with A_arg = −(A + βI)ᵀ
    let z = solve_lyapunov(&shifted.transpose(), &(b * b.transpose() * 2.0))?;
    let z_inv = z.clone().cholesky().ok_or(ControlError::Unstabilizable)?.inverse();
    let k = b.transpose() * z_inv;
    if !is_hurwitz(&(a - b * &k)) {
        return Err(ControlError::Unstabilizable);
    }
    Ok(k)
}

/// Stabilizing solution of `0 = AᵀP + PA − P B R⁻¹ Bᵀ P + Q`.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<CareSolution, ControlError> {
    let r_chol = r.clone().cholesky().ok_or(ControlError::InputWeightNotPd)?;
    let r_inv = r_chol.inverse();
    let mut k = initial_gain(a, b)?;
    let mut best: Option<(f64, DMatrix<f64>, usize)> = None;
    let mut stalled = 0;
    let mut iterations = 0;
    for it in 1..=MAX_ITERATIONS {
        iterations = it;
        let a_cl = a - b * &k;
        let rhs = q + k.transpose() * r * &k;
        let p = solve_lyapunov(&a_cl, &rhs)?;
        k = r_chol.solve(&(b.transpose() * &p));
        let residual = care_residual(a, b, q, &r_inv, &p);
        if residual < RESIDUAL_TOL {
            // one extra Newton step is nearly free and lands at rounding level
            let polished = solve_lyapunov(&(a - b * &k), &(q + k.transpose() * r * &k))?;
            let polished_res = care_residual(a, b, q, &r_inv, &polished);
            let (p, residual) = if polished_res <= residual {
                (polished, polished_res)
            } else {
                (p, residual)
            };
            return Ok(CareSolution {
                p,
                iterations: it,
                residual,
            });
        }
        if best.as_ref().is_none_or(|(r_best, _, _)| residual < *r_best) {
            best = Some((residual, p, it));
            stalled = 0;
        } else {
            // rounding floor reached; further Newton steps cannot help
            stalled += 1;
            if stalled >= 3 {
                break;
            }
        }
    }
    Err(ControlError::NotConverged {
        iterations,
        residual: best.map_or(f64::INFINITY, |b| b.0),
    })
}
