//! Continuous-time algebraic Riccati equation by Newton-Kleinman iteration.
//!
//! Each Newton step solves one Lyapunov equation, vectorized into an `n^2 x n^2`
//! linear system. The first stabilizing gain comes from Bass's shifted
//! Lyapunov construction when `A` itself is not Hurwitz.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CareError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("R is not positive definite")]
    RNotPositiveDefinite,
    #[error("(A, B) is not stabilizable")]
    NotStabilizable,
    #[error("singular Lyapunov system")]
    SingularLyapunov,
    #[error("no convergence after {iterations} iterations, residual {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },
}

#[derive(Debug, Clone)]
pub struct CareSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub iterations: usize,
    /// `||A'P + PA - P B R^-1 B' P + Q||_F`.
    pub residual: f64,
}

const MAX_ITER: usize = 100;

/// Solves `A'X + XA + C = 0` for `X` by vectorization.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, CareError> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    // vec(A'X) = (I kron A') vec(X), vec(XA) = (A' kron I) vec(X)
    let lhs = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DMatrix::from_column_slice(n * n, 1, (-c).as_slice());
    let sol = lhs.lu().solve(&rhs).ok_or(CareError::SingularLyapunov)?;
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// True when every eigenvalue of `a` has real part below `-margin`.
pub fn is_hurwitz(a: &DMatrix<f64>, margin: f64) -> bool {
    a.clone().complex_eigenvalues().iter().all(|l| l.re < -margin)
}

pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn care_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r_inv: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let res = a.transpose() * p + p * a - p * b * r_inv * b.transpose() * p + q;
    res.norm()
}

/// Stabilizing gain for `(A, B)` with closed-loop poles left of `-(||A||_F + 1)`.
fn bass_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, CareError> {
    let n = a.nrows();
    let beta = a.norm() + 1.0;
    let shifted = -(a + DMatrix::<f64>::identity(n, n) * beta);
    // shifted * Z + Z * shifted' + 2BB' = 0, i.e. the Lyapunov form with A' = shifted
    let z = solve_lyapunov(&shifted.transpose(), &(b * b.transpose() * 2.0))?;
    let chol = z.clone().cholesky().ok_or(CareError::NotStabilizable)?;
    let z_inv = chol.inverse();
    let k = b.transpose() * z_inv;
    if !k.iter().all(|v| v.is_finite()) {
        return Err(CareError::NotStabilizable);
    }
    Ok(k)
}

/// Solves `A'P + PA - P B R^-1 B' P + Q = 0` for the stabilizing `P` and returns `K = R^-1 B' P`.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<CareSolution, CareError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(CareError::Dimension(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    let r_chol = r.clone().cholesky().ok_or(CareError::RNotPositiveDefinite)?;
    let r_inv = r_chol.inverse();

    let mut k = if is_hurwitz(a, 0.0) {
        DMatrix::zeros(m, n)
    } else {
        bass_gain(a, b)?
    };
    if !is_hurwitz(&(a - b * &k), 0.0) {
        return Err(CareError::NotStabilizable);
    }

    let mut p = DMatrix::<f64>::zeros(n, n);
    let mut iterations = 0;
    for it in 1..=MAX_ITER {
        iterations = it;
        let ak = a - b * &k;
        let c = q + k.transpose() * r * &k;
        let p_next = solve_lyapunov(&ak, &c)?;
        let delta = (&p_next - &p).norm();
        p = p_next;
        k = &r_inv * b.transpose() * &p;
        if delta <= 1e-13 * (1.0 + p.norm()) {
            break;
        }
    }
    let residual = care_residual(a, b, q, &r_inv, &p);
    if !(residual < 1e-8 * (1.0 + p.norm())) {
        return Err(CareError::NoConvergence { iterations, residual });
    }
    Ok(CareSolution {
        p,
        k,
        iterations,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Integrates the Riccati differential equation from P = 0 until it settles.
    fn riccati_flow(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: f64) -> DMatrix<f64> {
        let f = |p: &DMatrix<f64>| a.transpose() * p + p * a - p * b * b.transpose() * p / r + q;
        let mut p = DMatrix::zeros(a.nrows(), a.nrows());
        let h = 1e-3;
        for _ in 0..200_000 {
            let k1 = f(&p);
            let k2 = f(&(&p + &k1 * (h / 2.0)));
            let k3 = f(&(&p + &k2 * (h / 2.0)));
            let k4 = f(&(&p + &k3 * h));
            let step = (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            p += &step;
            if step.norm() < 1e-15 {
                break;
            }
        }
        p
    }

    #[test]
    fn double_integrator_closed_form() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::from_element(1, 1, 1.0);
        let sol = solve_care(&a, &b, &q, &r).unwrap();
        let s3 = 3f64.sqrt();
        assert!((sol.k[(0, 0)] - 1.0).abs() < 1e-9);
        assert!((sol.k[(0, 1)] - s3).abs() < 1e-9);
        let expect = DMatrix::from_row_slice(2, 2, &[s3, 1.0, 1.0, s3]);
        assert!((sol.p - expect).norm() < 1e-9);
    }

    #[test]
    fn stable_zero_input_is_lyapunov() {
        let a = -DMatrix::<f64>::identity(2, 2);
        let b = DMatrix::zeros(2, 1);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::from_element(1, 1, 1.0);
        let sol = solve_care(&a, &b, &q, &r).unwrap();
        assert!(sol.k.norm() < 1e-15);
        assert!((sol.p - DMatrix::identity(2, 2) * 0.5).norm() < 1e-12);
    }

    #[test]
    fn unstable_two_state_matches_riccati_flow() {
        let a = DMatrix::from_row_slice(2, 2, &[0.3, 1.0, 2.0, -0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[0.2, 1.0]);
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 0.5]));
        let r = 0.7;
        let sol = solve_care(&a, &b, &q, &DMatrix::from_element(1, 1, r)).unwrap();
        let oracle = riccati_flow(&a, &b, &q, r);
        assert!((&sol.p - &oracle).norm() < 1e-7 * (1.0 + oracle.norm()), "{} vs {}", sol.p, oracle);
        assert!(is_hurwitz(&(&a - &b * &sol.k), 1e-6));
    }

    #[test]
    fn uncontrollable_unstable_mode_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(solve_care(&a, &b, &q, &r).unwrap_err(), CareError::NotStabilizable);
    }

    #[test]
    fn lyapunov_solution_satisfies_equation() {
        let a = DMatrix::from_row_slice(3, 3, &[-2.0, 1.0, 0.0, 0.0, -1.0, 0.5, 0.3, 0.0, -3.0]);
        let c = DMatrix::from_row_slice(3, 3, &[2.0, 0.1, 0.0, 0.1, 1.0, 0.2, 0.0, 0.2, 3.0]);
        let x = solve_lyapunov(&a, &c).unwrap();
        assert!((a.transpose() * &x + &x * &a + &c).norm() < 1e-12);
    }
}
