//! Dense symmetric-matrix kernels: stochastic Lyapunov solves, spectral
//! abscissa, mean-square stability certificates and positive-semidefiniteness
//! checks.
//!
//! The central object is the generalised (stochastic) Lyapunov operator
//! `X -> A' X + X A + C' X C`. It is handled exactly by assembling its
//! `n^2 x n^2` vectorization (a sum of Kronecker products) and performing one
//! dense LU solve; at desk scale (`n` up to a few tens) this beats any
//! iterative scheme and yields a residual certificate.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::Result;

/// Relative tolerance accepted when checking symmetry of inputs.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// A dense real symmetric matrix.
///
/// Construction enforces finiteness and symmetry up to
/// `SYMMETRY_TOL * (1 + max|M|)`; the stored matrix is the exact symmetric
/// part `(M + M') / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    m: DMatrix<f64>,
}

impl SymMatrix {
    /// Validate and wrap a matrix, storing its symmetric part.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("symmetric matrix entries".into()));
        }
        let scale = 1.0 + m.amax();
        let asym = (&m - m.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric {
                asymmetry: asym,
                tol: SYMMETRY_TOL * scale,
            });
        }
        Ok(Self::of_symmetric_part(&m))
    }

    /// Wrap the symmetric part `(M + M') / 2` without tolerance checks.
    ///
    /// Used after solver steps that preserve symmetry analytically, to
    /// suppress floating-point drift.
    pub fn of_symmetric_part(m: &DMatrix<f64>) -> Self {
        let sym = (m + m.transpose()) * 0.5;
        SymMatrix { m: sym }
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix {
            m: DMatrix::zeros(dim, dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix {
            m: DMatrix::identity(dim, dim),
        }
    }

    /// Scalar wrapper, handy in tests and examples.
    pub fn scalar(v: f64) -> Self {
        SymMatrix {
            m: DMatrix::from_element(1, 1, v),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    /// Smallest eigenvalue (the symmetric spectrum is real).
    pub fn min_eigenvalue(&self) -> f64 {
        min_symmetric_eigenvalue(&self.m)
    }
}

impl std::ops::Deref for SymMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.m
    }
}

impl From<SymMatrix> for DMatrix<f64> {
    fn from(s: SymMatrix) -> DMatrix<f64> {
        s.m
    }
}

/// Outcome of a mean-square stability test for a pair `[A, C]`.
#[derive(Clone, Debug)]
pub struct StabilityReport {
    /// Max real part over the eigenvalues of the vectorized Lyapunov operator.
    pub spectral_abscissa: f64,
    pub l2_stable: bool,
    /// When stable, the positive-definite `Y` with `A'Y + YA + C'YC = -I`.
    pub lyapunov_witness: Option<SymMatrix>,
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Smallest eigenvalue of a symmetric matrix; the caller treats `m` as PSD
/// iff the returned value is `>= -tol * (1 + max|m|)`.
pub fn assert_psd(m: &SymMatrix, tol: f64) -> f64 {
    let min_eig = m.min_eigenvalue();
    let _ = tol;
    min_eig
}

/// `true` iff `min_eig(m) >= -tol * (1 + max|m|)`.
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    min_symmetric_eigenvalue(m) >= -tol * (1.0 + m.amax())
}

/// Max real part of the eigenvalues of a square matrix.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "spectral abscissa needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let eigs = a.complex_eigenvalues();
    Ok(eigs.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
}

/// Condition estimate `sigma_max / sigma_min` from singular values.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    let smax = sv.iter().copied().fold(0.0_f64, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Pre-factorized vectorization of `X -> A' X + X A + C' X C`, for repeated
/// solves against the same coefficient pair.
pub struct LyapunovOperator {
    dim: usize,
    op: DMatrix<f64>,
    lu: nalgebra::linalg::FullPivLU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    singular: bool,
}

impl LyapunovOperator {
    pub fn new(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || !c.is_square() || c.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "Lyapunov coefficients must be square of equal size, got {}x{} and {}x{}",
                a.nrows(),
                a.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        let op = vectorized_operator(a, c);
        let lu = op.clone().full_piv_lu();
        // Full pivoting puts the largest pivot first; rank deficiency shows
        // up as a tiny trailing pivot relative to the leading one.
        let u = lu.u();
        let lead = u[(0, 0)].abs().max(op.amax() * f64::EPSILON);
        let trail = (0..n * n).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
        let singular = lead == 0.0 || trail <= 1e-13 * lead;
        Ok(LyapunovOperator {
            dim: n,
            op,
            lu,
            singular,
        })
    }

    /// Solve `A' X + X A + C' X C + Q = 0` for symmetric `Q`.
    pub fn solve(&self, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if q.nrows() != self.dim || q.ncols() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "right-hand side is {}x{}, operator dimension is {}",
                q.nrows(),
                q.ncols(),
                self.dim
            )));
        }
        if self.singular {
            return Err(Error::SingularOperator);
        }
        let rhs = DVector::from_column_slice(q.as_slice());
        let sol = self.lu.solve(&(-rhs)).ok_or(Error::SingularOperator)?;
        let x = DMatrix::from_column_slice(self.dim, self.dim, sol.as_slice());
        Ok((&x + x.transpose()) * 0.5)
    }

    /// Max real part over the spectrum of the vectorized operator.
    pub fn spectral_abscissa(&self) -> f64 {
        let eigs = self.op.complex_eigenvalues();
        eigs.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }

    /// The assembled `n^2 x n^2` operator matrix (column-major vectorization).
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.op
    }
}

/// Vectorization of `X -> A' X + X A + C' X C` acting on `vec(X)`
/// (column-major): `I (x) A' + A' (x) I + C' (x) C'`.
pub fn vectorized_operator(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let at = a.transpose();
    let ct = c.transpose();
    let id = DMatrix::<f64>::identity(n, n);
    id.kronecker(&at) + at.kronecker(&id) + ct.kronecker(&ct)
}

/// Solve the stochastic Lyapunov equation `A' X + X A + C' X C + Q = 0`.
///
/// Returns the symmetric solution; fails with [`Error::SingularOperator`]
/// when the vectorized operator is rank-deficient.
pub fn solve_stochastic_lyapunov(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &SymMatrix,
) -> Result<SymMatrix> {
    let op = LyapunovOperator::new(a, c)?;
    if q.dim() != a.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "Q is {}x{}, coefficients are {}x{}",
            q.dim(),
            q.dim(),
            a.nrows(),
            a.nrows()
        )));
    }
    let x = op.solve(q.as_matrix())?;
    Ok(SymMatrix::of_symmetric_part(&x))
}

/// Decide mean-square stability of the pair `[A, C]`.
///
/// The pair is stable iff every eigenvalue of the vectorized operator of
/// `X -> A' X + X A + C' X C` has strictly negative real part (margin
/// `1e-10`). When stable, a strict Lyapunov witness `Y > 0` with
/// `A'Y + YA + C'YC = -I` is attached.
pub fn is_l2_stable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<StabilityReport> {
    let op = LyapunovOperator::new(a, c)?;
    let abscissa = op.spectral_abscissa();
    let stable = abscissa < -1e-10;
    let witness = if stable {
        let y = op.solve(&DMatrix::identity(a.nrows(), a.nrows()))?;
        Some(SymMatrix::of_symmetric_part(&y))
    } else {
        None
    };
    Ok(StabilityReport {
        spectral_abscissa: abscissa,
        l2_stable: stable,
        lyapunov_witness: witness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_lyapunov_cases() {
        // -2x + 2 = 0
        let x = solve_stochastic_lyapunov(&m1(-1.0), &m1(0.0), &SymMatrix::scalar(2.0)).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-14);
        // (-2 + 0.25) x + 1.75 = 0
        let x = solve_stochastic_lyapunov(&m1(-1.0), &m1(0.5), &SymMatrix::scalar(1.75)).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-14);
        // operator identically zero
        let err = solve_stochastic_lyapunov(&m1(0.0), &m1(0.0), &SymMatrix::scalar(1.0));
        assert!(matches!(err, Err(Error::SingularOperator)));
    }

    #[test]
    fn lyapunov_residual_on_2x2() {
        let a = DMatrix::from_row_slice(2, 2, &[-2.0, 0.3, -0.1, -1.5]);
        let c = DMatrix::from_row_slice(2, 2, &[0.2, 0.1, 0.0, 0.3]);
        let q = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 2.0])).unwrap();
        let x = solve_stochastic_lyapunov(&a, &c, &q).unwrap();
        let res = a.transpose() * x.as_matrix()
            + x.as_matrix() * &a
            + c.transpose() * x.as_matrix() * &c
            + q.as_matrix();
        assert!(res.amax() < 1e-10 * (1.0 + q.amax()));
        assert!(x.min_eigenvalue() > -1e-9);
    }

    #[test]
    fn spectral_abscissa_cases() {
        assert_eq!(spectral_abscissa(&m1(-1.0)).unwrap(), -1.0);
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!(spectral_abscissa(&rot).unwrap().abs() < 1e-9);
        let d = DMatrix::from_row_slice(2, 2, &[-2.0, 0.0, 0.0, 3.0]);
        assert!((spectral_abscissa(&d).unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn l2_stability_scalar_criterion() {
        // 2a + c^2 < 0 decides the scalar case
        let r = is_l2_stable(&m1(-1.0), &m1(0.5)).unwrap();
        assert!(r.l2_stable);
        let r = is_l2_stable(&m1(-0.1), &m1(1.0)).unwrap();
        assert!(!r.l2_stable);
        assert!(r.lyapunov_witness.is_none());
        // -2y + 1 = 0 -> witness 0.5
        let r = is_l2_stable(&m1(-1.0), &m1(0.0)).unwrap();
        let y = r.lyapunov_witness.unwrap();
        assert!((y[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn psd_checks() {
        assert!((assert_psd(&SymMatrix::identity(2), 1e-9) - 1.0).abs() < 1e-12);
        let d = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5])).unwrap();
        assert!((assert_psd(&d, 1e-9) + 0.5).abs() < 1e-12);
        let r1 = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        assert!(assert_psd(&r1, 1e-9).abs() < 1e-12);
    }

    #[test]
    fn symmetry_validation() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        assert!(matches!(SymMatrix::new(bad), Err(Error::NotSymmetric { .. })));
        let nan = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matches!(SymMatrix::new(nan), Err(Error::NonFinite(_))));
    }
}
