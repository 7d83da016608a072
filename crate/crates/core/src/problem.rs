//! Problem instances: coefficient blocks, assumption checks, and the scaled
//! and reduced coefficient families derived from them.
//!
//! An instance is the block data of the two-timescale state equation
//!
//! ```text
//! dX1 = [A11 X1 + A12 X2 + B1 u] dt            + [C11 X1 + C12 X2 + D1 u] dW
//! dX2 = [A21 X1 + A22 X2 + B2 u] dt / eps      + [C21 X1 + C22 X2 + D2 u] dW / sqrt(eps)
//! ```
//!
//! together with the quadratic cost weights `Q` (on the stacked state) and
//! `R` (on the control) and the horizon `T`.
//!
//! Validation checks the standing assumptions: `Q, R` strictly positive
//! definite, `A22` invertible, and the uncontrolled fast pair `[A22, C22]`
//! mean-square stable. Validation is advisory at the library level; solvers
//! accept unvalidated data, while the CLI refuses to run on a failing
//! instance unless forced.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::Error;
use crate::linalg::{self, condition_estimate, is_l2_stable, StabilityReport, SymMatrix};
use crate::Result;

/// Coefficient blocks of a slow-fast instance. Single source of truth.
#[derive(Clone, Debug)]
pub struct ProblemData {
    pub n1: usize,
    pub n2: usize,
    pub k: usize,
    pub a11: DMatrix<f64>,
    pub a12: DMatrix<f64>,
    pub a21: DMatrix<f64>,
    pub a22: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c11: DMatrix<f64>,
    pub c12: DMatrix<f64>,
    pub c21: DMatrix<f64>,
    pub c22: DMatrix<f64>,
    pub d1: DMatrix<f64>,
    pub d2: DMatrix<f64>,
    /// State weight on the stacked `(X1, X2)`, dimension `n1 + n2`.
    pub q: SymMatrix,
    /// Control weight, dimension `k`.
    pub r: SymMatrix,
    /// Time horizon.
    pub horizon: f64,
}

impl ProblemData {
    pub fn n(&self) -> usize {
        self.n1 + self.n2
    }

    pub fn q11(&self) -> DMatrix<f64> {
        self.q.view((0, 0), (self.n1, self.n1)).into_owned()
    }

    pub fn q12(&self) -> DMatrix<f64> {
        self.q.view((0, self.n1), (self.n1, self.n2)).into_owned()
    }

    pub fn q22(&self) -> DMatrix<f64> {
        self.q
            .view((self.n1, self.n1), (self.n2, self.n2))
            .into_owned()
    }

    /// Check that every block has the shape implied by `(n1, n2, k)`.
    pub fn check_dimensions(&self) -> Result<()> {
        let expect = |name: &str, m: &DMatrix<f64>, r: usize, c: usize| -> Result<()> {
            if m.nrows() != r || m.ncols() != c {
                return Err(Error::DimensionMismatch(format!(
                    "{name} must be {r}x{c}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            Ok(())
        };
        let (n1, n2, k) = (self.n1, self.n2, self.k);
        expect("A11", &self.a11, n1, n1)?;
        expect("A12", &self.a12, n1, n2)?;
        expect("A21", &self.a21, n2, n1)?;
        expect("A22", &self.a22, n2, n2)?;
        expect("B1", &self.b1, n1, k)?;
        expect("B2", &self.b2, n2, k)?;
        expect("C11", &self.c11, n1, n1)?;
        expect("C12", &self.c12, n1, n2)?;
        expect("C21", &self.c21, n2, n1)?;
        expect("C22", &self.c22, n2, n2)?;
        expect("D1", &self.d1, n1, k)?;
        expect("D2", &self.d2, n2, k)?;
        expect("Q", self.q.as_matrix(), n1 + n2, n1 + n2)?;
        expect("R", self.r.as_matrix(), k, k)?;
        if !(self.horizon > 0.0) {
            return Err(Error::DimensionMismatch(format!(
                "horizon T must be positive, got {}",
                self.horizon
            )));
        }
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<ProblemData> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<ProblemData> {
        let raw: ProblemJson = serde_json::from_str(text)?;
        raw.into_problem()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&ProblemJson::from_problem(self)).expect("serialize problem")
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string() + "\n")?;
        Ok(())
    }
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::DimensionMismatch(format!("{name} is empty")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::DimensionMismatch(format!(
            "{name} rows have inconsistent lengths"
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

/// On-disk schema: dimensions, horizon, and every block as row-major nested
/// arrays. Unknown keys are rejected.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemJson {
    n1: usize,
    n2: usize,
    k: usize,
    #[serde(rename = "T")]
    horizon: f64,
    #[serde(rename = "A11")]
    a11: Vec<Vec<f64>>,
    #[serde(rename = "A12")]
    a12: Vec<Vec<f64>>,
    #[serde(rename = "A21")]
    a21: Vec<Vec<f64>>,
    #[serde(rename = "A22")]
    a22: Vec<Vec<f64>>,
    #[serde(rename = "B1")]
    b1: Vec<Vec<f64>>,
    #[serde(rename = "B2")]
    b2: Vec<Vec<f64>>,
    #[serde(rename = "C11")]
    c11: Vec<Vec<f64>>,
    #[serde(rename = "C12")]
    c12: Vec<Vec<f64>>,
    #[serde(rename = "C21")]
    c21: Vec<Vec<f64>>,
    #[serde(rename = "C22")]
    c22: Vec<Vec<f64>>,
    #[serde(rename = "D1")]
    d1: Vec<Vec<f64>>,
    #[serde(rename = "D2")]
    d2: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
}

impl ProblemJson {
    fn from_problem(p: &ProblemData) -> Self {
        ProblemJson {
            n1: p.n1,
            n2: p.n2,
            k: p.k,
            horizon: p.horizon,
            a11: matrix_to_rows(&p.a11),
            a12: matrix_to_rows(&p.a12),
            a21: matrix_to_rows(&p.a21),
            a22: matrix_to_rows(&p.a22),
            b1: matrix_to_rows(&p.b1),
            b2: matrix_to_rows(&p.b2),
            c11: matrix_to_rows(&p.c11),
            c12: matrix_to_rows(&p.c12),
            c21: matrix_to_rows(&p.c21),
            c22: matrix_to_rows(&p.c22),
            d1: matrix_to_rows(&p.d1),
            d2: matrix_to_rows(&p.d2),
            q: matrix_to_rows(p.q.as_matrix()),
            r: matrix_to_rows(p.r.as_matrix()),
        }
    }

    fn into_problem(self) -> Result<ProblemData> {
        let data = ProblemData {
            n1: self.n1,
            n2: self.n2,
            k: self.k,
            a11: rows_to_matrix("A11", &self.a11)?,
            a12: rows_to_matrix("A12", &self.a12)?,
            a21: rows_to_matrix("A21", &self.a21)?,
            a22: rows_to_matrix("A22", &self.a22)?,
            b1: rows_to_matrix("B1", &self.b1)?,
            b2: rows_to_matrix("B2", &self.b2)?,
            c11: rows_to_matrix("C11", &self.c11)?,
            c12: rows_to_matrix("C12", &self.c12)?,
            c21: rows_to_matrix("C21", &self.c21)?,
            c22: rows_to_matrix("C22", &self.c22)?,
            d1: rows_to_matrix("D1", &self.d1)?,
            d2: rows_to_matrix("D2", &self.d2)?,
            q: SymMatrix::new(rows_to_matrix("Q", &self.q)?)?,
            r: SymMatrix::new(rows_to_matrix("R", &self.r)?)?,
            horizon: self.horizon,
        };
        data.check_dimensions()?;
        Ok(data)
    }
}

/// Compact coefficients with the `1/eps` drift and `1/sqrt(eps)` diffusion
/// scalings applied to the fast rows.
#[derive(Clone, Debug)]
pub struct ScaledCoefficients {
    pub epsilon: f64,
    pub a_eps: DMatrix<f64>,
    pub b_eps: DMatrix<f64>,
    pub c_eps: DMatrix<f64>,
    pub d_eps: DMatrix<f64>,
}

/// Assemble the compact coefficients for a given `eps` in `(0, 1]`.
pub fn scaled_coefficients(data: &ProblemData, epsilon: f64) -> Result<ScaledCoefficients> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::EpsilonOutOfRange(epsilon));
    }
    let (n1, n2, k, n) = (data.n1, data.n2, data.k, data.n());
    let ie = 1.0 / epsilon;
    let ise = 1.0 / epsilon.sqrt();

    let mut a = DMatrix::zeros(n, n);
    a.view_mut((0, 0), (n1, n1)).copy_from(&data.a11);
    a.view_mut((0, n1), (n1, n2)).copy_from(&data.a12);
    a.view_mut((n1, 0), (n2, n1)).copy_from(&(&data.a21 * ie));
    a.view_mut((n1, n1), (n2, n2)).copy_from(&(&data.a22 * ie));

    let mut b = DMatrix::zeros(n, k);
    b.view_mut((0, 0), (n1, k)).copy_from(&data.b1);
    b.view_mut((n1, 0), (n2, k)).copy_from(&(&data.b2 * ie));

    let mut c = DMatrix::zeros(n, n);
    c.view_mut((0, 0), (n1, n1)).copy_from(&data.c11);
    c.view_mut((0, n1), (n1, n2)).copy_from(&data.c12);
    c.view_mut((n1, 0), (n2, n1)).copy_from(&(&data.c21 * ise));
    c.view_mut((n1, n1), (n2, n2)).copy_from(&(&data.c22 * ise));

    let mut d = DMatrix::zeros(n, k);
    d.view_mut((0, 0), (n1, k)).copy_from(&data.d1);
    d.view_mut((n1, 0), (n2, k)).copy_from(&(&data.d2 * ise));

    Ok(ScaledCoefficients {
        epsilon,
        a_eps: a,
        b_eps: b,
        c_eps: c,
        d_eps: d,
    })
}

/// Coefficients of the reduced (eps = 0) problem, obtained by eliminating the
/// fast state through `A22^{-1}`.
#[derive(Clone, Debug)]
pub struct ReducedCoefficients {
    pub a_s: DMatrix<f64>,
    pub b_s: DMatrix<f64>,
    pub c1s: DMatrix<f64>,
    pub c2s: DMatrix<f64>,
    pub d1s: DMatrix<f64>,
    pub d2s: DMatrix<f64>,
    pub q_s: SymMatrix,
    pub l_s: DMatrix<f64>,
    pub r_s: SymMatrix,
}

/// Derive the nine reduced coefficient matrices. Fails when `A22` is
/// numerically singular (condition estimate above `1e12`).
pub fn reduced_coefficients(data: &ProblemData) -> Result<ReducedCoefficients> {
    data.check_dimensions()?;
    let cond = condition_estimate(&data.a22);
    if !(cond < 1e12) {
        return Err(Error::SingularA22(cond));
    }
    let a22_inv = data
        .a22
        .clone()
        .try_inverse()
        .ok_or(Error::SingularA22(cond))?;
    let a22_inv_t = a22_inv.transpose();
    let q11 = data.q11();
    let q12 = data.q12();
    let q22 = data.q22();

    let a_s = &data.a11 - &data.a12 * &a22_inv * &data.a21;
    let b_s = &data.b1 - &data.a12 * &a22_inv * &data.b2;
    let c1s = &data.c11 - &data.c12 * &a22_inv * &data.a21;
    let c2s = &data.c21 - &data.c22 * &a22_inv * &data.a21;
    let d1s = &data.d1 - &data.c12 * &a22_inv * &data.b2;
    let d2s = &data.d2 - &data.c22 * &a22_inv * &data.b2;
    let q_s = &q11
        - &q12 * &a22_inv * &data.a21
        - data.a21.transpose() * &a22_inv_t * q12.transpose()
        + data.a21.transpose() * &a22_inv_t * &q22 * &a22_inv * &data.a21;
    let l_s = data.b2.transpose() * &a22_inv_t * (&q22 * &a22_inv * &data.a21 - q12.transpose());
    let r_s = data.r.as_matrix()
        + data.b2.transpose() * &a22_inv_t * &q22 * &a22_inv * &data.b2;

    Ok(ReducedCoefficients {
        a_s,
        b_s,
        c1s,
        c2s,
        d1s,
        d2s,
        q_s: SymMatrix::of_symmetric_part(&q_s),
        l_s,
        r_s: SymMatrix::of_symmetric_part(&r_s),
    })
}

/// Per-check outcome of the standing-assumption validation.
#[derive(Clone, Debug)]
pub struct ValidationReport {
    pub q_positive: bool,
    pub q_min_eigenvalue: f64,
    pub r_positive: bool,
    pub r_min_eigenvalue: f64,
    pub a22_invertible: bool,
    pub a22_condition: f64,
    pub fast_pair_l2_stable: StabilityReport,
    pub overall_pass: bool,
}

impl ValidationReport {
    /// Name of the first failing check, if any.
    pub fn first_failure(&self) -> Option<&'static str> {
        if !self.q_positive {
            Some("q_positive")
        } else if !self.r_positive {
            Some("r_positive")
        } else if !self.a22_invertible {
            Some("a22_invertible")
        } else if !self.fast_pair_l2_stable.l2_stable {
            Some("fast_pair_l2_stable")
        } else {
            None
        }
    }
}

/// Check the standing assumptions: strict positivity of `Q` and `R`,
/// invertibility of `A22`, and mean-square stability of `[A22, C22]`.
pub fn validate(data: &ProblemData) -> Result<ValidationReport> {
    data.check_dimensions()?;
    let q_min = data.q.min_eigenvalue();
    let r_min = data.r.min_eigenvalue();
    let q_positive = q_min > 1e-10;
    let r_positive = r_min > 1e-10;
    let cond = condition_estimate(&data.a22);
    let a22_invertible = cond < 1e12;
    let fast = is_l2_stable(&data.a22, &data.c22)?;
    let overall = q_positive && r_positive && a22_invertible && fast.l2_stable;
    if let Some(w) = &fast.lyapunov_witness {
        // The witness must certify strictness; this is structural, not data-dependent.
        debug_assert!(w.min_eigenvalue() > 0.0);
        debug_assert!(
            linalg::min_symmetric_eigenvalue(
                &(data.a22.transpose() * w.as_matrix()
                    + w.as_matrix() * &data.a22
                    + data.c22.transpose() * w.as_matrix() * &data.c22)
            ) < 1e-8
        );
    }
    Ok(ValidationReport {
        q_positive,
        q_min_eigenvalue: q_min,
        r_positive,
        r_min_eigenvalue: r_min,
        a22_invertible,
        a22_condition: cond,
        fast_pair_l2_stable: fast,
        overall_pass: overall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{coupled_scalar, coupled_scalar_noise};

    #[test]
    fn validate_reference_instance() {
        let rep = validate(&coupled_scalar()).unwrap();
        assert!(rep.overall_pass);
        assert!(rep.first_failure().is_none());
    }

    #[test]
    fn validate_flags_singular_a22() {
        let mut data = coupled_scalar();
        data.a22[(0, 0)] = 0.0;
        let rep = validate(&data).unwrap();
        assert!(!rep.a22_invertible);
        assert!(!rep.overall_pass);
        assert_eq!(rep.first_failure(), Some("a22_invertible"));
    }

    #[test]
    fn validate_flags_semidefinite_q() {
        let mut data = coupled_scalar();
        data.q = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        let rep = validate(&data).unwrap();
        assert!(!rep.q_positive);
        assert!(!rep.overall_pass);
    }

    #[test]
    fn scaled_blocks() {
        let data = coupled_scalar();
        let sc = scaled_coefficients(&data, 1.0).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, -1.0]);
        assert_eq!(sc.a_eps, want);
        let sc = scaled_coefficients(&data, 0.25).unwrap();
        assert_eq!(sc.a_eps[(1, 0)], 4.0);
        assert_eq!(sc.a_eps[(1, 1)], -4.0);
        assert_eq!(sc.c_eps[(1, 0)], 0.0);
        assert!(matches!(
            scaled_coefficients(&data, 0.0),
            Err(Error::EpsilonOutOfRange(_))
        ));
    }

    #[test]
    fn scaled_blocks_bit_exact_for_pow2_eps() {
        let data = coupled_scalar_noise();
        for eps in [1.0, 0.25, 0.0625, 1.0 / 64.0] {
            let sc = scaled_coefficients(&data, eps).unwrap();
            let ie = 1.0 / eps;
            let ise = 1.0 / eps.sqrt();
            assert_eq!(sc.a_eps[(1, 0)], data.a21[(0, 0)] * ie);
            assert_eq!(sc.a_eps[(1, 1)], data.a22[(0, 0)] * ie);
            assert_eq!(sc.b_eps[(1, 0)], data.b2[(0, 0)] * ie);
            assert_eq!(sc.c_eps[(1, 0)], data.c21[(0, 0)] * ise);
            assert_eq!(sc.c_eps[(1, 1)], data.c22[(0, 0)] * ise);
            assert_eq!(sc.d_eps[(1, 0)], data.d2[(0, 0)] * ise);
            assert_eq!(sc.a_eps[(0, 0)], data.a11[(0, 0)]);
            assert_eq!(sc.d_eps[(0, 0)], data.d1[(0, 0)]);
        }
    }

    #[test]
    fn reduced_coefficients_reference_values() {
        let rc = reduced_coefficients(&coupled_scalar()).unwrap();
        assert!((rc.a_s[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((rc.b_s[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((rc.q_s[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((rc.l_s[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((rc.r_s[(0, 0)] - 2.0).abs() < 1e-14);
        assert_eq!(rc.c1s[(0, 0)], 0.0);
        assert_eq!(rc.c2s[(0, 0)], 0.0);
        assert_eq!(rc.d1s[(0, 0)], 0.0);
        assert_eq!(rc.d2s[(0, 0)], 0.0);
    }

    #[test]
    fn reduced_coefficients_decoupled_blocks() {
        let mut data = coupled_scalar();
        data.a12[(0, 0)] = 0.0;
        data.a21[(0, 0)] = 0.0;
        let rc = reduced_coefficients(&data).unwrap();
        assert_eq!(rc.a_s, data.a11);
        assert_eq!(rc.b_s, data.b1);
        assert_eq!(rc.q_s.as_matrix(), &data.q11());
        assert_eq!(rc.l_s[(0, 0)], 0.0);
        // Rs = R + B2' A22^{-T} Q22 A22^{-1} B2 = 1 + 1 = 2
        assert!((rc.r_s[(0, 0)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn reduced_coefficients_with_noise_blocks() {
        // Independent scalar evaluation of the defining formulas with
        // A22 = -1: each "- X A22^{-1} Y" term becomes "+ X Y".
        let rc = reduced_coefficients(&coupled_scalar_noise()).unwrap();
        assert!((rc.c1s[(0, 0)] - 0.3).abs() < 1e-14); // 0.2 + 0.1*1
        assert!((rc.c2s[(0, 0)] - 0.6).abs() < 1e-14); // 0.1 + 0.5*1
        assert!((rc.d1s[(0, 0)] - 0.2).abs() < 1e-14); // 0.1 + 0.1*1
        assert!((rc.d2s[(0, 0)] - 0.7).abs() < 1e-14); // 0.2 + 0.5*1
        assert!((rc.a_s[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((rc.q_s[(0, 0)] - 2.0).abs() < 1e-14);
        assert!((rc.r_s[(0, 0)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let data = coupled_scalar_noise();
        let text = data.to_json_string();
        let back = ProblemData::from_json_str(&text).unwrap();
        assert_eq!(back.a22, data.a22);
        assert_eq!(back.q.as_matrix(), data.q.as_matrix());
        assert_eq!(back.horizon, data.horizon);

        let with_extra = text.replacen('{', "{\n  \"unknown_key\": 1,", 1);
        assert!(ProblemData::from_json_str(&with_extra).is_err());
    }
}
