//! The reduced (eps = 0) problem: a differential Riccati equation for the
//! slow block coupled with a stochastic algebraic Riccati equation (ARE) for
//! the fast block.
//!
//! The fast ARE, parametrised by the slow block `P11`, is
//!
//! ```text
//! A22' P + P A22 + C22' P C22 + Q22 + C12' P11 C12
//!   - M' Delta^{-1} M = 0,      M = B2' P + D2' P C22 + D1' P11 C12,
//!                               Delta = R + D1' P11 D1 + D2' P D2 > 0,
//! ```
//!
//! and its unique positive-definite stabilizing solution defines the map
//! `P22 = h2(P11)`. It is solved by Newton–Kleinman iteration: starting from
//! the zero gain (valid because the uncontrolled fast pair is mean-square
//! stable), each step performs one stochastic Lyapunov solve on the closed
//! loop `(A22 + B2 F, C22 + D2 F)`. The first iterate equals the linear
//! upper bound [`h2_linear_bound`]; iterates decrease monotonically to the
//! solution with a residual certificate at convergence.
//!
//! The slow equation is integrated backward with every right-hand-side
//! evaluation calling `h2` (warm-started from the previous gain), and the
//! off-diagonal block is recovered from the closed form
//!
//! ```text
//! P12 = -[P11 A12 + A21' P22 + C11' P11 C12 + C21' P22 C22 + Q12
//!         + (P11 B1 + C11' P11 D1 + C21' P22 D2) F2] (A22 + B2 F2)^{-1}.
//! ```
//!
//! [`lyapunov_iteration_check`] implements the independent constructive
//! scheme that replaces the Riccati solve by a sequence of differential
//! Lyapunov equations with frozen gains; its iterates decrease monotonically
//! and must land on the same solution.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::fmt;
use crate::linalg::{
    condition_estimate, min_symmetric_eigenvalue, spectral_abscissa, LyapunovOperator, SymMatrix,
};
use crate::ode::{integrate_adaptive, uniform_grid, DenseTrajectory, StepControl};
use crate::problem::{reduced_coefficients, ProblemData, ReducedCoefficients};
use crate::riccati::DELTA_FLOOR;
use crate::Result;

const NEWTON_MAX_ITERS: usize = 80;
const NEWTON_REL_TOL: f64 = 1e-13;

/// Stabilizing solution of the fast algebraic Riccati equation at a fixed
/// slow block.
#[derive(Clone, Debug)]
pub struct AreSolution {
    /// Positive-definite fast Riccati block `h2(P11)`.
    pub p22: SymMatrix,
    /// Fast feedback gain `F2`.
    pub f2: DMatrix<f64>,
    /// Spectral abscissa of `A22 + B2 F2` (negative at a valid solution).
    pub closed_loop_abscissa: f64,
    pub newton_iters: usize,
}

/// Residual of the fast ARE at the pair `(P11, P22)`.
pub fn are_residual(p11: &DMatrix<f64>, p22: &DMatrix<f64>, data: &ProblemData) -> Result<DMatrix<f64>> {
    let qh = data.q22() + data.c12.transpose() * p11 * &data.c12;
    let rh = data.r.as_matrix() + data.d1.transpose() * p11 * &data.d1;
    let cross = data.d1.transpose() * p11 * &data.c12;
    let m = data.b2.transpose() * p22 + data.d2.transpose() * p22 * &data.c22 + &cross;
    let delta = &rh + data.d2.transpose() * p22 * &data.d2;
    let dmin = min_symmetric_eigenvalue(&delta);
    if dmin <= DELTA_FLOOR {
        return Err(Error::DeltaNotPositive {
            time: None,
            min_eig: dmin,
        });
    }
    let delta_inv = delta.try_inverse().ok_or(Error::DeltaNotPositive {
        time: None,
        min_eig: dmin,
    })?;
    Ok(data.a22.transpose() * p22
        + p22 * &data.a22
        + data.c22.transpose() * p22 * &data.c22
        + qh
        - m.transpose() * delta_inv * m)
}

pub(crate) fn solve_h2_mat(
    p11: &DMatrix<f64>,
    data: &ProblemData,
    warm: Option<&DMatrix<f64>>,
) -> Result<AreSolution> {
    match newton_kleinman(p11, data, warm) {
        Ok(sol) => Ok(sol),
        Err(e) if warm.is_some() => match e {
            // A stale warm start can leave the stabilizing basin; restart cold.
            Error::NoStabilizingSolution(_) | Error::SingularOperator => {
                newton_kleinman(p11, data, None)
            }
            other => Err(other),
        },
        Err(e) => Err(e),
    }
}

fn newton_kleinman(
    p11: &DMatrix<f64>,
    data: &ProblemData,
    warm: Option<&DMatrix<f64>>,
) -> Result<AreSolution> {
    let n2 = data.n2;
    let k = data.k;
    let qh = data.q22() + data.c12.transpose() * p11 * &data.c12;
    let qh = (&qh + qh.transpose()) * 0.5;
    let rh = data.r.as_matrix() + data.d1.transpose() * p11 * &data.d1;
    let rh = (&rh + rh.transpose()) * 0.5;
    let cross = data.d1.transpose() * p11 * &data.c12;

    let mut f = warm.cloned().unwrap_or_else(|| DMatrix::zeros(k, n2));
    let mut p_prev: Option<DMatrix<f64>> = None;
    let mut iters = 0;

    loop {
        iters += 1;
        if iters > NEWTON_MAX_ITERS {
            let gap = p_prev.map(|p| p.amax()).unwrap_or(f64::NAN);
            return Err(Error::NoStabilizingSolution(format!(
                "Newton iteration exceeded {NEWTON_MAX_ITERS} steps (last iterate magnitude {gap:.3e})"
            )));
        }
        let acl = &data.a22 + &data.b2 * &f;
        let ccl = &data.c22 + &data.d2 * &f;
        let rhs_q = &qh + f.transpose() * &rh * &f + cross.transpose() * &f + f.transpose() * &cross;
        let rhs_q = (&rhs_q + rhs_q.transpose()) * 0.5;
        let op = LyapunovOperator::new(&acl, &ccl)?;
        let p = op.solve(&rhs_q).map_err(|e| match e {
            Error::SingularOperator => Error::NoStabilizingSolution(
                "closed-loop Lyapunov operator became singular".into(),
            ),
            other => other,
        })?;
        if p.iter().any(|v| !v.is_finite()) || p.amax() > 1e10 {
            return Err(Error::NoStabilizingSolution(
                "Newton iteration diverged".into(),
            ));
        }
        let delta = &rh + data.d2.transpose() * &p * &data.d2;
        let dmin = min_symmetric_eigenvalue(&delta);
        if dmin <= DELTA_FLOOR {
            return Err(Error::DeltaNotPositive {
                time: None,
                min_eig: dmin,
            });
        }
        let delta_inv = delta.try_inverse().ok_or(Error::DeltaNotPositive {
            time: None,
            min_eig: dmin,
        })?;
        f = -(&delta_inv) * (data.b2.transpose() * &p + data.d2.transpose() * &p * &data.c22 + &cross);

        let converged = p_prev
            .as_ref()
            .map(|prev| (&p - prev).amax() <= NEWTON_REL_TOL * (1.0 + p.amax()))
            .unwrap_or(false);
        if converged {
            let acl = &data.a22 + &data.b2 * &f;
            let abscissa = spectral_abscissa(&acl)?;
            if abscissa >= 0.0 {
                return Err(Error::NoStabilizingSolution(format!(
                    "closed-loop spectral abscissa {abscissa:.3e} is not negative"
                )));
            }
            let p_min = min_symmetric_eigenvalue(&p);
            if p_min <= 1e-10 {
                return Err(Error::NoStabilizingSolution(format!(
                    "converged iterate is not positive definite (min eigenvalue {p_min:.3e})"
                )));
            }
            let res = are_residual(p11, &p, data)?;
            if res.amax() > 1e-10 * (1.0 + p.amax()) {
                return Err(Error::NoStabilizingSolution(format!(
                    "converged iterate fails the residual certificate ({:.3e})",
                    res.amax()
                )));
            }
            return Ok(AreSolution {
                p22: SymMatrix::of_symmetric_part(&p),
                f2: f,
                closed_loop_abscissa: abscissa,
                newton_iters: iters,
            });
        }
        p_prev = Some(p);
    }
}

/// Solve the fast ARE at a fixed slow block; returns the unique
/// positive-definite stabilizing solution (the map `h2`).
pub fn solve_h2(p11: &SymMatrix, data: &ProblemData) -> Result<AreSolution> {
    solve_h2_mat(p11.as_matrix(), data, None)
}

/// Linear upper bound on `h2`: the solution of the uncontrolled Lyapunov
/// equation `A22' X + X A22 + C22' X C22 + Q22 + C12' P11 C12 = 0`.
pub fn h2_linear_bound(p11: &DMatrix<f64>, data: &ProblemData) -> Result<SymMatrix> {
    let q = data.q22() + data.c12.transpose() * p11 * &data.c12;
    let op = LyapunovOperator::new(&data.a22, &data.c22)?;
    let x = op.solve(&((&q + q.transpose()) * 0.5))?;
    Ok(SymMatrix::of_symmetric_part(&x))
}

/// Off-diagonal block of the reduced solution from `(P11, P22)` via the
/// closed form through the stable closed loop `A22 + B2 F2`.
pub fn compute_p12(
    p11: &DMatrix<f64>,
    p22: &DMatrix<f64>,
    data: &ProblemData,
) -> Result<DMatrix<f64>> {
    let (f2, _delta) = fast_gain(p11, p22, data)?;
    let acl = &data.a22 + &data.b2 * &f2;
    let cond = condition_estimate(&acl);
    if !(cond < 1e12) {
        return Err(Error::SingularClosedLoop(cond));
    }
    let acl_inv = acl.try_inverse().ok_or(Error::SingularClosedLoop(cond))?;
    let num = p11 * &data.a12
        + data.a21.transpose() * p22
        + data.c11.transpose() * p11 * &data.c12
        + data.c21.transpose() * p22 * &data.c22
        + data.q12()
        + (p11 * &data.b1 + data.c11.transpose() * p11 * &data.d1 + data.c21.transpose() * p22 * &data.d2)
            * &f2;
    Ok(-num * acl_inv)
}

fn delta_bar(p11: &DMatrix<f64>, p22: &DMatrix<f64>, data: &ProblemData) -> Result<DMatrix<f64>> {
    let delta = data.r.as_matrix()
        + data.d1.transpose() * p11 * &data.d1
        + data.d2.transpose() * p22 * &data.d2;
    let delta = (&delta + delta.transpose()) * 0.5;
    let dmin = min_symmetric_eigenvalue(&delta);
    if dmin <= DELTA_FLOOR {
        return Err(Error::DeltaNotPositive {
            time: None,
            min_eig: dmin,
        });
    }
    Ok(delta)
}

fn fast_gain(
    p11: &DMatrix<f64>,
    p22: &DMatrix<f64>,
    data: &ProblemData,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let delta = delta_bar(p11, p22, data)?;
    let delta_inv = delta.clone().try_inverse().ok_or(Error::DeltaNotPositive {
        time: None,
        min_eig: min_symmetric_eigenvalue(&delta),
    })?;
    let f2 = -delta_inv
        * (data.b2.transpose() * p22
            + data.d1.transpose() * p11 * &data.c12
            + data.d2.transpose() * p22 * &data.c22);
    Ok((f2, delta))
}

/// Reduced feedback gains `(F1, F2)` at the triple `(P11, P12, P22)`.
pub fn reduced_gains(
    p11: &DMatrix<f64>,
    p12: &DMatrix<f64>,
    p22: &DMatrix<f64>,
    data: &ProblemData,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let delta = delta_bar(p11, p22, data)?;
    let delta_inv = delta.try_inverse().ok_or(Error::DeltaNotPositive {
        time: None,
        min_eig: f64::NAN,
    })?;
    let f1 = -(&delta_inv)
        * (data.b1.transpose() * p11
            + data.b2.transpose() * p12.transpose()
            + data.d1.transpose() * p11 * &data.c11
            + data.d2.transpose() * p22 * &data.c21);
    let f2 = -delta_inv
        * (data.b2.transpose() * p22
            + data.d1.transpose() * p11 * &data.c12
            + data.d2.transpose() * p22 * &data.c22);
    Ok((f1, f2))
}

/// Right-hand side of the reduced differential Riccati equation at an
/// explicit pair `(P11, P22)`, in reduced coefficients:
///
/// ```text
/// As' P11 + P11 As + C1s' P11 C1s + C2s' P22 C2s + Qs - Ms' Ds^{-1} Ms
/// ```
pub fn reduced_dre_rhs(
    p11: &DMatrix<f64>,
    p22: &DMatrix<f64>,
    rc: &ReducedCoefficients,
) -> Result<DMatrix<f64>> {
    let ds = rc.r_s.as_matrix()
        + rc.d1s.transpose() * p11 * &rc.d1s
        + rc.d2s.transpose() * p22 * &rc.d2s;
    let ds = (&ds + ds.transpose()) * 0.5;
    let dmin = min_symmetric_eigenvalue(&ds);
    if dmin <= DELTA_FLOOR {
        return Err(Error::DeltaNotPositive {
            time: None,
            min_eig: dmin,
        });
    }
    let ds_inv = ds.try_inverse().ok_or(Error::DeltaNotPositive {
        time: None,
        min_eig: dmin,
    })?;
    let ms = rc.b_s.transpose() * p11
        + rc.d1s.transpose() * p11 * &rc.c1s
        + rc.d2s.transpose() * p22 * &rc.c2s
        + &rc.l_s;
    let val = rc.a_s.transpose() * p11
        + p11 * &rc.a_s
        + rc.c1s.transpose() * p11 * &rc.c1s
        + rc.c2s.transpose() * p22 * &rc.c2s
        + rc.q_s.as_matrix()
        - ms.transpose() * ds_inv * ms;
    Ok((&val + val.transpose()) * 0.5)
}

/// Backward-time solution of the reduced system on `[0, T]`.
#[derive(Clone, Debug)]
pub struct ReducedSolution {
    /// Grid increasing from 0 to T.
    pub grid: Vec<f64>,
    pub p11bar: Vec<SymMatrix>,
    /// `h2(P11bar)` pointwise; nonzero at `t = T`.
    pub p22bar: Vec<SymMatrix>,
    pub p12bar: Vec<DMatrix<f64>>,
    pub f1bar: Vec<DMatrix<f64>>,
    pub f2bar: Vec<DMatrix<f64>>,
    pub delta_bar_min: Vec<f64>,
    pub delta_s_min: Vec<f64>,
    n1: usize,
    n2: usize,
    horizon: f64,
    /// Dense `P11` data in reversed time `s = T - t`.
    dense: DenseTrajectory,
}

/// Algebraically consistent reduced blocks at one time point.
#[derive(Clone, Debug)]
pub struct ReducedPoint {
    pub p11: DMatrix<f64>,
    pub p12: DMatrix<f64>,
    pub p22: DMatrix<f64>,
    pub f1: DMatrix<f64>,
    pub f2: DMatrix<f64>,
}

impl ReducedSolution {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Slow block at an arbitrary time by cubic Hermite interpolation.
    pub fn eval_p11(&self, t: f64) -> DMatrix<f64> {
        let y = self.dense.eval(self.horizon - t);
        let p = DMatrix::from_column_slice(self.n1, self.n1, y.as_slice());
        (&p + p.transpose()) * 0.5
    }

    /// Evaluator that recomputes the algebraic blocks exactly at arbitrary
    /// times, warm-starting the inner ARE across calls.
    pub fn evaluator<'a>(&'a self, data: &'a ProblemData) -> ReducedEvaluator<'a> {
        ReducedEvaluator {
            sol: self,
            data,
            warm: None,
        }
    }

    /// Value of the limiting cost `0.5 <P11(0) x1, x1>`.
    pub fn limit_value(&self, x1: &DVector<f64>) -> f64 {
        let p = self.eval_p11(0.0);
        0.5 * (x1.transpose() * p * x1)[(0, 0)]
    }

    /// CSV export mirroring the full-trajectory schema plus gain columns.
    pub fn write_csv<W: Write>(&self, w: &mut W, data: &ProblemData) -> Result<()> {
        let (n1, n2, k) = (self.n1, self.n2, data.k);
        let mut header = vec!["t".to_string()];
        header.extend(fmt::block_labels("P11", n1, n1));
        header.extend(fmt::block_labels("P12", n1, n2));
        header.extend(fmt::block_labels("P22", n2, n2));
        header.push("delta_min".to_string());
        header.extend(fmt::block_labels("F1bar", k, n1));
        header.extend(fmt::block_labels("F2bar", k, n2));
        fmt::write_row(w, &header)?;
        for i in 0..self.grid.len() {
            let mut row = vec![fmt::f64_field(self.grid[i])];
            row.extend(fmt::block_fields(self.p11bar[i].as_matrix()));
            row.extend(fmt::block_fields(&self.p12bar[i]));
            row.extend(fmt::block_fields(self.p22bar[i].as_matrix()));
            row.push(fmt::f64_field(self.delta_bar_min[i]));
            row.extend(fmt::block_fields(&self.f1bar[i]));
            row.extend(fmt::block_fields(&self.f2bar[i]));
            fmt::write_row(w, &row)?;
        }
        Ok(())
    }
}

pub struct ReducedEvaluator<'a> {
    sol: &'a ReducedSolution,
    data: &'a ProblemData,
    warm: Option<DMatrix<f64>>,
}

impl ReducedEvaluator<'_> {
    pub fn eval(&mut self, t: f64) -> Result<ReducedPoint> {
        let p11 = self.sol.eval_p11(t);
        let are = solve_h2_mat(&p11, self.data, self.warm.as_ref())?;
        self.warm = Some(are.f2.clone());
        let p22 = are.p22.as_matrix().clone();
        let p12 = compute_p12(&p11, &p22, self.data)?;
        let (f1, f2) = reduced_gains(&p11, &p12, &p22, self.data)?;
        Ok(ReducedPoint {
            p11,
            p12,
            p22,
            f1,
            f2,
        })
    }
}

/// Integrate the reduced differential Riccati equation backward from the
/// zero terminal condition, with every right-hand-side evaluation solving the
/// fast ARE (warm-started), and populate the algebraic blocks and gains.
pub fn solve_reduced_dre(data: &ProblemData, step_control: &StepControl) -> Result<ReducedSolution> {
    data.check_dimensions()?;
    let rc = reduced_coefficients(data)?;
    let n1 = data.n1;
    let horizon = data.horizon;
    let max_step = horizon / 100.0;

    let mut warm: Option<DMatrix<f64>> = None;
    let mut rhs = |_s: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let p11 = DMatrix::from_column_slice(n1, n1, y.as_slice());
        let p11 = (&p11 + p11.transpose()) * 0.5;
        let are = solve_h2_mat(&p11, data, warm.as_ref())?;
        warm = Some(are.f2.clone());
        let val = reduced_dre_rhs(&p11, are.p22.as_matrix(), &rc)?;
        Ok(DVector::from_column_slice(val.as_slice()))
    };

    let dense = integrate_adaptive(
        &mut rhs,
        0.0,
        horizon,
        DVector::zeros(n1 * n1),
        step_control,
        max_step,
        &mut |_, _| Ok(()),
    )?;

    // Populate algebraic blocks along the grid (ascending s for warm starts,
    // then reverse to ascending t).
    let m = dense.times.len();
    let mut p11v = Vec::with_capacity(m);
    let mut p22v = Vec::with_capacity(m);
    let mut p12v = Vec::with_capacity(m);
    let mut f1v = Vec::with_capacity(m);
    let mut f2v = Vec::with_capacity(m);
    let mut dbar = Vec::with_capacity(m);
    let mut dsmin = Vec::with_capacity(m);
    let mut grid = Vec::with_capacity(m);
    let mut warm2: Option<DMatrix<f64>> = None;
    for i in 0..m {
        let p11 = DMatrix::from_column_slice(n1, n1, dense.states[i].as_slice());
        let p11 = (&p11 + p11.transpose()) * 0.5;
        let are = solve_h2_mat(&p11, data, warm2.as_ref())?;
        warm2 = Some(are.f2.clone());
        let p22 = are.p22.as_matrix().clone();
        let p12 = compute_p12(&p11, &p22, data)?;
        let (f1, f2) = reduced_gains(&p11, &p12, &p22, data)?;
        let delta = delta_bar(&p11, &p22, data)?;
        let ds = rc.r_s.as_matrix()
            + rc.d1s.transpose() * &p11 * &rc.d1s
            + rc.d2s.transpose() * &p22 * &rc.d2s;
        dbar.push(min_symmetric_eigenvalue(&delta));
        dsmin.push(min_symmetric_eigenvalue(&ds));
        grid.push(horizon - dense.times[i]);
        p11v.push(SymMatrix::of_symmetric_part(&p11));
        p22v.push(SymMatrix::of_symmetric_part(&p22));
        p12v.push(p12);
        f1v.push(f1);
        f2v.push(f2);
    }
    grid.reverse();
    p11v.reverse();
    p22v.reverse();
    p12v.reverse();
    f1v.reverse();
    f2v.reverse();
    dbar.reverse();
    dsmin.reverse();

    Ok(ReducedSolution {
        grid,
        p11bar: p11v,
        p22bar: p22v,
        p12bar: p12v,
        f1bar: f1v,
        f2bar: f2v,
        delta_bar_min: dbar,
        delta_s_min: dsmin,
        n1,
        n2: data.n2,
        horizon,
        dense,
    })
}

/// Max-norm residuals `(max |g1|, max |g2|)` of the algebraic constraints
/// along a reduced solution, evaluated through the full-system functions at
/// `eps = 0`.
pub fn residuals_reduced(sol: &ReducedSolution, data: &ProblemData) -> Result<(f64, f64)> {
    let mut r1 = 0.0_f64;
    let mut r2 = 0.0_f64;
    for i in 0..sol.grid.len() {
        let (_, g1, g2) = crate::riccati::eval_full_rhs(
            sol.p11bar[i].as_matrix(),
            &sol.p12bar[i],
            sol.p22bar[i].as_matrix(),
            0.0,
            data,
        )?;
        r1 = r1.max(g1.amax());
        r2 = r2.max(g2.amax());
    }
    Ok((r1, r2))
}

/// One iterate of the constructive scheme: the slow block on a uniform grid.
#[derive(Clone, Debug)]
pub struct P11Iterate {
    /// Grid increasing from 0 to T.
    pub grid: Vec<f64>,
    pub values: Vec<SymMatrix>,
}

impl P11Iterate {
    /// Pointwise max-norm distance to another iterate on the same grid.
    pub fn sup_distance(&self, other: &P11Iterate) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a.as_matrix() - b.as_matrix()).amax())
            .fold(0.0, f64::max)
    }
}

struct IterationWorkspace<'a> {
    data: &'a ProblemData,
    rc: &'a ReducedCoefficients,
    /// Sample points in `s`: nodes at even indices, midpoints at odd.
    samples: Vec<f64>,
}

impl IterationWorkspace<'_> {
    /// `h2` of a stored iterate at every sample point (Hermite between nodes).
    fn h2_samples(&self, iterate: &DenseTrajectory) -> Result<Vec<DMatrix<f64>>> {
        let n1 = self.data.n1;
        let mut out = Vec::with_capacity(self.samples.len());
        let mut warm: Option<DMatrix<f64>> = None;
        for &s in &self.samples {
            let y = iterate.eval(s);
            let p11 = DMatrix::from_column_slice(n1, n1, y.as_slice());
            let p11 = (&p11 + p11.transpose()) * 0.5;
            let are = solve_h2_mat(&p11, self.data, warm.as_ref())?;
            warm = Some(are.f2.clone());
            out.push(are.p22.as_matrix().clone());
        }
        Ok(out)
    }

    /// Frozen-gain Lyapunov coefficients `(A_i, C_i, constant term)` at every
    /// sample, built from the current iterate and the `h2` samples of the
    /// coefficient source.
    fn lyapunov_coefficients(
        &self,
        iterate: &DenseTrajectory,
        h2s: &[DMatrix<f64>],
    ) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)>> {
        let rc = self.rc;
        let n1 = self.data.n1;
        let mut out = Vec::with_capacity(self.samples.len());
        for (idx, &s) in self.samples.iter().enumerate() {
            let y = iterate.eval(s);
            let p = DMatrix::from_column_slice(n1, n1, y.as_slice());
            let p = (&p + p.transpose()) * 0.5;
            let h = &h2s[idx];
            let ri = rc.r_s.as_matrix() + rc.d2s.transpose() * h * &rc.d2s;
            let rb = &ri + rc.d1s.transpose() * &p * &rc.d1s;
            let rb_min = min_symmetric_eigenvalue(&rb);
            if rb_min <= DELTA_FLOOR {
                return Err(Error::DeltaNotPositive {
                    time: None,
                    min_eig: rb_min,
                });
            }
            let rb_inv = rb.try_inverse().ok_or(Error::DeltaNotPositive {
                time: None,
                min_eig: rb_min,
            })?;
            let theta = -rb_inv
                * (rc.b_s.transpose() * &p
                    + rc.d1s.transpose() * &p * &rc.c1s
                    + rc.d2s.transpose() * h * &rc.c2s
                    + &rc.l_s);
            let a_i = &rc.a_s + &rc.b_s * &theta;
            let c_i = &rc.c1s + &rc.d1s * &theta;
            let q_i = rc.q_s.as_matrix() + rc.c2s.transpose() * h * &rc.c2s;
            let s_i = &rc.l_s + rc.d2s.transpose() * h * &rc.c2s;
            let konst = theta.transpose() * &ri * &theta
                + s_i.transpose() * &theta
                + theta.transpose() * &s_i
                + q_i;
            out.push((a_i, c_i, (&konst + konst.transpose()) * 0.5));
        }
        Ok(out)
    }

    /// RK4 sweep of the differential Lyapunov equation with tabulated
    /// coefficients; returns node states and derivatives (packed).
    fn integrate(&self, coeffs: &[(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)]) -> DenseTrajectory {
        let n1 = self.data.n1;
        let field = |idx: usize, y: &DMatrix<f64>| -> DMatrix<f64> {
            let (a, c, konst) = &coeffs[idx];
            let v = a.transpose() * y + y * a + c.transpose() * y * c + konst;
            (&v + v.transpose()) * 0.5
        };
        let nodes: Vec<f64> = self.samples.iter().step_by(2).copied().collect();
        let mut states = Vec::with_capacity(nodes.len());
        let mut derivs = Vec::with_capacity(nodes.len());
        let mut y = DMatrix::zeros(n1, n1);
        states.push(DVector::from_column_slice(y.as_slice()));
        derivs.push(DVector::from_column_slice(field(0, &y).as_slice()));
        for j in 0..nodes.len() - 1 {
            let h = nodes[j + 1] - nodes[j];
            let node = 2 * j;
            let mid = 2 * j + 1;
            let next = 2 * j + 2;
            let k1 = field(node, &y);
            let k2 = field(mid, &(&y + &k1 * (0.5 * h)));
            let k3 = field(mid, &(&y + &k2 * (0.5 * h)));
            let k4 = field(next, &(&y + &k3 * h));
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            states.push(DVector::from_column_slice(y.as_slice()));
            derivs.push(DVector::from_column_slice(field(next, &y).as_slice()));
        }
        DenseTrajectory {
            times: nodes,
            states,
            derivs,
        }
    }
}

/// Run the constructive iteration for the reduced equation: a perturbed
/// Lyapunov initialisation followed by frozen-gain differential Lyapunov
/// solves. Returns all iterates on a uniform grid of `grid_points` nodes;
/// iterates decrease monotonically toward the reduced solution.
///
/// Fails with [`Error::MaxItersExceeded`] when consecutive iterates still
/// differ by more than `1e-10` in sup norm after `max_iters` corrections.
pub fn lyapunov_iteration_check(
    data: &ProblemData,
    grid_points: usize,
    max_iters: usize,
) -> Result<Vec<P11Iterate>> {
    assert!(grid_points >= 3, "need at least 3 grid points");
    data.check_dimensions()?;
    let rc = reduced_coefficients(data)?;
    let n1 = data.n1;
    let horizon = data.horizon;
    let nodes = uniform_grid(0.0, horizon, grid_points);
    let mut samples = Vec::with_capacity(2 * grid_points - 1);
    for j in 0..grid_points {
        samples.push(nodes[j]);
        if j + 1 < grid_points {
            samples.push(0.5 * (nodes[j] + nodes[j + 1]));
        }
    }
    let ws = IterationWorkspace {
        data,
        rc: &rc,
        samples,
    };

    // Initialisation: slow Lyapunov equation perturbed by the linear bound
    // in place of the fast block.
    let fast_op = LyapunovOperator::new(&data.a22, &data.c22)?;
    let q22 = data.q22();
    let mut rhs0 = |_s: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let p = DMatrix::from_column_slice(n1, n1, y.as_slice());
        let p = (&p + p.transpose()) * 0.5;
        let qf = &q22 + data.c12.transpose() * &p * &data.c12;
        let h2p = fast_op.solve(&((&qf + qf.transpose()) * 0.5))?;
        let v = rc.a_s.transpose() * &p
            + &p * &rc.a_s
            + rc.c1s.transpose() * &p * &rc.c1s
            + rc.q_s.as_matrix()
            + rc.c2s.transpose() * h2p * &rc.c2s;
        let v = (&v + v.transpose()) * 0.5;
        Ok(DVector::from_column_slice(v.as_slice()))
    };
    let (states0, derivs0) =
        crate::ode::integrate_rk4_uniform(&mut rhs0, &nodes, DVector::zeros(n1 * n1))?;
    let mut iterates = vec![DenseTrajectory {
        times: nodes.clone(),
        states: states0,
        derivs: derivs0,
    }];

    let mut h2_cache: Option<(usize, Vec<DMatrix<f64>>)> = None;
    let mut last_gap = f64::INFINITY;
    for i in 0..max_iters {
        let source_idx = i.saturating_sub(1);
        let need_fresh = h2_cache.as_ref().map(|(idx, _)| *idx != source_idx).unwrap_or(true);
        if need_fresh {
            let h = ws.h2_samples(&iterates[source_idx])?;
            h2_cache = Some((source_idx, h));
        }
        let h2s = &h2_cache.as_ref().unwrap().1;
        let coeffs = ws.lyapunov_coefficients(&iterates[i], h2s)?;
        let next = ws.integrate(&coeffs);
        last_gap = next
            .states
            .iter()
            .zip(&iterates[i].states)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        iterates.push(next);
        if last_gap <= 1e-10 {
            return Ok(finish_iterates(iterates, n1, horizon));
        }
    }
    Err(Error::MaxItersExceeded { last_gap })
}

fn finish_iterates(iterates: Vec<DenseTrajectory>, n1: usize, horizon: f64) -> Vec<P11Iterate> {
    iterates
        .into_iter()
        .map(|tr| {
            let mut grid: Vec<f64> = tr.times.iter().map(|&s| horizon - s).collect();
            grid.reverse();
            let mut values: Vec<SymMatrix> = tr
                .states
                .iter()
                .map(|y| {
                    let p = DMatrix::from_column_slice(n1, n1, y.as_slice());
                    SymMatrix::of_symmetric_part(&p)
                })
                .collect();
            values.reverse();
            P11Iterate { grid, values }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{coupled_scalar, coupled_scalar_noise};

    const SQRT2: f64 = std::f64::consts::SQRT_2;

    #[test]
    fn h2_closed_form_no_noise() {
        // Scalar quadratic p^2 + 2p - 1 = 0, positive root sqrt(2) - 1.
        let data = coupled_scalar();
        for p11 in [0.0, 0.4, 1.3] {
            let sol = solve_h2(&SymMatrix::scalar(p11), &data).unwrap();
            assert!((sol.p22[(0, 0)] - (SQRT2 - 1.0)).abs() < 1e-12);
            assert!((sol.f2[(0, 0)] + (SQRT2 - 1.0)).abs() < 1e-12);
            assert!((sol.closed_loop_abscissa + SQRT2).abs() < 1e-9);
        }
    }

    #[test]
    fn h2_rejects_unstabilizable_fast_pair() {
        let mut data = coupled_scalar();
        data.a22[(0, 0)] = 1.0;
        data.b2[(0, 0)] = 0.0;
        let err = solve_h2(&SymMatrix::scalar(0.0), &data);
        assert!(matches!(err, Err(Error::NoStabilizingSolution(_))));
    }

    #[test]
    fn h2_linear_bound_values() {
        let data = coupled_scalar();
        for p11 in [0.0, 0.7, 2.0] {
            let x = h2_linear_bound(&DMatrix::from_element(1, 1, p11), &data).unwrap();
            assert!((x[(0, 0)] - 0.5).abs() < 1e-13);
        }
        let data = coupled_scalar_noise();
        let x = h2_linear_bound(&DMatrix::zeros(1, 1), &data).unwrap();
        assert!((x[(0, 0)] - 1.0 / 1.75).abs() < 1e-12);
    }

    #[test]
    fn h2_linear_bound_is_affine() {
        let data = coupled_scalar_noise();
        let h = |v: f64| h2_linear_bound(&DMatrix::from_element(1, 1, v), &data).unwrap()[(0, 0)];
        for p in [0.3, 1.1, 2.4] {
            let lin = h(2.0 * p) - 2.0 * h(p) + h(0.0);
            assert!(lin.abs() < 1e-12);
        }
    }

    #[test]
    fn p12_closed_form_values() {
        let data = coupled_scalar();
        let p22 = SQRT2 - 1.0;
        let formula = |p: f64| (p * (2.0 - SQRT2) + p22) / SQRT2;
        for p in [0.0, 0.8134557732687632] {
            let p12 = compute_p12(
                &DMatrix::from_element(1, 1, p),
                &DMatrix::from_element(1, 1, p22),
                &data,
            )
            .unwrap();
            assert!((p12[(0, 0)] - formula(p)).abs() < 1e-12, "p={p}");
        }
    }

    #[test]
    fn p12_vanishes_for_decoupled_data() {
        // Block decoupling alone is not enough: the shared control still
        // couples the blocks through the gain term, so B1 = 0 as well.
        let mut data = coupled_scalar();
        data.a12[(0, 0)] = 0.0;
        data.a21[(0, 0)] = 0.0;
        data.b1[(0, 0)] = 0.0;
        let p12 = compute_p12(
            &DMatrix::from_element(1, 1, 0.9),
            &DMatrix::from_element(1, 1, 0.4),
            &data,
        )
        .unwrap();
        assert_eq!(p12[(0, 0)], 0.0);
    }

    #[test]
    fn gains_at_zero_blocks() {
        let data = coupled_scalar_noise();
        let z = DMatrix::zeros(1, 1);
        let (f1, f2) = reduced_gains(&z, &z, &z, &data).unwrap();
        assert_eq!(f1[(0, 0)], 0.0);
        assert_eq!(f2[(0, 0)], 0.0);
    }

    #[test]
    fn dre_terminal_values() {
        let data = coupled_scalar_noise();
        let sol = solve_reduced_dre(&data, &StepControl::default()).unwrap();
        let last = sol.grid.len() - 1;
        assert_eq!(sol.grid[last], data.horizon);
        assert_eq!(sol.p11bar[last].amax(), 0.0);
        let h2_at_zero = solve_h2(&SymMatrix::zeros(1), &data).unwrap();
        assert!((sol.p22bar[last][(0, 0)] - h2_at_zero.p22[(0, 0)]).abs() < 1e-10);
        assert!(sol.p22bar[last].min_eigenvalue() > 1e-10);
        assert!(sol.delta_bar_min.iter().all(|&d| d > 0.0));
        assert!(sol.delta_s_min.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn dre_constant_fast_block_without_fast_noise_coupling() {
        // With C12 = D1 = 0 the fast ARE does not see P11.
        let data = coupled_scalar();
        let sol = solve_reduced_dre(&data, &StepControl::default()).unwrap();
        for p22 in &sol.p22bar {
            assert!((p22[(0, 0)] - (SQRT2 - 1.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn dre_rhs_matches_full_system_at_algebraic_root() {
        // Dual route: the reduced right-hand side must equal f(P11, h1, h2, 0).
        let data = coupled_scalar_noise();
        let rc = reduced_coefficients(&data).unwrap();
        for p in [0.0, 0.35, 0.9] {
            let p11 = DMatrix::from_element(1, 1, p);
            let are = solve_h2_mat(&p11, &data, None).unwrap();
            let p22 = are.p22.as_matrix().clone();
            let p12 = compute_p12(&p11, &p22, &data).unwrap();
            let via_reduced = reduced_dre_rhs(&p11, &p22, &rc).unwrap();
            let (f, g1, g2) = crate::riccati::eval_full_rhs(&p11, &p12, &p22, 0.0, &data).unwrap();
            assert!(g1.amax() < 1e-11);
            assert!(g2.amax() < 1e-11);
            assert!((via_reduced[(0, 0)] - f[(0, 0)]).abs() < 1e-10);
        }
    }

    #[test]
    fn residuals_detect_perturbation() {
        let data = coupled_scalar();
        let sol = solve_reduced_dre(&data, &StepControl::default()).unwrap();
        let (r1, r2) = residuals_reduced(&sol, &data).unwrap();
        assert!(r1 < 1e-8, "g1 residual {r1}");
        assert!(r2 < 1e-8, "g2 residual {r2}");

        let mut bumped = sol.clone();
        for p in &mut bumped.p22bar {
            *p = SymMatrix::scalar(p[(0, 0)] + 0.1);
        }
        let (_, r2b) = residuals_reduced(&bumped, &data).unwrap();
        assert!(r2b >= 0.1, "perturbed g2 residual {r2b}");
    }

    #[test]
    fn residuals_of_all_zero_triple() {
        let data = coupled_scalar();
        let mut sol = solve_reduced_dre(&data, &StepControl::default()).unwrap();
        for i in 0..sol.grid.len() {
            sol.p11bar[i] = SymMatrix::zeros(1);
            sol.p12bar[i] = DMatrix::zeros(1, 1);
            sol.p22bar[i] = SymMatrix::zeros(1);
        }
        let (r1, r2) = residuals_reduced(&sol, &data).unwrap();
        assert_eq!(r1, data.q12().amax());
        assert_eq!(r2, data.q22().amax());
    }

    #[test]
    fn iteration_stationary_for_uncontrolled_decoupled_data() {
        // With B = 0 and decoupled blocks every frozen gain vanishes, so the
        // first correction is already stationary.
        let mut data = coupled_scalar_noise();
        data.b1[(0, 0)] = 0.0;
        data.b2[(0, 0)] = 0.0;
        data.a12[(0, 0)] = 0.0;
        data.a21[(0, 0)] = 0.0;
        data.c12[(0, 0)] = 0.0;
        data.c21[(0, 0)] = 0.0;
        data.d1[(0, 0)] = 0.0;
        data.d2[(0, 0)] = 0.0;
        data.q = SymMatrix::identity(2);
        let iterates = lyapunov_iteration_check(&data, 201, 4).unwrap();
        assert!(iterates.len() <= 3, "expected <= 2 corrections, got {}", iterates.len() - 1);
    }
}
