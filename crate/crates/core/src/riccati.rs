//! The full eps-dependent Riccati system in partitioned form.
//!
//! The Riccati solution for the stacked state is written as
//!
//! ```text
//! P = [ P11        eps P12 ]
//!     [ eps P12'   eps P22 ]
//! ```
//!
//! which turns the compact matrix Riccati equation into three coupled matrix
//! ODEs: `dP11/dt + f = 0`, `eps dP12/dt + g1 = 0`, `eps dP22/dt + g2 = 0`,
//! all with zero terminal values, valid while the control weight
//! `Delta = R + D' P D` stays positive definite. Integration runs in reversed
//! time `s = T - t` so the terminal-value problem becomes an initial-value
//! problem; the max step is capped at `min(T/100, eps/2)` because the fast
//! blocks carry rates of order `1/eps`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::fmt;
use crate::linalg::{min_symmetric_eigenvalue, SymMatrix};
use crate::ode::{integrate_adaptive, DenseTrajectory, StepControl};
use crate::problem::ProblemData;
use crate::Result;

/// Minimum eigenvalue of `Delta` required to keep evaluating the system.
pub const DELTA_FLOOR: f64 = 1e-12;

pub(crate) struct BlockRhs {
    pub f: DMatrix<f64>,
    pub g1: DMatrix<f64>,
    pub g2: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    pub delta_min: f64,
    pub u1: DMatrix<f64>,
    pub u2: DMatrix<f64>,
}

/// Evaluate the three partitioned right-hand-side blocks together with the
/// control weight `Delta` and the two gain numerators.
pub(crate) fn block_rhs(
    p11: &DMatrix<f64>,
    p12: &DMatrix<f64>,
    p22: &DMatrix<f64>,
    epsilon: f64,
    data: &ProblemData,
) -> Result<BlockRhs> {
    let se = epsilon.sqrt();
    let p12t = p12.transpose();

    let delta = data.r.as_matrix()
        + data.d1.transpose() * p11 * &data.d1
        + (data.d2.transpose() * &p12t * &data.d1 + data.d1.transpose() * p12 * &data.d2) * se
        + data.d2.transpose() * p22 * &data.d2;
    let delta = (&delta + delta.transpose()) * 0.5;
    let delta_min = min_symmetric_eigenvalue(&delta);
    if delta_min <= DELTA_FLOOR {
        return Err(Error::DeltaNotPositive {
            time: None,
            min_eig: delta_min,
        });
    }
    let delta_inv = delta.clone().try_inverse().ok_or(Error::DeltaNotPositive {
        time: None,
        min_eig: delta_min,
    })?;

    // Gain numerators: u1 multiplies X1, u2 multiplies X2.
    let u1 = data.b1.transpose() * p11
        + data.b2.transpose() * &p12t
        + data.d1.transpose() * p11 * &data.c11
        + (data.d2.transpose() * &p12t * &data.c11 + data.d1.transpose() * p12 * &data.c21) * se
        + data.d2.transpose() * p22 * &data.c21;
    let u2 = data.b1.transpose() * p12 * epsilon
        + data.b2.transpose() * p22
        + data.d1.transpose() * p11 * &data.c12
        + (data.d2.transpose() * &p12t * &data.c12 + data.d1.transpose() * p12 * &data.c22) * se
        + data.d2.transpose() * p22 * &data.c22;

    let f = data.a11.transpose() * p11
        + p11 * &data.a11
        + data.a21.transpose() * &p12t
        + p12 * &data.a21
        + data.c11.transpose() * p11 * &data.c11
        + (data.c21.transpose() * &p12t * &data.c11 + data.c11.transpose() * p12 * &data.c21) * se
        + data.c21.transpose() * p22 * &data.c21
        + data.q11()
        - u1.transpose() * &delta_inv * &u1;

    let g1 = data.a11.transpose() * p12 * epsilon
        + p11 * &data.a12
        + data.a21.transpose() * p22
        + p12 * &data.a22
        + data.c11.transpose() * p11 * &data.c12
        + (data.c21.transpose() * &p12t * &data.c12 + data.c11.transpose() * p12 * &data.c22) * se
        + data.c21.transpose() * p22 * &data.c22
        + data.q12()
        - u1.transpose() * &delta_inv * &u2;

    let g2 = data.a22.transpose() * p22
        + p22 * &data.a22
        + (data.a12.transpose() * p12 + &p12t * &data.a12) * epsilon
        + data.c12.transpose() * p11 * &data.c12
        + (data.c22.transpose() * &p12t * &data.c12 + data.c12.transpose() * p12 * &data.c22) * se
        + data.c22.transpose() * p22 * &data.c22
        + data.q22()
        - u2.transpose() * &delta_inv * &u2;

    Ok(BlockRhs {
        f: (&f + f.transpose()) * 0.5,
        g1,
        g2: (&g2 + g2.transpose()) * 0.5,
        delta,
        delta_min,
        u1,
        u2,
    })
}

/// Evaluate the partitioned right-hand-side functions `(f, g1, g2)`.
///
/// Fails with [`Error::DeltaNotPositive`] when `R + D' P D` loses strict
/// positivity at the given blocks.
pub fn eval_full_rhs(
    p11: &DMatrix<f64>,
    p12: &DMatrix<f64>,
    p22: &DMatrix<f64>,
    epsilon: f64,
    data: &ProblemData,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let r = block_rhs(p11, p12, p22, epsilon, data)?;
    Ok((r.f, r.g1, r.g2))
}

/// Assemble the stacked solution `[[P11, eps P12], [eps P12', eps P22]]`.
pub fn assemble_p(
    p11: &DMatrix<f64>,
    p12: &DMatrix<f64>,
    p22: &DMatrix<f64>,
    epsilon: f64,
) -> SymMatrix {
    let n1 = p11.nrows();
    let n2 = p22.nrows();
    let mut out = DMatrix::zeros(n1 + n2, n1 + n2);
    out.view_mut((0, 0), (n1, n1)).copy_from(p11);
    out.view_mut((0, n1), (n1, n2)).copy_from(&(p12 * epsilon));
    out.view_mut((n1, 0), (n2, n1))
        .copy_from(&(p12.transpose() * epsilon));
    out.view_mut((n1, n1), (n2, n2)).copy_from(&(p22 * epsilon));
    SymMatrix::of_symmetric_part(&out)
}

/// Feedback gains `(F1, F2)` of the optimal control at the given blocks,
/// `u = F1 X1 + F2 X2`.
pub fn feedback_gains_full(
    p11: &DMatrix<f64>,
    p12: &DMatrix<f64>,
    p22: &DMatrix<f64>,
    epsilon: f64,
    data: &ProblemData,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let r = block_rhs(p11, p12, p22, epsilon, data)?;
    let delta_inv = r.delta.clone().try_inverse().ok_or(Error::DeltaNotPositive {
        time: None,
        min_eig: r.delta_min,
    })?;
    Ok((-(&delta_inv) * r.u1, -delta_inv * r.u2))
}

/// Backward solution of the full system on `[0, T]`.
#[derive(Clone, Debug)]
pub struct RiccatiTrajectory {
    pub epsilon: f64,
    /// Accepted-step grid, increasing from 0 to T.
    pub grid: Vec<f64>,
    pub p11: Vec<SymMatrix>,
    pub p12: Vec<DMatrix<f64>>,
    pub p22: Vec<SymMatrix>,
    /// Min eigenvalue of `Delta` at each grid point.
    pub delta_min: Vec<f64>,
    n1: usize,
    n2: usize,
    horizon: f64,
    /// Dense data in reversed time `s = T - t`.
    dense: DenseTrajectory,
}

pub(crate) fn pack_blocks(
    p11: &DMatrix<f64>,
    p12: &DMatrix<f64>,
    p22: &DMatrix<f64>,
) -> DVector<f64> {
    let mut v = Vec::with_capacity(p11.len() + p12.len() + p22.len());
    v.extend_from_slice(p11.as_slice());
    v.extend_from_slice(p12.as_slice());
    v.extend_from_slice(p22.as_slice());
    DVector::from_vec(v)
}

pub(crate) fn unpack_blocks(
    y: &DVector<f64>,
    n1: usize,
    n2: usize,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let s = y.as_slice();
    let p11 = DMatrix::from_column_slice(n1, n1, &s[0..n1 * n1]);
    let p12 = DMatrix::from_column_slice(n1, n2, &s[n1 * n1..n1 * n1 + n1 * n2]);
    let p22 = DMatrix::from_column_slice(n2, n2, &s[n1 * n1 + n1 * n2..]);
    let p11 = (&p11 + p11.transpose()) * 0.5;
    let p22 = (&p22 + p22.transpose()) * 0.5;
    (p11, p12, p22)
}

/// Integrate the full system backward from the zero terminal condition.
///
/// `Delta` positivity is enforced at every accepted step; a violation aborts
/// with the breach time. Requires `0 < eps <= 1`.
pub fn solve_full(
    data: &ProblemData,
    epsilon: f64,
    step_control: &StepControl,
) -> Result<RiccatiTrajectory> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::EpsilonOutOfRange(epsilon));
    }
    data.check_dimensions()?;
    let (n1, n2) = (data.n1, data.n2);
    let horizon = data.horizon;
    let max_step = (horizon / 100.0).min(epsilon / 2.0);

    let mut rhs = |_s: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let (p11, p12, p22) = unpack_blocks(y, n1, n2);
        let r = block_rhs(&p11, &p12, &p22, epsilon, data)?;
        // In reversed time s = T - t: dP11/ds = f, dP12/ds = g1/eps, dP22/ds = g2/eps.
        Ok(pack_blocks(&r.f, &(r.g1 / epsilon), &(r.g2 / epsilon)))
    };

    let mut delta_mins: Vec<f64> = Vec::new();
    let mut on_accept = |s: f64, y: &DVector<f64>| -> Result<()> {
        let (p11, p12, p22) = unpack_blocks(y, n1, n2);
        let r = block_rhs(&p11, &p12, &p22, epsilon, data).map_err(|e| match e {
            Error::DeltaNotPositive { min_eig, .. } => Error::DeltaNotPositive {
                time: Some(horizon - s),
                min_eig,
            },
            other => other,
        })?;
        if r.delta_min <= DELTA_FLOOR {
            return Err(Error::DeltaNotPositive {
                time: Some(horizon - s),
                min_eig: r.delta_min,
            });
        }
        delta_mins.push(r.delta_min);
        Ok(())
    };

    let y0 = DVector::zeros(n1 * n1 + n1 * n2 + n2 * n2);
    let dense = integrate_adaptive(
        &mut rhs,
        0.0,
        horizon,
        y0,
        step_control,
        max_step,
        &mut on_accept,
    )?;

    // Reverse to a grid increasing in t = T - s.
    let m = dense.times.len();
    let mut grid = Vec::with_capacity(m);
    let mut p11v = Vec::with_capacity(m);
    let mut p12v = Vec::with_capacity(m);
    let mut p22v = Vec::with_capacity(m);
    let mut dmin = Vec::with_capacity(m);
    for i in (0..m).rev() {
        grid.push(horizon - dense.times[i]);
        let (p11, p12, p22) = unpack_blocks(&dense.states[i], n1, n2);
        p11v.push(SymMatrix::of_symmetric_part(&p11));
        p12v.push(p12);
        p22v.push(SymMatrix::of_symmetric_part(&p22));
        dmin.push(delta_mins[i]);
    }

    Ok(RiccatiTrajectory {
        epsilon,
        grid,
        p11: p11v,
        p12: p12v,
        p22: p22v,
        delta_min: dmin,
        n1,
        n2,
        horizon,
        dense,
    })
}

impl RiccatiTrajectory {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Blocks at an arbitrary time by cubic Hermite interpolation.
    pub fn eval_blocks(&self, t: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let y = self.dense.eval(self.horizon - t);
        unpack_blocks(&y, self.n1, self.n2)
    }

    /// Stacked solution `P(t)` for the given trajectory epsilon.
    pub fn assemble_at(&self, t: f64) -> SymMatrix {
        let (p11, p12, p22) = self.eval_blocks(t);
        assemble_p(&p11, &p12, &p22, self.epsilon)
    }

    /// Accepted step sizes of the reversed-time integration (near `t = T`
    /// first).
    pub fn accepted_steps(&self) -> Vec<f64> {
        self.dense.step_sizes()
    }

    /// Time derivatives of the blocks at the grid node closest to `t = T`,
    /// in backward orientation (derivative with respect to `s = T - t`).
    pub fn terminal_backward_derivative(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        unpack_blocks(&self.dense.derivs[0], self.n1, self.n2)
    }

    /// CSV export: `t,P11_00,...,P12_00,...,P22_00,...,delta_min`, row-major
    /// block flattening, 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend(fmt::block_labels("P11", self.n1, self.n1));
        header.extend(fmt::block_labels("P12", self.n1, self.n2));
        header.extend(fmt::block_labels("P22", self.n2, self.n2));
        header.push("delta_min".to_string());
        fmt::write_row(w, &header)?;
        for i in 0..self.grid.len() {
            let mut row = vec![fmt::f64_field(self.grid[i])];
            row.extend(fmt::block_fields(self.p11[i].as_matrix()));
            row.extend(fmt::block_fields(&self.p12[i]));
            row.extend(fmt::block_fields(self.p22[i].as_matrix()));
            row.push(fmt::f64_field(self.delta_min[i]));
            fmt::write_row(w, &row)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{coupled_scalar, coupled_scalar_noise};

    #[test]
    fn rhs_at_zero_returns_cost_blocks() {
        let data = coupled_scalar_noise();
        let z = DMatrix::zeros(1, 1);
        for eps in [1.0, 0.3, 0.02] {
            let (f, g1, g2) = eval_full_rhs(&z, &z, &z, eps, &data).unwrap();
            assert_eq!(f, data.q11());
            assert_eq!(g1, data.q12());
            assert_eq!(g2, data.q22());
        }
    }

    #[test]
    fn rhs_scalar_hand_evaluation() {
        // No-noise instance, eps = 1, P11 = P22 = 1, P12 = 0, Delta = R = 1:
        //   f  = 2 P12 + 1 - (P11 + P12)^2            = 0
        //   g1 = P11 + P22 - P12 - (P11+P12)(P12+P22) = 1
        //   g2 = -2 P22 + 2 P12 + 1 - (P12+P22)^2     = -2
        let data = coupled_scalar();
        let one = DMatrix::from_element(1, 1, 1.0);
        let zero = DMatrix::zeros(1, 1);
        let (f, g1, g2) = eval_full_rhs(&one, &zero, &one, 1.0, &data).unwrap();
        assert!((f[(0, 0)] - 0.0).abs() < 1e-14);
        assert!((g1[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((g2[(0, 0)] + 2.0).abs() < 1e-14);
    }

    #[test]
    fn rhs_rejects_nonpositive_delta() {
        let mut data = coupled_scalar_noise();
        data.r = SymMatrix::scalar(-1.0);
        let z = DMatrix::zeros(1, 1);
        let err = eval_full_rhs(&z, &z, &z, 1.0, &data);
        assert!(matches!(err, Err(Error::DeltaNotPositive { .. })));
    }

    #[test]
    fn assemble_scalar_blocks() {
        let p11 = DMatrix::from_element(1, 1, 1.0);
        let p12 = DMatrix::from_element(1, 1, 2.0);
        let p22 = DMatrix::from_element(1, 1, 3.0);
        let p = assemble_p(&p11, &p12, &p22, 0.5);
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.5]);
        assert_eq!(p.as_matrix(), &want);
        let z = DMatrix::zeros(1, 1);
        assert_eq!(assemble_p(&z, &z, &z, 1.0).amax(), 0.0);
    }

    #[test]
    fn gains_scalar_cases() {
        let data = coupled_scalar();
        let z = DMatrix::zeros(1, 1);
        let (f1, f2) = feedback_gains_full(&z, &z, &z, 1.0, &data).unwrap();
        assert_eq!(f1[(0, 0)], 0.0);
        assert_eq!(f2[(0, 0)], 0.0);
        let one = DMatrix::from_element(1, 1, 1.0);
        let (f1, f2) = feedback_gains_full(&one, &z, &one, 1.0, &data).unwrap();
        assert!((f1[(0, 0)] + 1.0).abs() < 1e-14);
        assert!((f2[(0, 0)] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn terminal_condition_is_exact() {
        let data = coupled_scalar_noise();
        let traj = solve_full(&data, 0.5, &StepControl::default()).unwrap();
        let last = traj.grid.len() - 1;
        assert_eq!(traj.grid[last], data.horizon);
        assert_eq!(traj.p11[last].amax(), 0.0);
        assert_eq!(traj.p12[last].amax(), 0.0);
        assert_eq!(traj.p22[last].amax(), 0.0);
        assert!(traj.delta_min.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn terminal_backward_rate_matches_cost_over_eps() {
        // At P = 0 the fast block derivative in s is Q22 / eps.
        let data = coupled_scalar();
        let eps = 0.01;
        let traj = solve_full(&data, eps, &StepControl::default()).unwrap();
        let (_, _, d22) = traj.terminal_backward_derivative();
        let want = data.q22()[(0, 0)] / eps;
        assert!((d22[(0, 0)] - want).abs() < 0.01 * want);
    }

    #[test]
    fn psd_along_trajectory() {
        let data = coupled_scalar_noise();
        let traj = solve_full(&data, 0.2, &StepControl::default()).unwrap();
        for i in 0..traj.grid.len() {
            let p = traj.assemble_at(traj.grid[i]);
            let scale = 1.0 + p.amax();
            assert!(p.min_eigenvalue() >= -1e-8 * scale);
            assert!(traj.p11[i].min_eigenvalue() >= -1e-9 * scale);
            assert!(traj.p22[i].min_eigenvalue() >= -1e-9 * scale);
        }
    }

    #[test]
    fn step_cap_shrinks_with_eps() {
        let data = coupled_scalar();
        let mut prev_max: Option<f64> = None;
        for eps in [0.1, 0.05, 0.025] {
            let traj = solve_full(&data, eps, &StepControl::default()).unwrap();
            // Steps near t = T are the first reversed-time steps.
            let near_terminal: f64 = traj
                .accepted_steps()
                .iter()
                .take(20)
                .fold(0.0_f64, |a, &b| a.max(b));
            if let Some(p) = prev_max {
                assert!(near_terminal <= p + 1e-12);
            }
            prev_max = Some(near_terminal);
        }
    }
}
