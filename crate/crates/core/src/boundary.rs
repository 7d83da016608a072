//! Boundary-layer correction in stretched time.
//!
//! The reduced solution cannot match the zero terminal condition of the fast
//! blocks. The repair is the stretched-time system (`tau = (T - t) / eps`)
//!
//! ```text
//! d P12hat / d tau = g1(P11, P12hat + h1(P11), P22hat + h2(P11), 0)
//! d P22hat / d tau = g2(P11, P12hat + h1(P11), P22hat + h2(P11), 0)
//! ```
//!
//! whose equilibrium is the origin: the right-hand side vanishes at the
//! algebraic root `(h1(P11), h2(P11))`. Initialised at the terminal mismatch
//! `(-h1(0), -h2(0))` the correction decays exponentially, and the composite
//! `reduced + boundary` approximates the full solution to first order in
//! `eps` uniformly on `[0, T]`.

use nalgebra::{DMatrix, DVector};
use std::io::Write;

use crate::error::Error;
use crate::fmt;
use crate::linalg::{min_symmetric_eigenvalue, SymMatrix};
use crate::ode::{integrate_adaptive, DenseTrajectory, StepControl};
use crate::problem::ProblemData;
use crate::reduced::{compute_p12, solve_h2_mat, ReducedSolution};
use crate::riccati::eval_full_rhs;
use crate::Result;

/// Norm threshold above which the layer trajectory counts as diverged.
const DIVERGENCE_NORM: f64 = 1e6;

/// Norms below `FIT_FLOOR_REL * (1 + initial displacement)` are excluded from
/// decay-rate fits; beyond that level the trajectory is dominated by
/// cancellation noise in the right-hand side.
const FIT_FLOOR_REL: f64 = 1e-11;

/// Stretched-time correction trajectory at a frozen slow block.
#[derive(Clone, Debug)]
pub struct BoundaryTrajectory {
    /// Increasing stretched times from 0 to `tau_max`.
    pub tau_grid: Vec<f64>,
    pub p12hat: Vec<DMatrix<f64>>,
    pub p22hat: Vec<SymMatrix>,
    /// The frozen slow block.
    pub p11_fixed: SymMatrix,
    pub init_12: DMatrix<f64>,
    pub init_22: SymMatrix,
    /// Tail-window exponential decay rates, when measurable.
    pub fitted_rate_12: Option<f64>,
    pub fitted_rate_22: Option<f64>,
    /// Algebraic root at the frozen slow block.
    pub h1: DMatrix<f64>,
    pub h2: SymMatrix,
    n1: usize,
    n2: usize,
    tau_max: f64,
    dense: DenseTrajectory,
}

impl BoundaryTrajectory {
    pub fn tau_max(&self) -> f64 {
        self.tau_max
    }

    /// Correction blocks at an arbitrary stretched time; zero beyond
    /// `tau_max` where the layer has decayed below interpolation noise.
    pub fn eval_or_zero(&self, tau: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        if tau > self.tau_max {
            return (
                DMatrix::zeros(self.n1, self.n2),
                DMatrix::zeros(self.n2, self.n2),
            );
        }
        let y = self.dense.eval(tau.max(0.0));
        let (p12, p22) = unpack(&y, self.n1, self.n2);
        (p12, (&p22 + p22.transpose()) * 0.5)
    }

    /// Frobenius norms of the two blocks along the grid.
    pub fn norms(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.p12hat.iter().map(|m| m.norm()).collect(),
            self.p22hat.iter().map(|m| m.norm()).collect(),
        )
    }

    /// CSV export: `tau,P12hat_...,P22hat_...,norm12,norm22`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = vec!["tau".to_string()];
        header.extend(fmt::block_labels("P12hat", self.n1, self.n2));
        header.extend(fmt::block_labels("P22hat", self.n2, self.n2));
        header.push("norm12".to_string());
        header.push("norm22".to_string());
        fmt::write_row(w, &header)?;
        for i in 0..self.tau_grid.len() {
            let mut row = vec![fmt::f64_field(self.tau_grid[i])];
            row.extend(fmt::block_fields(&self.p12hat[i]));
            row.extend(fmt::block_fields(self.p22hat[i].as_matrix()));
            row.push(fmt::f64_field(self.p12hat[i].norm()));
            row.push(fmt::f64_field(self.p22hat[i].norm()));
            fmt::write_row(w, &row)?;
        }
        Ok(())
    }
}

fn unpack(y: &DVector<f64>, n1: usize, n2: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let s = y.as_slice();
    let p12 = DMatrix::from_column_slice(n1, n2, &s[0..n1 * n2]);
    let p22 = DMatrix::from_column_slice(n2, n2, &s[n1 * n2..]);
    (p12, p22)
}

/// Integrate the boundary-layer system forward in stretched time.
///
/// Preconditions: `h2(P11) + init_22` must be positive semidefinite. The
/// solve aborts with [`Error::Divergence`] when the trajectory norm exceeds
/// `1e6`, and with [`Error::DeltaNotPositive`] when the shifted control
/// weight loses positivity.
pub fn solve_boundary_layer(
    p11_fixed: &SymMatrix,
    init_12: &DMatrix<f64>,
    init_22: &SymMatrix,
    tau_max: f64,
    data: &ProblemData,
) -> Result<BoundaryTrajectory> {
    data.check_dimensions()?;
    let (n1, n2) = (data.n1, data.n2);
    if p11_fixed.dim() != n1 || init_12.nrows() != n1 || init_12.ncols() != n2 || init_22.dim() != n2
    {
        return Err(Error::DimensionMismatch(
            "boundary-layer initial blocks do not match (n1, n2)".into(),
        ));
    }
    let are = solve_h2_mat(p11_fixed.as_matrix(), data, None)?;
    let h2 = are.p22.clone();
    let h1 = compute_p12(p11_fixed.as_matrix(), h2.as_matrix(), data)?;

    let shifted = h2.as_matrix() + init_22.as_matrix();
    let shifted_min = min_symmetric_eigenvalue(&shifted);
    if shifted_min < -1e-9 * (1.0 + shifted.amax()) {
        return Err(Error::NotPositiveSemidefinite {
            context: "h2(P11) + initial fast displacement".into(),
            min_eig: shifted_min,
        });
    }

    let p11 = p11_fixed.as_matrix().clone();
    let mut rhs = |_tau: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let (p12h, p22h) = unpack(y, n1, n2);
        let p22h = (&p22h + p22h.transpose()) * 0.5;
        let (_, g1, g2) = eval_full_rhs(&p11, &(&p12h + &h1), &(&p22h + h2.as_matrix()), 0.0, data)?;
        let mut v = Vec::with_capacity(n1 * n2 + n2 * n2);
        v.extend_from_slice(g1.as_slice());
        v.extend_from_slice(g2.as_slice());
        Ok(DVector::from_vec(v))
    };

    let mut on_accept = |tau: f64, y: &DVector<f64>| -> Result<()> {
        let norm = y.amax();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(Error::Divergence { tau, norm });
        }
        Ok(())
    };

    let mut y0 = Vec::with_capacity(n1 * n2 + n2 * n2);
    y0.extend_from_slice(init_12.as_slice());
    y0.extend_from_slice(init_22.as_matrix().as_slice());

    let ctrl = StepControl::new(1e-10, 1e-14);
    let dense = integrate_adaptive(
        &mut rhs,
        0.0,
        tau_max,
        DVector::from_vec(y0),
        &ctrl,
        tau_max / 200.0,
        &mut on_accept,
    )?;

    let mut p12v = Vec::with_capacity(dense.times.len());
    let mut p22v = Vec::with_capacity(dense.times.len());
    for y in &dense.states {
        let (p12, p22) = unpack(y, n1, n2);
        p12v.push(p12);
        p22v.push(SymMatrix::of_symmetric_part(&p22));
    }

    let mut traj = BoundaryTrajectory {
        tau_grid: dense.times.clone(),
        p12hat: p12v,
        p22hat: p22v,
        p11_fixed: p11_fixed.clone(),
        init_12: init_12.clone(),
        init_22: init_22.clone(),
        fitted_rate_12: None,
        fitted_rate_22: None,
        h1,
        h2,
        n1,
        n2,
        tau_max,
        dense,
    };
    if let Ok((r12, r22)) = estimate_decay_rate(&traj) {
        traj.fitted_rate_12 = Some(r12);
        traj.fitted_rate_22 = Some(r22);
    }
    Ok(traj)
}

/// Boundary layer at the terminal slow block `P11 = P11bar(T) = 0` with the
/// mismatch-cancelling initial values `(-h1(0), -h2(0))`; this is the single
/// trajectory entering every composite approximation.
pub fn terminal_boundary_layer(data: &ProblemData, tau_max: Option<f64>) -> Result<BoundaryTrajectory> {
    let zero11 = SymMatrix::zeros(data.n1);
    let are = solve_h2_mat(zero11.as_matrix(), data, None)?;
    let h2 = are.p22.clone();
    let h1 = compute_p12(zero11.as_matrix(), h2.as_matrix(), data)?;
    let gamma = are.closed_loop_abscissa.abs();
    let tau_max = tau_max.unwrap_or(20.0 / gamma);
    solve_boundary_layer(
        &zero11,
        &(-&h1),
        &SymMatrix::of_symmetric_part(&(-h2.as_matrix())),
        tau_max,
        data,
    )
}

fn fit_rate(taus: &[f64], norms: &[f64], window_lo: f64, floor: f64) -> Result<f64> {
    let mut pts: Vec<(f64, f64)> = taus
        .iter()
        .zip(norms)
        .filter(|&(&tau, &n)| tau >= window_lo && n >= floor)
        .map(|(&tau, &n)| (tau, n.ln()))
        .collect();
    if pts.len() < 2 {
        // Layer already at the noise floor in the tail window; fall back to
        // everything measurable past the initial transient.
        pts = taus
            .iter()
            .zip(norms)
            .filter(|&(&tau, &n)| tau > 0.0 && n >= floor)
            .map(|(&tau, &n)| (tau, n.ln()))
            .collect();
    }
    if pts.len() < 2 {
        return Err(Error::ZeroDisplacement);
    }
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let (sxx, sxy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| {
        (a + (x - mx) * (x - mx), b + (x - mx) * (y - my))
    });
    let slope = sxy / sxx;
    if slope >= 0.0 {
        return Err(Error::NonDecaying { slope });
    }
    Ok(-slope)
}

/// Least-squares exponential decay rates of the two correction blocks over
/// the tail window `[tau_max / 2, tau_max]` (log of the Frobenius norm
/// against stretched time). Points below the cancellation-noise floor are
/// excluded from the fit.
pub fn estimate_decay_rate(traj: &BoundaryTrajectory) -> Result<(f64, f64)> {
    let displaced = traj.init_12.amax() > 0.0 || traj.init_22.amax() > 0.0;
    if !displaced {
        return Err(Error::ZeroDisplacement);
    }
    let (n12, n22) = traj.norms();
    let floor = FIT_FLOOR_REL * (1.0 + traj.init_12.norm() + traj.init_22.norm());
    let lo = traj.tau_max * 0.5;
    let r12 = fit_rate(&traj.tau_grid, &n12, lo, floor)?;
    let r22 = fit_rate(&traj.tau_grid, &n22, lo, floor)?;
    Ok((r12, r22))
}

/// Composite first-order approximation at time `t`:
/// `(P11bar(t), P12bar(t) + P12hat(tau), P22bar(t) + P22hat(tau))` with
/// `tau = (T - t) / eps`. The boundary trajectory must be the terminal one
/// (frozen slow block `P11bar(T) = 0`, initial values cancelling the
/// terminal mismatch).
pub fn composite_approximation(
    reduced: &ReducedSolution,
    layer: &BoundaryTrajectory,
    data: &ProblemData,
    epsilon: f64,
    t: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::EpsilonOutOfRange(epsilon));
    }
    assert!(
        (0.0..=reduced.horizon() + 1e-12).contains(&t),
        "composite evaluation time outside [0, T]"
    );
    let point = reduced.evaluator(data).eval(t)?;
    let tau = (reduced.horizon() - t) / epsilon;
    let (ph12, ph22) = layer.eval_or_zero(tau);
    Ok((point.p11, point.p12 + ph12, point.p22 + ph22))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::coupled_scalar;

    const SQRT2: f64 = std::f64::consts::SQRT_2;

    #[test]
    fn zero_displacement_stays_at_equilibrium() {
        let data = coupled_scalar();
        let traj = solve_boundary_layer(
            &SymMatrix::scalar(0.3),
            &DMatrix::zeros(1, 1),
            &SymMatrix::zeros(1),
            8.0,
            &data,
        )
        .unwrap();
        let (n12, n22) = traj.norms();
        assert!(n12.iter().all(|&v| v < 1e-12));
        assert!(n22.iter().all(|&v| v < 1e-12));
        assert!(matches!(
            estimate_decay_rate(&traj),
            Err(Error::ZeroDisplacement)
        ));
    }

    #[test]
    fn scalar_layer_matches_closed_form() {
        // With the no-noise data the shifted fast variable V = P22hat + h2 + 1
        // solves V' = 2 - V^2, V(0) = 1, so
        // P22hat(tau) = sqrt(2) tanh(sqrt(2) tau + atanh(1/sqrt(2))) - sqrt(2).
        let data = coupled_scalar();
        let traj = terminal_boundary_layer(&data, Some(10.0)).unwrap();
        assert!((traj.init_22[(0, 0)] + (SQRT2 - 1.0)).abs() < 1e-10);
        assert!((traj.init_12[(0, 0)] + (1.0 - 1.0 / SQRT2)).abs() < 1e-10);
        let atanh = (1.0 / SQRT2).atanh();
        for &tau in &[0.0, 0.4, 1.3, 3.0] {
            let (_, p22h) = traj.eval_or_zero(tau);
            let want = SQRT2 * (SQRT2 * tau + atanh).tanh() - SQRT2;
            assert!((p22h[(0, 0)] - want).abs() < 1e-9, "tau={tau}");
        }
        // Terminal decay below 1e-8 by tau = 10.
        let (_, p22h) = traj.eval_or_zero(10.0);
        assert!(p22h.amax() < 1e-8);
    }

    #[test]
    fn fitted_rates_on_scalar_layer() {
        let data = coupled_scalar();
        let traj = terminal_boundary_layer(&data, None).unwrap();
        let (r12, r22) = estimate_decay_rate(&traj).unwrap();
        // Linearisation at the equilibrium gives 2 sqrt(2) for the fast block
        // and sqrt(2) (the closed-loop abscissa) for the mixed block.
        assert!((r22 - 2.0 * SQRT2).abs() < 0.05 * 2.0 * SQRT2, "r22={r22}");
        assert!((r12 - SQRT2).abs() < 0.1 * SQRT2, "r12={r12}");
        assert_eq!(traj.fitted_rate_22, Some(r22));
    }

    #[test]
    fn equilibrium_residual_vanishes() {
        let data = crate::presets::coupled_scalar_noise();
        for p in [0.0, 0.5, 1.2] {
            let p11 = SymMatrix::scalar(p);
            let are = solve_h2_mat(p11.as_matrix(), &data, None).unwrap();
            let h1 = compute_p12(p11.as_matrix(), are.p22.as_matrix(), &data).unwrap();
            let (_, g1, g2) =
                eval_full_rhs(p11.as_matrix(), &h1, are.p22.as_matrix(), 0.0, &data).unwrap();
            assert!(g1.amax() < 1e-9);
            assert!(g2.amax() < 1e-9);
        }
    }

    #[test]
    fn attraction_for_scaled_displacements() {
        let data = coupled_scalar();
        let zero = SymMatrix::zeros(1);
        let are = solve_h2_mat(zero.as_matrix(), &data, None).unwrap();
        let h1 = compute_p12(zero.as_matrix(), are.p22.as_matrix(), &data).unwrap();
        for scale in [0.1, 0.5, 1.0] {
            let traj = solve_boundary_layer(
                &zero,
                &(-&h1 * scale),
                &SymMatrix::of_symmetric_part(&(-are.p22.as_matrix() * scale)),
                20.0,
                &data,
            )
            .unwrap();
            let (n12, n22) = traj.norms();
            assert!(*n12.last().unwrap() < 1e-7);
            assert!(*n22.last().unwrap() < 1e-7);
        }
    }
}
