//! Epsilon-sweeps: full trajectories against reduced-plus-boundary
//! composites, convergence-order fits, and integral-error checks.
//!
//! For each `eps` in a decreasing ladder the full system is solved and
//! compared on a shared uniform grid against the composite approximation.
//! The three block errors decay like `O(eps)`; the fitted log-log slopes are
//! the empirical check. The integral check accumulates the uncorrected
//! reduced-solution error, whose `j`-th power integrates to `O(eps)` because
//! the boundary layer only contributes on a window of width `O(eps)`.

use serde::Serialize;
use std::io::Write;

use crate::boundary::{terminal_boundary_layer, BoundaryTrajectory};
use crate::error::Error;
use crate::fmt;
use crate::ode::{uniform_grid, StepControl};
use crate::problem::ProblemData;
use crate::reduced::{solve_reduced_dre, ReducedSolution};
use crate::riccati::solve_full;
use crate::Result;

/// Smallest epsilon the sweep accepts; below this the explicit full-system
/// solver is outside its stiffness policy and errors would be unreliable.
pub const EPS_FLOOR: f64 = 1e-4;

/// Errors below this are interpolation/integration noise, not `O(eps)`
/// signal, and are excluded from order fits.
pub const NOISE_FLOOR: f64 = 1e-13;

/// Sup-norm block errors per epsilon, plus optional integral checks.
#[derive(Clone, Debug)]
pub struct ErrorTable {
    /// Strictly decreasing ladder.
    pub epsilons: Vec<f64>,
    pub sup_err_11: Vec<f64>,
    pub sup_err_12: Vec<f64>,
    pub sup_err_22: Vec<f64>,
    /// Sup errors of the raw reduced solution (no boundary correction of the
    /// 12/22 blocks). Diagnostic only, not exported to CSV.
    pub raw_sup_err_12: Vec<f64>,
    pub raw_sup_err_22: Vec<f64>,
    /// Exponents `j` for which integral errors were computed.
    pub integral_js: Vec<u32>,
    /// `integral_12[row][j_idx]`: trapezoid integral of `|P12_eps - P12bar|^j`.
    pub integral_12: Vec<Vec<f64>>,
    pub integral_22: Vec<Vec<f64>>,
}

impl ErrorTable {
    /// CSV export: `epsilon,sup_err_11,sup_err_12,sup_err_22[,integral_j...]`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = vec![
            "epsilon".to_string(),
            "sup_err_11".to_string(),
            "sup_err_12".to_string(),
            "sup_err_22".to_string(),
        ];
        for j in &self.integral_js {
            header.push(format!("integral_12_j{j}"));
            header.push(format!("integral_22_j{j}"));
        }
        fmt::write_row(w, &header)?;
        for row in 0..self.epsilons.len() {
            let mut fields = vec![
                fmt::f64_field(self.epsilons[row]),
                fmt::f64_field(self.sup_err_11[row]),
                fmt::f64_field(self.sup_err_12[row]),
                fmt::f64_field(self.sup_err_22[row]),
            ];
            for jidx in 0..self.integral_js.len() {
                fields.push(fmt::f64_field(self.integral_12[row][jidx]));
                fields.push(fmt::f64_field(self.integral_22[row][jidx]));
            }
            fmt::write_row(w, &fields)?;
        }
        Ok(())
    }
}

/// Fitted log-log slopes, serialised as the sweep summary.
#[derive(Clone, Debug, Serialize)]
pub struct SlopeSummary {
    pub epsilons: Vec<f64>,
    pub slope_11: f64,
    pub slope_12: f64,
    pub slope_22: f64,
}

/// Knobs for [`sweep_epsilon_with_options`].
#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub step_control: StepControl,
    /// Stretched-time extent of the boundary trajectory; default `20 / gamma`.
    pub tau_max: Option<f64>,
    /// Exponents for integral-error columns.
    pub integral_js: Vec<u32>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            step_control: StepControl::default(),
            tau_max: None,
            integral_js: Vec::new(),
        }
    }
}

fn check_ladder(epsilons: &[f64]) -> Result<()> {
    if epsilons.is_empty() {
        return Err(Error::DimensionMismatch("epsilon ladder is empty".into()));
    }
    for w in epsilons.windows(2) {
        if !(w[1] < w[0]) {
            return Err(Error::DimensionMismatch(
                "epsilon ladder must be strictly decreasing".into(),
            ));
        }
    }
    for &e in epsilons {
        if !(e >= EPS_FLOOR && e <= 1.0) {
            return Err(Error::EpsilonOutOfRange(e));
        }
    }
    Ok(())
}

/// Precomputed reduced and layer blocks on the common grid.
struct CommonGridReference {
    grid: Vec<f64>,
    p11: Vec<nalgebra::DMatrix<f64>>,
    p12: Vec<nalgebra::DMatrix<f64>>,
    p22: Vec<nalgebra::DMatrix<f64>>,
}

fn reduced_on_grid(
    reduced: &ReducedSolution,
    data: &ProblemData,
    grid: &[f64],
) -> Result<CommonGridReference> {
    let mut eval = reduced.evaluator(data);
    let mut p11 = Vec::with_capacity(grid.len());
    let mut p12 = Vec::with_capacity(grid.len());
    let mut p22 = Vec::with_capacity(grid.len());
    for &t in grid {
        let pt = eval.eval(t)?;
        p11.push(pt.p11);
        p12.push(pt.p12);
        p22.push(pt.p22);
    }
    Ok(CommonGridReference {
        grid: grid.to_vec(),
        p11,
        p12,
        p22,
    })
}

/// Run the ladder: solve the full system per epsilon, build the composite,
/// and record sup-norm block errors on a shared uniform grid of
/// `grid_points` times.
pub fn sweep_epsilon(
    data: &ProblemData,
    epsilons: &[f64],
    grid_points: usize,
) -> Result<ErrorTable> {
    sweep_epsilon_with_options(data, epsilons, grid_points, &SweepOptions::default())
}

pub fn sweep_epsilon_with_options(
    data: &ProblemData,
    epsilons: &[f64],
    grid_points: usize,
    options: &SweepOptions,
) -> Result<ErrorTable> {
    check_ladder(epsilons)?;
    assert!(grid_points >= 2);
    let reduced = solve_reduced_dre(data, &options.step_control)?;
    let layer = terminal_boundary_layer(data, options.tau_max)?;
    let grid = uniform_grid(0.0, data.horizon, grid_points);
    let reference = reduced_on_grid(&reduced, data, &grid)?;

    let mut table = ErrorTable {
        epsilons: epsilons.to_vec(),
        sup_err_11: Vec::new(),
        sup_err_12: Vec::new(),
        sup_err_22: Vec::new(),
        raw_sup_err_12: Vec::new(),
        raw_sup_err_22: Vec::new(),
        integral_js: options.integral_js.clone(),
        integral_12: Vec::new(),
        integral_22: Vec::new(),
    };

    for &eps in epsilons {
        let errs = errors_at_epsilon(data, eps, &reference, &layer, options)
            .map_err(|e| e.at_epsilon(eps))?;
        table.sup_err_11.push(errs.sup_11);
        table.sup_err_12.push(errs.sup_12);
        table.sup_err_22.push(errs.sup_22);
        table.raw_sup_err_12.push(errs.raw_12);
        table.raw_sup_err_22.push(errs.raw_22);
        table.integral_12.push(errs.integral_12);
        table.integral_22.push(errs.integral_22);
    }
    Ok(table)
}

struct EpsilonErrors {
    sup_11: f64,
    sup_12: f64,
    sup_22: f64,
    raw_12: f64,
    raw_22: f64,
    integral_12: Vec<f64>,
    integral_22: Vec<f64>,
}

fn errors_at_epsilon(
    data: &ProblemData,
    eps: f64,
    reference: &CommonGridReference,
    layer: &BoundaryTrajectory,
    options: &SweepOptions,
) -> Result<EpsilonErrors> {
    let full = solve_full(data, eps, &options.step_control)?;
    let horizon = data.horizon;
    let m = reference.grid.len();
    let mut sup_11 = 0.0_f64;
    let mut sup_12 = 0.0_f64;
    let mut sup_22 = 0.0_f64;
    let mut raw_12_sup = 0.0_f64;
    let mut raw_22_sup = 0.0_f64;
    let mut raw12 = vec![0.0; m];
    let mut raw22 = vec![0.0; m];
    for (i, &t) in reference.grid.iter().enumerate() {
        let (p11e, p12e, p22e) = full.eval_blocks(t);
        let tau = (horizon - t) / eps;
        let (ph12, ph22) = layer.eval_or_zero(tau);
        sup_11 = sup_11.max((&p11e - &reference.p11[i]).norm());
        sup_12 = sup_12.max((&p12e - &reference.p12[i] - ph12).norm());
        sup_22 = sup_22.max((&p22e - &reference.p22[i] - ph22).norm());
        raw12[i] = (&p12e - &reference.p12[i]).norm();
        raw22[i] = (&p22e - &reference.p22[i]).norm();
        raw_12_sup = raw_12_sup.max(raw12[i]);
        raw_22_sup = raw_22_sup.max(raw22[i]);
    }
    let mut integral_12 = Vec::new();
    let mut integral_22 = Vec::new();
    for &j in &options.integral_js {
        integral_12.push(trapezoid_pow(&reference.grid, &raw12, j));
        integral_22.push(trapezoid_pow(&reference.grid, &raw22, j));
    }
    Ok(EpsilonErrors {
        sup_11,
        sup_12,
        sup_22,
        raw_12: raw_12_sup,
        raw_22: raw_22_sup,
        integral_12,
        integral_22,
    })
}

fn trapezoid_pow(grid: &[f64], values: &[f64], j: u32) -> f64 {
    let mut acc = 0.0;
    for i in 0..grid.len() - 1 {
        let a = values[i].powi(j as i32);
        let b = values[i + 1].powi(j as i32);
        acc += 0.5 * (a + b) * (grid[i + 1] - grid[i]);
    }
    acc
}

fn fit_slope(eps: &[f64], errs: &[f64]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = eps
        .iter()
        .zip(errs)
        .filter(|&(_, &e)| e > NOISE_FLOOR)
        .map(|(&x, &e)| (x.ln(), e.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::NoiseFloor);
    }
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let (sxx, sxy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| {
        (a + (x - mx) * (x - mx), b + (x - mx) * (y - my))
    });
    Ok(sxy / sxx)
}

/// Least-squares slopes of `log(err)` against `log(eps)` for the three
/// blocks. Requires at least 3 ladder points above the noise floor per
/// block.
pub fn fit_convergence_order(table: &ErrorTable) -> Result<(f64, f64, f64)> {
    if table.epsilons.len() < 3 {
        return Err(Error::DimensionMismatch(
            "order fit needs at least 3 epsilon values".into(),
        ));
    }
    let s11 = fit_slope(&table.epsilons, &table.sup_err_11)?;
    let s12 = fit_slope(&table.epsilons, &table.sup_err_12)?;
    let s22 = fit_slope(&table.epsilons, &table.sup_err_22)?;
    Ok((s11, s12, s22))
}

/// Trapezoid integral of the `j`-th power of the raw reduced-solution error
/// (no boundary correction) for the two off-slow blocks, on a 2001-point
/// uniform grid. Returns `(integral for P12, integral for P22)`.
pub fn integral_error_check(data: &ProblemData, epsilon: f64, j: u32) -> Result<(f64, f64)> {
    if !(epsilon >= EPS_FLOOR && epsilon <= 1.0) {
        return Err(Error::EpsilonOutOfRange(epsilon));
    }
    assert!(j >= 1, "integral exponent must be a positive integer");
    let options = SweepOptions {
        integral_js: vec![j],
        ..SweepOptions::default()
    };
    let table = sweep_epsilon_with_options(data, &[epsilon], 2001, &options)?;
    Ok((table.integral_12[0][0], table.integral_22[0][0]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_table(errs: impl Fn(f64) -> f64) -> ErrorTable {
        let eps = vec![0.1, 0.05, 0.025, 0.0125];
        let e: Vec<f64> = eps.iter().map(|&x| errs(x)).collect();
        ErrorTable {
            epsilons: eps,
            sup_err_11: e.clone(),
            sup_err_12: e.clone(),
            sup_err_22: e.clone(),
            raw_sup_err_12: vec![],
            raw_sup_err_22: vec![],
            integral_js: vec![],
            integral_12: vec![],
            integral_22: vec![],
        }
    }

    #[test]
    fn exact_loglinear_slopes() {
        let t = synthetic_table(|e| 3.0 * e);
        let (s11, s12, s22) = fit_convergence_order(&t).unwrap();
        assert!((s11 - 1.0).abs() < 1e-12);
        assert!((s12 - 1.0).abs() < 1e-12);
        assert!((s22 - 1.0).abs() < 1e-12);
        let t = synthetic_table(|e| 0.7 * e * e);
        let (s11, _, _) = fit_convergence_order(&t).unwrap();
        assert!((s11 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn noise_floor_is_rejected() {
        let t = synthetic_table(|_| 1e-15);
        assert!(matches!(fit_convergence_order(&t), Err(Error::NoiseFloor)));
    }

    #[test]
    fn ladder_validation() {
        let data = crate::presets::coupled_scalar();
        assert!(sweep_epsilon(&data, &[0.1, 0.2], 11).is_err());
        assert!(sweep_epsilon(&data, &[1e-5], 11).is_err());
        assert!(sweep_epsilon(&data, &[], 11).is_err());
    }

    #[test]
    fn single_epsilon_row() {
        let data = crate::presets::coupled_scalar();
        let t = sweep_epsilon(&data, &[0.2], 101).unwrap();
        assert_eq!(t.epsilons.len(), 1);
        assert!(t.sup_err_11[0].is_finite() && t.sup_err_11[0] >= 0.0);
        assert!(matches!(fit_convergence_order(&t), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn decoupled_data_has_zero_integral() {
        // Fully decoupled blocks (including the control path into the slow
        // block): P12_eps = P12bar = 0 identically.
        let mut data = crate::presets::coupled_scalar();
        data.a12[(0, 0)] = 0.0;
        data.a21[(0, 0)] = 0.0;
        data.b1[(0, 0)] = 0.0;
        let (i12, _) = integral_error_check(&data, 0.1, 1).unwrap();
        assert!(i12 < 1e-10, "integral {i12}");
    }
}
