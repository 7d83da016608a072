//! Numerical toolkit for slow-fast (two-timescale) stochastic linear-quadratic
//! control with multiplicative noise.
//!
//! The state is split into a slow block `X1` and a fast block `X2` whose drift
//! is scaled by `1/eps` and whose diffusion is scaled by `1/sqrt(eps)`. The
//! optimal feedback and value function are characterised by a matrix Riccati
//! differential equation. This crate provides:
//!
//! * [`riccati`] — backward integration of the full, `eps`-dependent Riccati
//!   system in its partitioned three-block form;
//! * [`reduced`] — the `eps = 0` limit: a differential Riccati equation for the
//!   slow block coupled with a stochastic algebraic Riccati equation for the
//!   fast block, solved by Newton–Kleinman on Lyapunov solves, plus the
//!   constructive Lyapunov-iteration scheme used as a cross-check;
//! * [`boundary`] — the stretched-time boundary-layer correction that repairs
//!   the terminal mismatch of the reduced solution;
//! * [`sweep`] — eps-ladders comparing full solutions against
//!   reduced-plus-boundary composites, with convergence-order fits;
//! * [`sim`] — Euler–Maruyama simulation and Monte Carlo cost estimation under
//!   linear state feedback, with counter-based random number streams so that
//!   common-random-number comparisons are reproducible under any parallel
//!   schedule.
//!
//! All solvers operate at desk scale (state dimensions up to a few tens);
//! dense linear algebra throughout.

pub mod boundary;
pub mod error;
pub mod linalg;
pub mod ode;
pub mod presets;
pub mod problem;
pub mod reduced;
pub mod riccati;
pub mod sim;
pub mod sweep;

mod fmt;

pub use boundary::{composite_approximation, estimate_decay_rate, solve_boundary_layer, BoundaryTrajectory};
pub use error::Error;
pub use linalg::{
    assert_psd, is_l2_stable, solve_stochastic_lyapunov, spectral_abscissa, StabilityReport,
    SymMatrix,
};
pub use ode::{DenseTrajectory, StepControl};
pub use presets::{coupled_scalar, coupled_scalar_noise};
pub use problem::{
    reduced_coefficients, scaled_coefficients, validate, ProblemData, ReducedCoefficients,
    ScaledCoefficients, ValidationReport,
};
pub use reduced::{
    compute_p12, h2_linear_bound, lyapunov_iteration_check, reduced_gains, residuals_reduced,
    solve_h2, solve_reduced_dre, AreSolution, P11Iterate, ReducedSolution,
};
pub use riccati::{assemble_p, eval_full_rhs, feedback_gains_full, solve_full, RiccatiTrajectory};
pub use sim::{
    cost_gap_experiment, mc_cost, simulate_path, CostEstimate, CostGapReport, GainSchedule,
    StatePath,
};
pub use sweep::{fit_convergence_order, integral_error_check, sweep_epsilon, ErrorTable};

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
