//! Adaptive explicit Runge–Kutta integration with dense output.
//!
//! A Dormand–Prince 5(4) embedded pair drives every trajectory solve in this
//! crate. Accepted nodes store both the state and its derivative, so dense
//! output is cubic Hermite interpolation between nodes; that is accurate to
//! `O(h^4)`, which matches the interpolation needs of the eps-sweeps (the max
//! step is always capped well below the scale of the dynamics).
//!
//! Terminal-value problems are integrated in reversed time by the callers;
//! this module only sees initial-value problems on an increasing variable.

use nalgebra::DVector;

use crate::error::Error;
use crate::Result;

/// Absolute and relative local-error tolerances for the adaptive stepper.
#[derive(Clone, Copy, Debug)]
pub struct StepControl {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl {
            rtol: 1e-9,
            atol: 1e-12,
        }
    }
}

impl StepControl {
    pub fn new(rtol: f64, atol: f64) -> Self {
        StepControl { rtol, atol }
    }
}

/// Trajectory on the accepted-step grid with stored derivatives.
#[derive(Clone, Debug)]
pub struct DenseTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub derivs: Vec<DVector<f64>>,
}

impl DenseTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Cubic Hermite evaluation; clamps outside the stored range.
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.states[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.states[n - 1].clone();
        }
        let idx = match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(i) => return self.states[i].clone(),
            Err(i) => i - 1,
        };
        let (t0, t1) = (self.times[idx], self.times[idx + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let (y0, y1) = (&self.states[idx], &self.states[idx + 1]);
        let (d0, d1) = (&self.derivs[idx], &self.derivs[idx + 1]);
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        y0 * h00 + d0 * (h10 * h) + y1 * h01 + d1 * (h11 * h)
    }

    /// List of accepted step sizes.
    pub fn step_sizes(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

// Dormand-Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// y5 - y4 error weights (b - b_hat), with the k7 contribution.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

/// Integrate `y' = rhs(t, y)` from `t0` to `t1` (`t1 > t0`).
///
/// `on_accept` runs after every accepted step (including the initial point)
/// and may abort the solve by returning an error. A right-hand-side failure
/// during trial stages is treated as a step rejection and retried with a
/// smaller step; if the step underflows, the failure is surfaced.
pub fn integrate_adaptive<F, G>(
    rhs: &mut F,
    t0: f64,
    t1: f64,
    y0: DVector<f64>,
    ctrl: &StepControl,
    max_step: f64,
    on_accept: &mut G,
) -> Result<DenseTrajectory>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    G: FnMut(f64, &DVector<f64>) -> Result<()>,
{
    let span = t1 - t0;
    assert!(span > 0.0, "integration span must be positive");
    let hmin = 1e-14 * span;
    let max_step = max_step.min(span);

    let mut t = t0;
    let mut y = y0;
    let mut k1 = rhs(t, &y)?;
    on_accept(t, &y)?;

    let mut traj = DenseTrajectory {
        times: vec![t],
        states: vec![y.clone()],
        derivs: vec![k1.clone()],
    };

    let mut h = (max_step * 1e-2).max(hmin);
    loop {
        if t >= t1 {
            break;
        }
        h = h.min(max_step).min(t1 - t);
        if h < hmin {
            return Err(Error::StepSizeUnderflow {
                time: t,
                limit: hmin,
            });
        }

        let attempt = (|| -> Result<(DVector<f64>, DVector<f64>, f64)> {
            let k2 = rhs(t + C2 * h, &(&y + &k1 * (A21 * h)))?;
            let k3 = rhs(t + C3 * h, &(&y + (&k1 * A31 + &k2 * A32) * h))?;
            let k4 = rhs(t + C4 * h, &(&y + (&k1 * A41 + &k2 * A42 + &k3 * A43) * h))?;
            let k5 = rhs(
                t + C5 * h,
                &(&y + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h),
            )?;
            let k6 = rhs(
                t + h,
                &(&y + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h),
            )?;
            let y_new = &y + (&k1 * B1 + &k3 * B3 + &k4 * B4 + &k5 * B5 + &k6 * B6) * h;
            let k7 = rhs(t + h, &y_new)?;
            let err_vec =
                (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
            let mut acc = 0.0;
            for i in 0..y.len() {
                let scale = ctrl.atol + ctrl.rtol * y[i].abs().max(y_new[i].abs());
                let r = err_vec[i] / scale;
                acc += r * r;
            }
            let err_norm = (acc / y.len() as f64).sqrt();
            Ok((y_new, k7, err_norm))
        })();

        match attempt {
            Err(e) => {
                // A stage left the admissible region; retry with a smaller step.
                h *= 0.25;
                if h < hmin {
                    return Err(e);
                }
            }
            Ok((y_new, k7, err_norm)) => {
                if err_norm <= 1.0 || h <= hmin * 4.0 {
                    t += h;
                    y = y_new;
                    k1 = k7; // first-same-as-last
                    on_accept(t, &y)?;
                    traj.times.push(t);
                    traj.states.push(y.clone());
                    traj.derivs.push(k1.clone());
                }
                let factor = if err_norm == 0.0 {
                    5.0
                } else {
                    (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0)
                };
                h *= factor;
            }
        }
    }
    Ok(traj)
}

/// Fixed-step classical RK4 on a uniform grid, with coefficient evaluation at
/// half steps delegated to the right-hand side. Used by the constructive
/// Lyapunov-iteration scheme where every iterate lives on one shared grid.
pub fn integrate_rk4_uniform<F>(
    rhs: &mut F,
    grid: &[f64],
    y0: DVector<f64>,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let mut states = Vec::with_capacity(grid.len());
    let mut derivs = Vec::with_capacity(grid.len());
    let mut y = y0;
    let mut d = rhs(grid[0], &y)?;
    states.push(y.clone());
    derivs.push(d.clone());
    for w in grid.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let h = t_next - t;
        let k1 = d.clone();
        let k2 = rhs(t + 0.5 * h, &(&y + &k1 * (0.5 * h)))?;
        let k3 = rhs(t + 0.5 * h, &(&y + &k2 * (0.5 * h)))?;
        let k4 = rhs(t_next, &(&y + &k3 * h))?;
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        d = rhs(t_next, &y)?;
        states.push(y.clone());
        derivs.push(d.clone());
    }
    Ok((states, derivs))
}

/// Uniform grid of `n >= 2` points covering `[a, b]`.
pub fn uniform_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    let h = (b - a) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { b } else { a + i as f64 * h })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_matches_closed_form() {
        let mut rhs = |_t: f64, y: &DVector<f64>| Ok(-y * 2.0);
        let traj = integrate_adaptive(
            &mut rhs,
            0.0,
            2.0,
            DVector::from_element(1, 1.0),
            &StepControl::new(1e-10, 1e-12),
            0.01,
            &mut |_, _| Ok(()),
        )
        .unwrap();
        // Dense output is cubic Hermite: error ~ h^4 |y''''| / 384.
        for &t in &[0.3, 0.77, 1.5, 2.0] {
            let v = traj.eval(t)[0];
            assert!((v - (-2.0 * t).exp()).abs() < 2e-9, "t={t} v={v}");
        }
    }

    #[test]
    fn harmonic_oscillator_dense_output() {
        let mut rhs = |_t: f64, y: &DVector<f64>| {
            Ok(DVector::from_column_slice(&[y[1], -y[0]]))
        };
        let traj = integrate_adaptive(
            &mut rhs,
            0.0,
            6.0,
            DVector::from_column_slice(&[1.0, 0.0]),
            &StepControl::new(1e-10, 1e-12),
            0.03,
            &mut |_, _| Ok(()),
        )
        .unwrap();
        for &t in &[0.5, 1.9, 3.3, 5.99] {
            let v = traj.eval(t);
            assert!((v[0] - t.cos()).abs() < 1e-8);
            assert!((v[1] + t.sin()).abs() < 1e-8);
        }
    }

    #[test]
    fn rk4_uniform_matches_exponential() {
        let grid = uniform_grid(0.0, 1.0, 201);
        let mut rhs = |_t: f64, y: &DVector<f64>| Ok(y * -1.0);
        let (states, _) = integrate_rk4_uniform(&mut rhs, &grid, DVector::from_element(1, 1.0)).unwrap();
        let v = states.last().unwrap()[0];
        assert!((v - (-1.0_f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn stage_failure_shrinks_then_surfaces() {
        // RHS valid only for y < 1.2 but pushing y upward: must underflow and
        // surface the stage error rather than loop forever.
        let mut rhs = |_t: f64, y: &DVector<f64>| {
            if y[0] > 1.2 {
                Err(Error::NonFinite("test region".into()))
            } else {
                Ok(DVector::from_element(1, 10.0))
            }
        };
        let res = integrate_adaptive(
            &mut rhs,
            0.0,
            1.0,
            DVector::from_element(1, 1.0),
            &StepControl::default(),
            0.5,
            &mut |_, _| Ok(()),
        );
        assert!(res.is_err());
    }
}
