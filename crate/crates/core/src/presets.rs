//! Small reference instances used by tests, benches and the CLI examples.

use nalgebra::DMatrix;

use crate::linalg::SymMatrix;
use crate::problem::ProblemData;

fn m1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// Scalar slow/fast pair with cross coupling, no noise:
/// `A = [[0, 1], [1, -1]]`, `B = [1, 1]`, `Q = I`, `R = 1`, `T = 1`.
pub fn coupled_scalar() -> ProblemData {
    ProblemData {
        n1: 1,
        n2: 1,
        k: 1,
        a11: m1(0.0),
        a12: m1(1.0),
        a21: m1(1.0),
        a22: m1(-1.0),
        b1: m1(1.0),
        b2: m1(1.0),
        c11: m1(0.0),
        c12: m1(0.0),
        c21: m1(0.0),
        c22: m1(0.0),
        d1: m1(0.0),
        d2: m1(0.0),
        q: SymMatrix::identity(2),
        r: SymMatrix::scalar(1.0),
        horizon: 1.0,
    }
}

/// [`coupled_scalar`] plus multiplicative noise on states and control.
pub fn coupled_scalar_noise() -> ProblemData {
    let mut data = coupled_scalar();
    data.c11 = m1(0.2);
    data.c12 = m1(0.1);
    data.c21 = m1(0.1);
    data.c22 = m1(0.5);
    data.d1 = m1(0.1);
    data.d2 = m1(0.2);
    data
}
