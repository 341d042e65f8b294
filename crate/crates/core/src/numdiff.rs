//! Central finite differences, used as the fallback derivative path for
//! metric directional derivatives and as the independent oracle in tests.

use crate::linalg::{Matrix, Vector};

/// Step size `1e-5 * (1 + |x|)` used for first-derivative checks.
pub fn default_step(x: &Vector) -> f64 {
    1e-5 * (1.0 + x.norm())
}

/// Jacobian of a vector-valued map by central differences.
pub fn central_jacobian(f: &dyn Fn(&Vector) -> Vector, x: &Vector, step: f64) -> Matrix {
    let dim_out = f(x).len();
    let mut jac = Matrix::zeros(dim_out, x.len());
    let mut xp = x.clone();
    let mut xm = x.clone();
    for l in 0..x.len() {
        xp[l] = x[l] + step;
        xm[l] = x[l] - step;
        let diff = (f(&xp) - f(&xm)) / (2.0 * step);
        jac.set_column(l, &diff);
        xp[l] = x[l];
        xm[l] = x[l];
    }
    jac
}

/// Gradient of a scalar map by central differences.
pub fn central_gradient(f: &dyn Fn(&Vector) -> f64, x: &Vector, step: f64) -> Vector {
    let mut grad = Vector::zeros(x.len());
    let mut xp = x.clone();
    let mut xm = x.clone();
    for l in 0..x.len() {
        xp[l] = x[l] + step;
        xm[l] = x[l] - step;
        grad[l] = (f(&xp) - f(&xm)) / (2.0 * step);
        xp[l] = x[l];
        xm[l] = x[l];
    }
    grad
}

/// Directional derivative of a matrix-valued map along `v` (not normalized):
/// `(F(x + eps v) - F(x - eps v)) / (2 eps)` with `eps = step / |v|`.
pub fn central_directional(
    f: &dyn Fn(&Vector) -> Matrix,
    x: &Vector,
    v: &Vector,
    step: f64,
) -> Matrix {
    let eps = step / v.norm();
    let xp = x + v * eps;
    let xm = x - v * eps;
    (f(&xp) - f(&xm)) / (2.0 * eps)
}
