//! Time integration of the parameter-space gradient flow and of every
//! intrinsic reformulation: the scalar law, the two-layer relaxed-balanced
//! flow, the three-layer diagonal flow with its coupled positive fixed point,
//! and the deep linear flow with per-eigenvalue polynomial root recovery.

use crate::linalg::{sym_eig, symmetrize, unvec, vec_mat, Matrix, Vector, RANK_TOL};
use crate::models::Model;
use crate::objectives::Objective;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("step and horizon must be positive, got dt = {dt}, t_final = {t_final}")]
    InvalidStep { dt: f64, t_final: f64 },
    #[error("non-finite state at t = {last_time}; integration aborted")]
    BlowUp { last_time: f64, partial: Trajectory },
    #[error("negative radicand {0:.6e} in the scalar metric")]
    NegativeRadicand(f64),
    #[error("matrix entries must be strictly positive ({context})")]
    NonPositiveEntries { context: &'static str },
    #[error("fixed-point iteration exceeded {max_iter} iterations")]
    MaxIterExceeded { max_iter: usize },
    #[error("nonpositive iterate in the fixed point (infeasible lambda/mu)")]
    NonPositiveIterate,
    #[error("gram recovery needs a PSD input, got eigenvalue {0:.6e}")]
    NotPsd(f64),
    #[error("zero entry in Z at ({row}, {col}); the three-layer flow needs Z_ij != 0")]
    ZeroEntry { row: usize, col: usize },
    #[error("deep linear flow needs square Z, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("trajectories sampled on different time grids")]
    TimeGridMismatch,
    #[error("{0}")]
    External(String),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Objective(#[from] crate::objectives::ObjectiveError),
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
}

/// Sampled solution of an ODE: strictly increasing times, one flat state per
/// sample.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
}

impl Trajectory {
    pub fn last_state(&self) -> &Vector {
        self.states.last().expect("nonempty trajectory")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Classical fixed-step RK4; the final step is shortened to land exactly on
/// `t_final`. Aborts with the partial trajectory when a state stops being
/// finite.
pub fn rk4_integrate(
    field: &dyn Fn(&Vector) -> Result<Vector, FlowError>,
    x0: &Vector,
    t_final: f64,
    dt: f64,
) -> Result<Trajectory, FlowError> {
    if dt <= 0.0 || t_final <= 0.0 {
        return Err(FlowError::InvalidStep { dt, t_final });
    }
    let mut times = vec![0.0];
    let mut states = vec![x0.clone()];
    let mut t = 0.0;
    let mut x = x0.clone();
    while t < t_final - 1e-12 * t_final.max(1.0) {
        let h = dt.min(t_final - t);
        let k1 = field(&x)?;
        let k2 = field(&(&x + &k1 * (h / 2.0)))?;
        let k3 = field(&(&x + &k2 * (h / 2.0)))?;
        let k4 = field(&(&x + &k3 * h))?;
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        t += h;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(FlowError::BlowUp {
                last_time: times[times.len() - 1],
                partial: Trajectory { times, states },
            });
        }
        times.push(t);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

/// Gradient flow on parameters: θ' = -∂φ(θ)^T ∇f(φ(θ)).
pub fn param_gradient_flow(
    model: &Model,
    obj: &Objective,
    theta0: &Vector,
    t_final: f64,
    dt: f64,
) -> Result<Trajectory, FlowError> {
    model.check_len(theta0)?;
    let field = |theta: &Vector| -> Result<Vector, FlowError> {
        let z = model.lift(theta)?;
        let g = obj.gradient(&z)?;
        let jac = model.jacobian(theta)?;
        Ok(-(jac.transpose() * g))
    };
    rk4_integrate(&field, theta0, t_final, dt)
}

/// The conserved scalar data for the inner-product lifting z = <u, v>.
#[derive(Debug, Clone)]
pub enum ScalarBalance {
    /// r = 1 case: lambda = u_0^2 - v_0^2.
    Lambda(f64),
    /// General r: S = u_0 u_0^T - v_0 v_0^T.
    Gram(Matrix),
}

impl ScalarBalance {
    /// The constant `2 tr(S^2) - tr(S)^2` (which is `lambda^2` when r = 1).
    pub fn radicand_constant(&self) -> Result<f64, FlowError> {
        match self {
            ScalarBalance::Lambda(l) => Ok(l * l),
            ScalarBalance::Gram(s) => {
                let s = symmetrize(s);
                let s2 = (&s * &s).trace();
                Ok(2.0 * s2 - s.trace().powi(2))
            }
        }
    }
}

/// K(z) = sqrt(2 tr(S^2) - tr(S)^2 + 4 z^2).
pub fn scalar_metric(balance: &ScalarBalance, z: f64) -> Result<f64, FlowError> {
    let c = balance.radicand_constant()?;
    let radicand = c + 4.0 * z * z;
    if radicand < -1e-12 {
        return Err(FlowError::NegativeRadicand(radicand));
    }
    Ok(radicand.max(0.0).sqrt())
}

/// Right-hand side of the two-layer relaxed-balanced intrinsic flow:
/// `-Π_{ZZ^T}[λ/2 I + 1/2 sqrt(λ^2 I + 4 ZZ^T)] G
///  - G Π_{Z^T Z}[-λ/2 I + 1/2 sqrt(λ^2 I + 4 Z^T Z)]`.
pub fn two_layer_rhs(z: &Matrix, lambda: f64, g: &Matrix) -> Result<Matrix, FlowError> {
    let left = two_layer_gram(z, lambda, Side::Left)?;
    let right = two_layer_gram(z, lambda, Side::Right)?;
    Ok(-(&left * g) - g * &right)
}

#[derive(Clone, Copy)]
pub enum Side {
    /// Recovers U U^T from Z Z^T.
    Left,
    /// Recovers V V^T from Z^T Z.
    Right,
}

/// The closed-form Gram factor of the two-layer metric:
/// `Π_A [±λ/2 I + 1/2 sqrt(λ^2 I + 4 A)]` with A = ZZ^T (left) or Z^T Z
/// (right), assembled in A's eigenbasis.
pub fn two_layer_gram(z: &Matrix, lambda: f64, side: Side) -> Result<Matrix, FlowError> {
    let (a, sign) = match side {
        Side::Left => (symmetrize(&(z * z.transpose())), 1.0),
        Side::Right => (symmetrize(&(z.transpose() * z)), -1.0),
    };
    let spec = sym_eig(&a)?;
    let cut = RANK_TOL * spec.spectral_norm() * a.nrows() as f64;
    let vals: Vec<f64> = spec
        .eigenvalues
        .iter()
        .map(|&mu| {
            if mu > cut {
                sign * lambda / 2.0 + 0.5 * (lambda * lambda + 4.0 * mu.max(0.0)).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut k = 0;
    Ok(spec.assemble(|_| {
        let v = vals[k];
        k += 1;
        v
    }))
}

/// Residual data of the coupled positive fixed point of the three-layer flow.
#[derive(Debug, Clone)]
pub struct AlphaBeta {
    pub alpha: Vector,
    pub beta: Vector,
    pub iterations: usize,
    /// Max relative residual of the two coupled equations at the solution.
    pub residual: f64,
}

/// Solves the coupled system
/// `α^2 - |Z|^2 diag(β)^{-1} 1 - λ ⊙ α = 0`,
/// `β^2 - (|Z|^2)^T diag(α)^{-1} 1 - μ ⊙ α = 0`
/// by damped fixed-point iteration of the positive-root maps, starting from
/// α = β = 1 and stopping when the Thompson distance between successive
/// iterates drops below `tol`.
pub fn solve_alpha_beta(
    zsq: &Matrix,
    lambda: &Vector,
    mu: &Vector,
    tol: f64,
    max_iter: usize,
) -> Result<AlphaBeta, FlowError> {
    let ones_n = Vector::from_element(zsq.nrows(), 1.0);
    let ones_m = Vector::from_element(zsq.ncols(), 1.0);
    solve_alpha_beta_from(zsq, lambda, mu, &ones_n, &ones_m, tol, max_iter)
}

/// Same as [`solve_alpha_beta`] but from a caller-chosen positive start, for
/// probing start-dependence when lambda or mu are nonzero (the contraction
/// guarantee only covers the balanced case).
pub fn solve_alpha_beta_from(
    zsq: &Matrix,
    lambda: &Vector,
    mu: &Vector,
    alpha0: &Vector,
    beta0: &Vector,
    tol: f64,
    max_iter: usize,
) -> Result<AlphaBeta, FlowError> {
    let (n, m) = (zsq.nrows(), zsq.ncols());
    assert_eq!(lambda.len(), n, "lambda must have length n");
    assert_eq!(mu.len(), m, "mu must have length m");
    if zsq.iter().any(|&x| x <= 0.0) {
        return Err(FlowError::NonPositiveEntries {
            context: "|Z|^2 entries",
        });
    }
    if alpha0.iter().chain(beta0.iter()).any(|&x| x <= 0.0) {
        return Err(FlowError::NonPositiveIterate);
    }
    let positive_root = |l: f64, c: f64| -> f64 { (l + (l * l + 4.0 * c).sqrt()) / 2.0 };
    let mut alpha = alpha0.clone();
    let mut beta = beta0.clone();
    let thompson = |a: &Vector, b: &Vector| -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x / y).ln().abs())
            .fold(0.0f64, f64::max)
    };
    let mut prev_dist = f64::INFINITY;
    for it in 1..=max_iter {
        // sequential S ∘ T update: β from the current α, then α from the new β
        let mut beta_new = Vector::zeros(m);
        for j in 0..m {
            let c: f64 = (0..n).map(|i| zsq[(i, j)] / alpha[i]).sum();
            beta_new[j] = positive_root(mu[j], c);
        }
        let mut alpha_new = Vector::zeros(n);
        for i in 0..n {
            let c: f64 = (0..m).map(|j| zsq[(i, j)] / beta_new[j]).sum();
            alpha_new[i] = positive_root(lambda[i], c);
        }
        if alpha_new.iter().chain(beta_new.iter()).any(|&x| x <= 0.0) {
            return Err(FlowError::NonPositiveIterate);
        }
        let dist = thompson(&alpha_new, &alpha).max(thompson(&beta_new, &beta));
        if dist > prev_dist {
            // damp by a half-step in log space, which preserves positivity
            for i in 0..n {
                alpha_new[i] = (alpha[i] * alpha_new[i]).sqrt();
            }
            for j in 0..m {
                beta_new[j] = (beta[j] * beta_new[j]).sqrt();
            }
        }
        prev_dist = dist;
        alpha = alpha_new;
        beta = beta_new;
        if dist < tol {
            let residual = alpha_beta_residual(zsq, lambda, mu, &alpha, &beta);
            return Ok(AlphaBeta {
                alpha,
                beta,
                iterations: it,
                residual,
            });
        }
    }
    Err(FlowError::MaxIterExceeded { max_iter })
}

fn alpha_beta_residual(
    zsq: &Matrix,
    lambda: &Vector,
    mu: &Vector,
    alpha: &Vector,
    beta: &Vector,
) -> f64 {
    let (n, m) = (zsq.nrows(), zsq.ncols());
    let mut worst = 0.0f64;
    for i in 0..n {
        let c: f64 = (0..m).map(|j| zsq[(i, j)] / beta[j]).sum();
        let res = alpha[i] * alpha[i] - c - lambda[i] * alpha[i];
        worst = worst.max(res.abs() / (1.0 + alpha[i] * alpha[i] + c.abs()));
    }
    for j in 0..m {
        let c: f64 = (0..n).map(|i| zsq[(i, j)] / alpha[i]).sum();
        let res = beta[j] * beta[j] - c - mu[j] * beta[j];
        worst = worst.max(res.abs() / (1.0 + beta[j] * beta[j] + c.abs()));
    }
    worst
}

/// Default Thompson-distance tolerance of the fixed-point solver.
pub const ALPHA_BETA_TOL: f64 = 1e-13;
pub const ALPHA_BETA_MAX_ITER: usize = 500;

/// Right-hand side of the three-layer diagonal intrinsic flow:
/// `-ddiag(G Z^T) diag(α)^{-1} Z - diag(α) G diag(β) - Z diag(β)^{-1} ddiag(Z^T G)`.
pub fn three_layer_rhs(
    z: &Matrix,
    lambda: &Vector,
    mu: &Vector,
    g: &Matrix,
) -> Result<Matrix, FlowError> {
    for j in 0..z.ncols() {
        for i in 0..z.nrows() {
            if z[(i, j)] == 0.0 {
                return Err(FlowError::ZeroEntry { row: i, col: j });
            }
        }
    }
    let zsq = z.map(|x| x * x);
    let ab = solve_alpha_beta(&zsq, lambda, mu, ALPHA_BETA_TOL, ALPHA_BETA_MAX_ITER)?;
    let (n, m) = (z.nrows(), z.ncols());
    let gz_t = g * z.transpose();
    let zt_g = z.transpose() * g;
    let mut rhs = Matrix::zeros(n, m);
    for j in 0..m {
        for i in 0..n {
            let term1 = gz_t[(i, i)] / ab.alpha[i] * z[(i, j)];
            let term2 = ab.alpha[i] * g[(i, j)] * ab.beta[j];
            let term3 = z[(i, j)] / ab.beta[j] * zt_g[(j, j)];
            rhs[(i, j)] = -(term1 + term2 + term3);
        }
    }
    Ok(rhs)
}

/// Root lists of the recovery polynomials of the deep linear flow:
/// `a_0 = 0, a_k = λ_{L-1} + ... + λ_{L-k}` and
/// `b_0 = 0, b_k = -(λ_1 + ... + λ_k)`, both of length L.
#[derive(Debug, Clone, PartialEq)]
pub struct PolySpec {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub depth: usize,
}

impl PolySpec {
    pub fn from_lambdas(lambda: &[f64]) -> Self {
        let depth = lambda.len() + 1;
        let mut a = vec![0.0];
        for k in 1..depth {
            a.push(a[k - 1] + lambda[depth - 1 - k]);
        }
        let mut b = vec![0.0];
        for k in 1..depth {
            b.push(b[k - 1] - lambda[k - 1]);
        }
        PolySpec { a, b, depth }
    }
}

fn poly_eval(x: f64, roots: &[f64]) -> f64 {
    roots.iter().map(|r| x - r).product()
}

fn poly_deriv(x: f64, roots: &[f64]) -> f64 {
    // d/dx Π (x - r_k) = Σ_k Π_{j≠k} (x - r_j)
    let mut total = 0.0;
    for k in 0..roots.len() {
        let mut p = 1.0;
        for (j, r) in roots.iter().enumerate() {
            if j != k {
                p *= x - r;
            }
        }
        total += p;
    }
    total
}

/// Given `E = Π_k (P - root_k I)` for a symmetric PSD `P` with spectrum lower
/// bounded by `max(0, roots)`, recovers `P`: per eigenvalue `e` of `E` the
/// unique `x >= max(0, roots)` with `Π_k (x - root_k) = e` is bracketed by
/// bisection and Newton-polished, then `P` is reassembled in E's eigenbasis
/// (valid because P commutes with E).
pub fn recover_gram(e_mat: &Matrix, roots: &[f64]) -> Result<Matrix, FlowError> {
    let spec = sym_eig(e_mat)?;
    let lower = roots.iter().cloned().fold(0.0f64, f64::max);
    let mut recovered = Vec::with_capacity(spec.eigenvalues.len());
    for &e in spec.eigenvalues.iter() {
        if e < -1e-12 {
            return Err(FlowError::NotPsd(e));
        }
        recovered.push(invert_poly_at(e.max(0.0), roots, lower));
    }
    let mut k = 0;
    Ok(spec.assemble(|_| {
        let v = recovered[k];
        k += 1;
        v
    }))
}

/// Unique root of `Π_k (x - root_k) = e` with `x >= lower`, where the product
/// is increasing on `[lower, ∞)` and vanishes at `lower`.
fn invert_poly_at(e: f64, roots: &[f64], lower: f64) -> f64 {
    debug_assert!(e >= 0.0);
    let mut lo = lower;
    let mut hi = lower + 1.0;
    while poly_eval(hi, roots) < e {
        hi = lower + 2.0 * (hi - lower);
    }
    // bisection to relative width 1e-14, then Newton polish inside the bracket
    for _ in 0..200 {
        if (hi - lo) <= 1e-14 * hi.abs().max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if poly_eval(mid, roots) < e {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..4 {
        let f = poly_eval(x, roots) - e;
        let df = poly_deriv(x, roots);
        if df.abs() < f64::MIN_POSITIVE {
            break;
        }
        let next = x - f / df;
        if next.is_finite() && next >= lo && next <= hi {
            x = next;
        } else {
            break;
        }
    }
    x
}

/// Right-hand side of the deep linear intrinsic flow (square matrices):
/// recovers `P = U_L U_L^T` and `N = U_1^T U_1` from Z via [`recover_gram`],
/// forms `S_j = Π_{k=0}^{L-j-1} (P - a_k I)` and `T_j = Π_{k=0}^{j-2} (N - b_k I)`
/// and returns `-Σ_{j=1}^{L} S_j G T_j`.
pub fn deep_linear_rhs(z: &Matrix, lambda: &[f64], g: &Matrix) -> Result<Matrix, FlowError> {
    if z.nrows() != z.ncols() {
        return Err(FlowError::NotSquare {
            rows: z.nrows(),
            cols: z.ncols(),
        });
    }
    let n = z.nrows();
    let depth = lambda.len() + 1;
    let poly = PolySpec::from_lambdas(lambda);
    let p = recover_gram(&symmetrize(&(z * z.transpose())), &poly.a)?;
    let nu = recover_gram(&symmetrize(&(z.transpose() * z)), &poly.b)?;
    let eye = Matrix::identity(n, n);
    // prefix products of (P - a_k I) for S_j and (N - b_k I) for T_j
    let mut s_factors = vec![eye.clone()];
    for k in 0..depth - 1 {
        let next = &s_factors[k] * (&p - &eye * poly.a[k]);
        s_factors.push(next);
    }
    let mut t_factors = vec![eye.clone()];
    for k in 0..depth - 1 {
        let next = &t_factors[k] * (&nu - &eye * poly.b[k]);
        t_factors.push(next);
    }
    let mut rhs = Matrix::zeros(n, n);
    for j in 1..=depth {
        // S_j has degree L - j, T_j has degree j - 1
        rhs += &s_factors[depth - j] * g * &t_factors[j - 1];
    }
    Ok(-rhs)
}

/// The intrinsic right-hand sides ż = -K(z)∇f(z) shipped by the artifact.
#[derive(Debug, Clone)]
pub enum IntrinsicRhs {
    /// Scalar inner-product lifting; `balance` fixes the conserved radicand.
    Scalar { balance: ScalarBalance },
    /// Two-layer relaxed balanced with lifted shape (n, m).
    TwoLayer { n: usize, m: usize, lambda: f64 },
    /// Three-layer diagonal path-lifting with lifted shape (n, m).
    ThreeLayer {
        n: usize,
        m: usize,
        lambda: Vector,
        mu: Vector,
    },
    /// Deep linear chain with square n x n layers.
    DeepLinear { n: usize, lambda: Vec<f64> },
}

impl IntrinsicRhs {
    pub fn lifted_dim(&self) -> usize {
        match self {
            IntrinsicRhs::Scalar { .. } => 1,
            IntrinsicRhs::TwoLayer { n, m, .. } => n * m,
            IntrinsicRhs::ThreeLayer { n, m, .. } => n * m,
            IntrinsicRhs::DeepLinear { n, .. } => n * n,
        }
    }

    /// Evaluates ż given z and g = ∇f(z).
    pub fn eval(&self, z: &Vector, g: &Vector) -> Result<Vector, FlowError> {
        match self {
            IntrinsicRhs::Scalar { balance } => {
                let k = scalar_metric(balance, z[0])?;
                Ok(Vector::from_vec(vec![-k * g[0]]))
            }
            IntrinsicRhs::TwoLayer { n, m, lambda } => {
                let zm = unvec(z, *n, *m)?;
                let gm = unvec(g, *n, *m)?;
                Ok(vec_mat(&two_layer_rhs(&zm, *lambda, &gm)?))
            }
            IntrinsicRhs::ThreeLayer { n, m, lambda, mu } => {
                let zm = unvec(z, *n, *m)?;
                let gm = unvec(g, *n, *m)?;
                Ok(vec_mat(&three_layer_rhs(&zm, lambda, mu, &gm)?))
            }
            IntrinsicRhs::DeepLinear { n, lambda } => {
                let zm = unvec(z, *n, *n)?;
                let gm = unvec(g, *n, *n)?;
                Ok(vec_mat(&deep_linear_rhs(&zm, lambda, &gm)?))
            }
        }
    }
}

/// Integrates ż = -K(z)∇f(z) with RK4 on the lifted variable.
pub fn intrinsic_flow(
    rhs: &IntrinsicRhs,
    z0: &Vector,
    obj: &Objective,
    t_final: f64,
    dt: f64,
) -> Result<Trajectory, FlowError> {
    let field = |z: &Vector| -> Result<Vector, FlowError> {
        let g = obj.gradient(z)?;
        rhs.eval(z, &g)
    };
    rk4_integrate(&field, z0, t_final, dt)
}

/// Per-sample normalized gap between two trajectories on the same grid:
/// `|z1(t) - z2(t)| / (1 + |z1(t)|)`.
pub fn trajectory_compare(t1: &Trajectory, t2: &Trajectory) -> Result<Vec<f64>, FlowError> {
    if t1.times.len() != t2.times.len()
        || t1
            .times
            .iter()
            .zip(&t2.times)
            .any(|(a, b)| (a - b).abs() > 1e-12 * a.abs().max(1.0))
    {
        return Err(FlowError::TimeGridMismatch);
    }
    Ok(t1
        .states
        .iter()
        .zip(&t2.states)
        .map(|(a, b)| (a - b).norm() / (1.0 + a.norm()))
        .collect())
}

/// Lifts a parameter trajectory through φ.
pub fn lift_trajectory(model: &Model, traj: &Trajectory) -> Result<Trajectory, FlowError> {
    let states = traj
        .states
        .iter()
        .map(|theta| model.lift(theta))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Trajectory {
        times: traj.times.clone(),
        states,
    })
}
