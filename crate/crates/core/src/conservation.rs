//! Conservation-law families per parametrization, balance measurement, and
//! constructors for balanced / relaxed-balanced / generic initializations.
//!
//! Symmetric matrix-valued laws are flattened to their upper triangle
//! (including the diagonal), row-major, so `h` is always a plain vector.

use crate::linalg::{matfun_psd, sym_eig, symmetrize, Matrix, MatrixFn, Vector, PSD_CLAMP_TOL};
use crate::models::Model;
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConservationError {
    #[error("no conservation-law family is shipped for this model")]
    UnsupportedModel,
    #[error("infeasible lambda at interface {interface}: would need eigenvalue {value:.6e} >= 0")]
    InfeasibleLambda { interface: usize, value: f64 },
    #[error(
        "chain widths must be non-decreasing for the rotation construction, got {from} -> {to}"
    )]
    ShrinkingWidths { from: usize, to: usize },
    #[error("lambda vector has length {got}, expected {expected}")]
    LambdaLength { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
}

/// Number of upper-triangle entries of an n x n symmetric matrix.
fn tri(n: usize) -> usize {
    n * (n + 1) / 2
}

fn flatten_upper(m: &Matrix, out: &mut Vec<f64>) {
    for a in 0..m.nrows() {
        for b in a..m.ncols() {
            out.push(m[(a, b)]);
        }
    }
}

/// A family of conservation laws h: R^D -> R^N for one model.
#[derive(Debug, Clone)]
pub struct LawFamily {
    model: Model,
    n_laws: usize,
}

pub fn laws_for(model: &Model) -> Result<LawFamily, ConservationError> {
    let n_laws = match model {
        Model::LinearChain { dims } => (1..dims.len() - 1).map(|i| tri(dims[i])).sum(),
        Model::RankOne { r, .. } => *r,
        Model::DiagPath { n, m } => n + m,
        Model::Attention { d1, .. } => 2 * tri(*d1),
    };
    Ok(LawFamily {
        model: model.clone(),
        n_laws,
    })
}

impl LawFamily {
    pub fn len(&self) -> usize {
        self.n_laws
    }

    pub fn is_empty(&self) -> bool {
        self.n_laws == 0
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// h(θ).
    pub fn evaluate(&self, theta: &Vector) -> Result<Vector, ConservationError> {
        self.model.check_len(theta)?;
        let layout = self.model.layout();
        let mut vals = Vec::with_capacity(self.n_laws);
        match &self.model {
            Model::LinearChain { dims } => {
                let l = dims.len() - 1;
                for i in 0..l.saturating_sub(1) {
                    let ui = layout.view(theta, i);
                    let un = layout.view(theta, i + 1);
                    let b = un.transpose() * &un - &ui * ui.transpose();
                    flatten_upper(&b, &mut vals);
                }
            }
            Model::RankOne { r, .. } => {
                let u = layout.view(theta, 0);
                let v = layout.view(theta, 1);
                for j in 0..*r {
                    vals.push(u.column(j).norm_squared() - v.column(j).norm_squared());
                }
            }
            Model::DiagPath { n, m } => {
                let u = layout.view(theta, 0);
                let v = layout.view(theta, 1);
                let w = layout.view(theta, 2);
                for i in 0..*n {
                    vals.push(u[(i, 0)].powi(2) - v.row(i).norm_squared());
                }
                for j in 0..*m {
                    vals.push(w[(j, 0)].powi(2) - v.column(j).norm_squared());
                }
            }
            Model::Attention { .. } => {
                let q = layout.view(theta, 0);
                let k = layout.view(theta, 1);
                let v = layout.view(theta, 2);
                let o = layout.view(theta, 3);
                let b1 = &q * q.transpose() - &k * k.transpose();
                let b2 = &v * v.transpose() - &o * o.transpose();
                flatten_upper(&b1, &mut vals);
                flatten_upper(&b2, &mut vals);
            }
        }
        Ok(Vector::from_vec(vals))
    }

    /// ∂h(θ), shape N x D, assembled analytically.
    pub fn jacobian(&self, theta: &Vector) -> Result<Matrix, ConservationError> {
        self.model.check_len(theta)?;
        let layout = self.model.layout();
        let big_d = self.model.param_dim();
        let mut jac = Matrix::zeros(self.n_laws, big_d);
        let mut row = 0usize;
        match &self.model {
            Model::LinearChain { dims } => {
                let l = dims.len() - 1;
                for i in 0..l.saturating_sub(1) {
                    let ui = layout.view(theta, i);
                    let un = layout.view(theta, i + 1);
                    let off_i = layout.offset(i);
                    let off_n = layout.offset(i + 1);
                    // the law at interface i lives on dims[i+1] x dims[i+1]
                    let side = un.ncols();
                    debug_assert_eq!(side, ui.nrows());
                    debug_assert_eq!(side, dims[i + 1]);
                    for a in 0..side {
                        for b in a..side {
                            // d/dU_{i+1}[c, d]: δ_{d a} U_{i+1}[c, b] + δ_{d b} U_{i+1}[c, a]
                            for c in 0..un.nrows() {
                                jac[(row, off_n + c + a * un.nrows())] += un[(c, b)];
                                jac[(row, off_n + c + b * un.nrows())] += un[(c, a)];
                            }
                            // d/dU_i[d, e]: -(δ_{d a} U_i[b, e] + δ_{d b} U_i[a, e])
                            for e in 0..ui.ncols() {
                                jac[(row, off_i + a + e * ui.nrows())] -= ui[(b, e)];
                                jac[(row, off_i + b + e * ui.nrows())] -= ui[(a, e)];
                            }
                            row += 1;
                        }
                    }
                }
            }
            Model::RankOne { n, m, r } => {
                let u = layout.view(theta, 0);
                let v = layout.view(theta, 1);
                for j in 0..*r {
                    for a in 0..*n {
                        jac[(row, j * n + a)] = 2.0 * u[(a, j)];
                    }
                    for b in 0..*m {
                        jac[(row, n * r + j * m + b)] = -2.0 * v[(b, j)];
                    }
                    row += 1;
                }
            }
            Model::DiagPath { n, m } => {
                let u = layout.view(theta, 0);
                let v = layout.view(theta, 1);
                let w = layout.view(theta, 2);
                for i in 0..*n {
                    jac[(row, i)] = 2.0 * u[(i, 0)];
                    for j in 0..*m {
                        jac[(row, n + i + j * n)] = -2.0 * v[(i, j)];
                    }
                    row += 1;
                }
                for j in 0..*m {
                    jac[(row, n + n * m + j)] = 2.0 * w[(j, 0)];
                    for i in 0..*n {
                        jac[(row, n + i + j * n)] = -2.0 * v[(i, j)];
                    }
                    row += 1;
                }
            }
            Model::Attention { d1, .. } => {
                for (pos_idx, neg_idx) in [(0usize, 1usize), (2, 3)] {
                    let p = layout.view(theta, pos_idx);
                    let q = layout.view(theta, neg_idx);
                    let off_p = layout.offset(pos_idx);
                    let off_q = layout.offset(neg_idx);
                    for a in 0..*d1 {
                        for b in a..*d1 {
                            // (P P^T)_{ab} = Σ_e P[a,e] P[b,e]
                            for e in 0..p.ncols() {
                                jac[(row, off_p + a + e * d1)] += p[(b, e)];
                                jac[(row, off_p + b + e * d1)] += p[(a, e)];
                                jac[(row, off_q + a + e * d1)] -= q[(b, e)];
                                jac[(row, off_q + b + e * d1)] -= q[(a, e)];
                            }
                            row += 1;
                        }
                    }
                }
            }
        }
        debug_assert_eq!(row, self.n_laws);
        Ok(jac)
    }
}

/// Balance diagnostics at one chain interface.
#[derive(Debug, Clone)]
pub struct InterfaceBalance {
    /// Frobenius-optimal scalar: `trace(B_i) / n`.
    pub lambda_star: f64,
    /// `|B_i - lambda_star I|_F` with `B_i = U_{i+1}^T U_{i+1} - U_i U_i^T`.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct BalanceReport {
    pub interfaces: Vec<InterfaceBalance>,
    /// Max interface residual; the scaled App-style variant is computed by
    /// the neural-ODE diagnostics where the grid constants live.
    pub eta: f64,
}

impl BalanceReport {
    pub fn lambdas(&self) -> Vec<f64> {
        self.interfaces.iter().map(|i| i.lambda_star).collect()
    }
}

/// Measures the relaxed-balance defect of a chain parameter vector.
pub fn balance_report(theta: &Vector, dims: &[usize]) -> Result<BalanceReport, ConservationError> {
    let model = crate::models::linear_chain(dims)?;
    model.check_len(theta)?;
    let layout = model.layout();
    let l = dims.len() - 1;
    let mut interfaces = Vec::with_capacity(l.saturating_sub(1));
    let mut eta = 0.0f64;
    for i in 0..l.saturating_sub(1) {
        let ui = layout.view(theta, i);
        let un = layout.view(theta, i + 1);
        let b = un.transpose() * &un - &ui * ui.transpose();
        let n = b.nrows() as f64;
        let lambda_star = b.trace() / n;
        let residual = (&b - Matrix::identity(b.nrows(), b.nrows()) * lambda_star).norm();
        eta = eta.max(residual);
        interfaces.push(InterfaceBalance {
            lambda_star,
            residual,
        });
    }
    Ok(BalanceReport { interfaces, eta })
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let g: f64 = rng.sample(StandardNormal);
        g * scale
    })
}

/// Random matrix with orthonormal columns (rows >= cols), via thin QR.
fn random_orthonormal(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let g = gaussian_matrix(rng, rows, cols, 1.0);
    g.qr().q()
}

/// Draws a chain parameter satisfying the relaxed balanced condition
/// `U_{i+1}^T U_{i+1} - U_i U_i^T = lambda_i I` exactly (up to roundoff):
/// `U_1` is Gaussian scaled by `1/sqrt(cols)` and each next layer is
/// `O_i (U_i U_i^T + lambda_i I)^{1/2}` with `O_i` a random orthonormal-column
/// matrix, which requires non-decreasing widths.
pub fn make_relaxed_balanced(
    dims: &[usize],
    lambda: &[f64],
    seed: u64,
) -> Result<Vector, ConservationError> {
    let model = crate::models::linear_chain(dims)?;
    let l = dims.len() - 1;
    if lambda.len() != l.saturating_sub(1) {
        return Err(ConservationError::LambdaLength {
            expected: l.saturating_sub(1),
            got: lambda.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<Matrix> = Vec::with_capacity(l);
    layers.push(gaussian_matrix(
        &mut rng,
        dims[1],
        dims[0],
        1.0 / (dims[0] as f64).sqrt(),
    ));
    for i in 0..l.saturating_sub(1) {
        let prev = &layers[i];
        if dims[i + 2] < dims[i + 1] {
            return Err(ConservationError::ShrinkingWidths {
                from: dims[i + 1],
                to: dims[i + 2],
            });
        }
        let gram = symmetrize(&(prev * prev.transpose()))
            + Matrix::identity(prev.nrows(), prev.nrows()) * lambda[i];
        let spec = sym_eig(&gram)?;
        let feas_tol = PSD_CLAMP_TOL * spec.spectral_norm();
        if spec.eigenvalues[0] < -feas_tol {
            return Err(ConservationError::InfeasibleLambda {
                interface: i + 1,
                value: spec.eigenvalues[0],
            });
        }
        let root = matfun_psd(&gram, MatrixFn::Sqrt, PSD_CLAMP_TOL)?;
        let o = random_orthonormal(&mut rng, dims[i + 2], dims[i + 1]);
        layers.push(o * root);
    }
    Ok(model.layout().pack(&layers)?)
}

/// Relaxed-balanced start for the diagonal path-lifting: draws V Gaussian and
/// sets `u_i = sqrt(sum_j V_ij^2 + lambda_i)`, `w_j = sqrt(sum_i V_ij^2 + mu_j)`.
pub fn make_relaxed_balanced_diag_path(
    n: usize,
    m: usize,
    lambda: &[f64],
    mu: &[f64],
    seed: u64,
) -> Result<Vector, ConservationError> {
    let model = crate::models::diag_path_lift(n, m)?;
    if lambda.len() != n {
        return Err(ConservationError::LambdaLength {
            expected: n,
            got: lambda.len(),
        });
    }
    if mu.len() != m {
        return Err(ConservationError::LambdaLength {
            expected: m,
            got: mu.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = gaussian_matrix(&mut rng, n, m, 1.0 / (m as f64).sqrt());
    let mut u = Matrix::zeros(n, 1);
    for i in 0..n {
        let s = v.row(i).norm_squared() + lambda[i];
        if s < 0.0 {
            return Err(ConservationError::InfeasibleLambda {
                interface: i,
                value: s,
            });
        }
        u[(i, 0)] = s.sqrt();
    }
    let mut w = Matrix::zeros(m, 1);
    for j in 0..m {
        let s = v.column(j).norm_squared() + mu[j];
        if s < 0.0 {
            return Err(ConservationError::InfeasibleLambda {
                interface: n + j,
                value: s,
            });
        }
        w[(j, 0)] = s.sqrt();
    }
    Ok(model.layout().pack(&[u, v, w])?)
}

/// Unstructured Gaussian start (scale `1/sqrt(cols)` per block).
pub fn make_random(model: &Model, seed: u64) -> Vector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = model.layout();
    let mats: Vec<Matrix> = layout
        .blocks
        .iter()
        .map(|b| gaussian_matrix(&mut rng, b.rows, b.cols, 1.0 / (b.cols as f64).sqrt()))
        .collect();
    layout.pack(&mats).expect("layout matches")
}

/// Per-sample drift of the conserved vector along a trajectory.
#[derive(Debug, Clone)]
pub struct DriftSample {
    pub time: f64,
    pub absolute: f64,
    pub relative: f64,
}

/// `|h(θ(t)) - h(θ(0))|_inf` per sample, plus the version scaled by
/// `1 / (1 + |h(θ(0))|_inf)`.
pub fn conservation_drift(
    times: &[f64],
    states: &[Vector],
    laws: &LawFamily,
) -> Result<Vec<DriftSample>, ConservationError> {
    assert!(!states.is_empty(), "trajectory must be nonempty");
    let h0 = laws.evaluate(&states[0])?;
    let h0_inf = if h0.is_empty() { 0.0 } else { h0.amax() };
    let mut out = Vec::with_capacity(states.len());
    for (t, s) in times.iter().zip(states) {
        let h = laws.evaluate(s)?;
        let absolute = if h.is_empty() { 0.0 } else { (h - &h0).amax() };
        out.push(DriftSample {
            time: *t,
            absolute,
            relative: absolute / (1.0 + h0_inf),
        });
    }
    Ok(out)
}
