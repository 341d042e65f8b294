//! Dense real matrix kernel shared by every other module: symmetric
//! eigendecompositions, matrix functions of PSD matrices, Kronecker/vec
//! calculus, Lyapunov solves and numerical null spaces.
//!
//! Conventions fixed here and used repo-wide:
//! * matrices are column-major (`nalgebra` storage order), and `vec` is the
//!   column-major stacking, so `vec(S X T) = (T^T ⊗ S) vec(X)`;
//! * numerical ranks and kernels use one relative threshold,
//!   `tol * sigma_max * max(rows, cols)` with `tol = RANK_TOL` by default.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative threshold used for every rank / kernel / range decision.
pub const RANK_TOL: f64 = 1e-10;

/// Relative clamping window for negative eigenvalues of nominally PSD input.
pub const PSD_CLAMP_TOL: f64 = 1e-10;

/// Relative symmetry tolerance accepted by [`sym_eig`].
pub const SYM_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("matrix is not symmetric: |A - A^T| = {asym:.3e} exceeds {tol:.3e}")]
    NotSymmetric { asym: f64, tol: f64 },
    #[error("eigenvalue {value:.6e} outside the domain of {func} (threshold {threshold:.3e})")]
    EigenvalueOutOfDomain {
        func: &'static str,
        value: f64,
        threshold: f64,
    },
    #[error("matrix is not positive definite: min eigenvalue {min_eig:.6e}")]
    NotPositiveDefinite { min_eig: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("subspace bases live in different ambient dimensions: {left} vs {right}")]
    AmbientMismatch { left: usize, right: usize },
}

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending and the
/// matching orthonormal eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vector,
    pub eigenvectors: Matrix,
}

impl Spectrum {
    /// Largest absolute eigenvalue (the spectral norm of the source matrix).
    pub fn spectral_norm(&self) -> f64 {
        self.eigenvalues
            .iter()
            .fold(0.0f64, |acc, &l| acc.max(l.abs()))
    }

    /// Rebuilds `Q g(Λ) Q^T`, symmetrized so the result is exactly symmetric.
    pub fn assemble(&self, mut g: impl FnMut(f64) -> f64) -> Matrix {
        let q = &self.eigenvectors;
        let d = Matrix::from_diagonal(&self.eigenvalues.map(&mut g));
        let a = q * d * q.transpose();
        symmetrize(&a)
    }
}

/// Scalar functions applied to PSD matrices through their spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatrixFn {
    Sqrt,
    Pow(f64),
    Log,
}

fn all_finite(a: &Matrix) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// `(A + A^T) / 2`.
pub fn symmetrize(a: &Matrix) -> Matrix {
    let mut s = a.clone();
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

/// Symmetric eigendecomposition with ascending eigenvalues.
///
/// The input is symmetrized internally as `(A + A^T)/2`; asymmetry beyond
/// `SYM_TOL * |A|_F` is rejected rather than silently averaged away.
pub fn sym_eig(a: &Matrix) -> Result<Spectrum, LinalgError> {
    if a.nrows() != a.ncols() {
        return Err(LinalgError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    if !all_finite(a) {
        return Err(LinalgError::NonFinite);
    }
    let asym = (a - a.transpose()).norm();
    let tol = SYM_TOL * a.norm();
    if asym > tol && asym > 0.0 {
        return Err(LinalgError::NotSymmetric { asym, tol });
    }
    let se = symmetrize(a).symmetric_eigen();
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| se.eigenvalues[i].total_cmp(&se.eigenvalues[j]));
    let eigenvalues = Vector::from_iterator(n, order.iter().map(|&i| se.eigenvalues[i]));
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &se.eigenvectors.column(src));
    }
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
    })
}

/// `f(A)` for symmetric PSD `A`, computed in the eigenbasis.
///
/// Eigenvalues in `[-clamp_tol * |A|_2, 0]` are clamped to zero; anything
/// further below is an error. `Log` additionally requires all eigenvalues
/// strictly above `clamp_tol * |A|_2`.
pub fn matfun_psd(a: &Matrix, f: MatrixFn, clamp_tol: f64) -> Result<Matrix, LinalgError> {
    let spec = sym_eig(a)?;
    let scale = spec.spectral_norm();
    let floor = -clamp_tol * scale;
    let mut vals = Vec::with_capacity(spec.eigenvalues.len());
    for &l in spec.eigenvalues.iter() {
        let v = match f {
            MatrixFn::Sqrt | MatrixFn::Pow(_) => {
                if l < floor {
                    return Err(LinalgError::EigenvalueOutOfDomain {
                        func: if matches!(f, MatrixFn::Sqrt) {
                            "sqrt"
                        } else {
                            "pow"
                        },
                        value: l,
                        threshold: floor,
                    });
                }
                let l = l.max(0.0);
                match f {
                    MatrixFn::Sqrt => l.sqrt(),
                    MatrixFn::Pow(s) => l.powf(s),
                    MatrixFn::Log => unreachable!(),
                }
            }
            MatrixFn::Log => {
                let lo = clamp_tol * scale;
                if l <= lo {
                    return Err(LinalgError::EigenvalueOutOfDomain {
                        func: "log",
                        value: l,
                        threshold: lo,
                    });
                }
                l.ln()
            }
        };
        vals.push(v);
    }
    let mut k = 0;
    Ok(spec.assemble(|_| {
        let v = vals[k];
        k += 1;
        v
    }))
}

/// Orthogonal projector onto the numerical range of a symmetric PSD matrix.
pub fn range_projector(a: &Matrix, rank_tol: f64) -> Result<Matrix, LinalgError> {
    let spec = sym_eig(a)?;
    let n = a.nrows();
    let cut = rank_tol * spec.spectral_norm() * n as f64;
    Ok(spec.assemble(|l| if l > cut { 1.0 } else { 0.0 }))
}

/// Kronecker product `A ⊗ B`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// Column-major stacking of a matrix into a vector.
pub fn vec_mat(x: &Matrix) -> Vector {
    Vector::from_column_slice(x.as_slice())
}

/// Inverse of [`vec_mat`]: reshape a vector into a `rows x cols` matrix.
pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Result<Matrix, LinalgError> {
    if v.len() != rows * cols {
        return Err(LinalgError::DimensionMismatch {
            expected: rows * cols,
            got: v.len(),
        });
    }
    Ok(Matrix::from_column_slice(rows, cols, v.as_slice()))
}

/// Solves `Δ P + P Δ = C` for symmetric `Δ`, with `P` symmetric positive
/// definite and `C` symmetric, working in the eigenbasis of `P` where the
/// solution is entrywise `C̃_ij / (p_i + p_j)`.
pub fn lyapunov_solve(p: &Matrix, c: &Matrix) -> Result<Matrix, LinalgError> {
    let spec = sym_eig(p)?;
    let scale = spec.spectral_norm();
    let min_eig = spec.eigenvalues[0];
    if min_eig < RANK_TOL * scale || min_eig <= 0.0 {
        return Err(LinalgError::NotPositiveDefinite { min_eig });
    }
    if c.nrows() != p.nrows() || c.ncols() != p.ncols() {
        return Err(LinalgError::DimensionMismatch {
            expected: p.nrows() * p.ncols(),
            got: c.nrows() * c.ncols(),
        });
    }
    let c = symmetrize(c);
    let q = &spec.eigenvectors;
    let c_tilde = q.transpose() * &c * q;
    let n = p.nrows();
    let mut d_tilde = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            d_tilde[(i, j)] = c_tilde[(i, j)] / (spec.eigenvalues[i] + spec.eigenvalues[j]);
        }
    }
    Ok(symmetrize(&(q * d_tilde * q.transpose())))
}

/// Orthonormal basis of the numerical null space of `A` (possibly 0 columns).
///
/// Uses the full set of right singular vectors; wide matrices are padded with
/// zero rows so the thin SVD still yields all of them.
pub fn kernel_basis(a: &Matrix, tol: f64) -> Matrix {
    let (rows, cols) = (a.nrows(), a.ncols());
    let work = if rows < cols {
        let mut padded = Matrix::zeros(cols, cols);
        padded.view_mut((0, 0), (rows, cols)).copy_from(a);
        padded
    } else {
        a.clone()
    };
    let svd = work.svd(false, true);
    let v_t = svd.v_t.expect("svd requested v_t");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let cut = tol * sigma_max * rows.max(cols) as f64;
    let mut keep: Vec<usize> = Vec::new();
    for i in 0..cols {
        let s = if i < svd.singular_values.len() {
            svd.singular_values[i]
        } else {
            0.0
        };
        if s <= cut {
            keep.push(i);
        }
    }
    let mut basis = Matrix::zeros(cols, keep.len());
    for (dst, &src) in keep.iter().enumerate() {
        basis.set_column(dst, &v_t.row(src).transpose());
    }
    basis
}

/// Numerical rank of `A` under the repo-wide threshold convention.
pub fn numerical_rank(a: &Matrix, tol: f64) -> usize {
    a.ncols() - kernel_basis(a, tol).ncols()
}

/// Orthonormal basis of the intersection of two subspaces given by
/// orthonormal-column bases, computed as the null space of the stacked
/// orthogonal-complement projections.
pub fn subspace_intersection(b1: &Matrix, b2: &Matrix, tol: f64) -> Result<Matrix, LinalgError> {
    if b1.nrows() != b2.nrows() {
        return Err(LinalgError::AmbientMismatch {
            left: b1.nrows(),
            right: b2.nrows(),
        });
    }
    let n = b1.nrows();
    if b1.ncols() == 0 || b2.ncols() == 0 {
        return Ok(Matrix::zeros(n, 0));
    }
    let eye = Matrix::identity(n, n);
    let p1 = &eye - b1 * b1.transpose();
    let p2 = &eye - b2 * b2.transpose();
    let mut stacked = Matrix::zeros(2 * n, n);
    stacked.view_mut((0, 0), (n, n)).copy_from(&p1);
    stacked.view_mut((n, 0), (n, n)).copy_from(&p2);
    Ok(kernel_basis(&stacked, tol))
}
