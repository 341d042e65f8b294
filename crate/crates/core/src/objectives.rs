//! Loss functions on the lifted variable, with analytic gradients.

use crate::linalg::{unvec, vec_mat, Matrix, Vector};
use crate::numdiff;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("lifted vector has length {got}, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty shape: objective inputs must be non-empty")]
    EmptyShape,
}

/// A smooth loss `f` on the lifted variable.
#[derive(Debug, Clone)]
pub enum Objective {
    /// `f(Z) = 1/2 |Z - Y|_F^2` on a lifted matrix (or stacked blocks) of the
    /// same total size as `target`.
    Quadratic { target: Matrix },
    /// `f(φ1, φ2) = 1/2 |softmax(X φ1 X^T) X φ2 - Y|_F^2` with row-wise
    /// softmax; `tokens` is N x dim, `target` N x dim, and the lifted vector
    /// stacks vec(φ1) then vec(φ2), both dim x dim.
    Attention { tokens: Matrix, target: Matrix },
}

pub fn quadratic_loss(target: Matrix) -> Result<Objective, ObjectiveError> {
    if target.is_empty() {
        return Err(ObjectiveError::EmptyShape);
    }
    if !target.iter().all(|x| x.is_finite()) {
        return Err(ObjectiveError::NonFinite("target"));
    }
    Ok(Objective::Quadratic { target })
}

pub fn attention_loss(tokens: Matrix, target: Matrix) -> Result<Objective, ObjectiveError> {
    if tokens.is_empty() || target.is_empty() {
        return Err(ObjectiveError::EmptyShape);
    }
    if tokens.nrows() != target.nrows() || tokens.ncols() != target.ncols() {
        return Err(ObjectiveError::ShapeMismatch {
            expected: tokens.nrows() * tokens.ncols(),
            got: target.nrows() * target.ncols(),
        });
    }
    Ok(Objective::Attention { tokens, target })
}

/// Row-wise softmax with row-max subtraction.
fn softmax_rows(a: &Matrix) -> Result<Matrix, ObjectiveError> {
    if !a.iter().all(|x| x.is_finite()) {
        return Err(ObjectiveError::NonFinite("softmax input"));
    }
    let mut p = a.clone();
    for mut row in p.row_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row /= sum;
    }
    Ok(p)
}

impl Objective {
    pub fn lifted_dim(&self) -> usize {
        match self {
            Objective::Quadratic { target } => target.nrows() * target.ncols(),
            Objective::Attention { tokens, .. } => 2 * tokens.ncols() * tokens.ncols(),
        }
    }

    fn check_len(&self, z: &Vector) -> Result<(), ObjectiveError> {
        if z.len() != self.lifted_dim() {
            return Err(ObjectiveError::ShapeMismatch {
                expected: self.lifted_dim(),
                got: z.len(),
            });
        }
        Ok(())
    }

    pub fn value(&self, z: &Vector) -> Result<f64, ObjectiveError> {
        self.check_len(z)?;
        match self {
            Objective::Quadratic { target } => {
                let zm = unvec(z, target.nrows(), target.ncols()).expect("checked length");
                Ok(0.5 * (zm - target).norm_squared())
            }
            Objective::Attention { tokens, target } => {
                let out = self.attention_forward(tokens, z)?;
                Ok(0.5 * (out - target).norm_squared())
            }
        }
    }

    pub fn gradient(&self, z: &Vector) -> Result<Vector, ObjectiveError> {
        self.check_len(z)?;
        match self {
            Objective::Quadratic { target } => {
                let zm = unvec(z, target.nrows(), target.ncols()).expect("checked length");
                Ok(vec_mat(&(zm - target)))
            }
            Objective::Attention { tokens, target } => {
                let dim = tokens.ncols();
                let phi1 = unvec(&z.rows(0, dim * dim).into_owned(), dim, dim).unwrap();
                let phi2 = unvec(&z.rows(dim * dim, dim * dim).into_owned(), dim, dim).unwrap();
                let a = tokens * &phi1 * tokens.transpose();
                let p = softmax_rows(&a)?;
                let xphi2 = tokens * &phi2;
                let residual = &p * &xphi2 - target;
                // d f / d φ2 = (P X)^T R
                let g2 = (&p * tokens).transpose() * &residual;
                // back through the softmax: per row, J = diag(p) - p p^T
                let gp = &residual * xphi2.transpose();
                let n = tokens.nrows();
                let mut ga = Matrix::zeros(n, n);
                for i in 0..n {
                    let pi = p.row(i).transpose();
                    let gi = gp.row(i).transpose();
                    let dot = pi.dot(&gi);
                    for k in 0..n {
                        ga[(i, k)] = pi[k] * (gi[k] - dot);
                    }
                }
                let g1 = tokens.transpose() * ga * tokens;
                let mut g = Vector::zeros(2 * dim * dim);
                g.rows_mut(0, dim * dim).copy_from(&vec_mat(&g1));
                g.rows_mut(dim * dim, dim * dim).copy_from(&vec_mat(&g2));
                Ok(g)
            }
        }
    }

    fn attention_forward(&self, tokens: &Matrix, z: &Vector) -> Result<Matrix, ObjectiveError> {
        let dim = tokens.ncols();
        let phi1 = unvec(&z.rows(0, dim * dim).into_owned(), dim, dim).unwrap();
        let phi2 = unvec(&z.rows(dim * dim, dim * dim).into_owned(), dim, dim).unwrap();
        let p = softmax_rows(&(tokens * phi1 * tokens.transpose()))?;
        Ok(p * tokens * phi2)
    }
}

/// Max over coordinates of `|analytic - central FD| / (1 + |analytic|)`.
pub fn grad_check(obj: &Objective, z: &Vector, step: f64) -> Result<f64, ObjectiveError> {
    if z.is_empty() {
        return Err(ObjectiveError::EmptyShape);
    }
    assert!(step > 0.0, "step must be positive");
    let analytic = obj.gradient(z)?;
    let f = |x: &Vector| obj.value(x).expect("value evaluation");
    let fd = numdiff::central_gradient(&f, z, step);
    let mut worst = 0.0f64;
    for i in 0..z.len() {
        let err = (analytic[i] - fd[i]).abs() / (1.0 + analytic[i].abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
