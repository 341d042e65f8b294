//! Liftings φ of network parameters and their derivatives: the linear chain
//! product, the rank-one (two-layer ReLU) lifting, the three-layer diagonal
//! path-lifting, the attention reparametrization, and the generic monomial
//! form that the path-liftings share.
//!
//! Every model exposes `lift` (φ), `jacobian` (∂φ, shape d x D) and
//! `metric` (M = ∂φ ∂φ^T), all on flat column-major parameter vectors.

use crate::linalg::{kron, symmetrize, vec_mat, Matrix, Vector};
use crate::numdiff;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid dimensions: {0}")]
    BadDims(String),
    #[error("parameter vector has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("parametrization is not coordinate-wise monomial: {0}")]
    NotMonomial(&'static str),
    #[error("shared-exponent property violated in column {col}")]
    SharedExponent { col: usize },
    #[error("zero coordinate {index} inside a monomial support")]
    ZeroCoordinate { index: usize },
    #[error("direction vector must be nonzero")]
    ZeroDirection,
}

/// One named matrix block inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn size(&self) -> usize {
        self.rows * self.cols
    }
}

/// Mapping between a flat vector of length D and a list of matrix blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub blocks: Vec<Block>,
}

impl BlockLayout {
    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(Block::size).sum()
    }

    pub fn offset(&self, idx: usize) -> usize {
        self.blocks[..idx].iter().map(Block::size).sum()
    }

    /// Extracts block `idx` of `flat` as a matrix (column-major slice copy).
    pub fn view(&self, flat: &Vector, idx: usize) -> Matrix {
        let b = &self.blocks[idx];
        let off = self.offset(idx);
        Matrix::from_column_slice(b.rows, b.cols, &flat.as_slice()[off..off + b.size()])
    }

    /// Packs matrices back into a flat vector; shapes must match the layout.
    pub fn pack(&self, mats: &[Matrix]) -> Result<Vector, ModelError> {
        if mats.len() != self.blocks.len() {
            return Err(ModelError::BadDims(format!(
                "expected {} blocks, got {}",
                self.blocks.len(),
                mats.len()
            )));
        }
        let mut data = Vec::with_capacity(self.total_dim());
        for (b, m) in self.blocks.iter().zip(mats) {
            if m.nrows() != b.rows || m.ncols() != b.cols {
                return Err(ModelError::BadDims(format!(
                    "block {} expects {}x{}, got {}x{}",
                    b.name,
                    b.rows,
                    b.cols,
                    m.nrows(),
                    m.ncols()
                )));
            }
            data.extend_from_slice(m.as_slice());
        }
        Ok(Vector::from_vec(data))
    }
}

/// A flat parameter vector together with its block layout.
#[derive(Debug, Clone)]
pub struct ParamPoint {
    pub flat: Vector,
    pub layout: BlockLayout,
}

impl ParamPoint {
    pub fn new(flat: Vector, layout: BlockLayout) -> Result<Self, ModelError> {
        if flat.len() != layout.total_dim() {
            return Err(ModelError::LengthMismatch {
                expected: layout.total_dim(),
                got: flat.len(),
            });
        }
        Ok(Self { flat, layout })
    }

    pub fn block(&self, idx: usize) -> Matrix {
        self.layout.view(&self.flat, idx)
    }
}

/// The shipped parametrizations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Model {
    /// φ(U_L, ..., U_1) = vec(U_L ... U_1), with `dims = [n_0, ..., n_L]`.
    LinearChain { dims: Vec<usize> },
    /// φ(U, V) = (u_j v_j^T)_{j=1..r} stacked, U n x r and V m x r.
    RankOne { n: usize, m: usize, r: usize },
    /// φ(u, V, w) = diag(u) V diag(w), u in R^n, V n x m, w in R^m.
    DiagPath { n: usize, m: usize },
    /// φ(Q, K, V, O) = (vec(Q^T K), vec(V^T O)), all blocks d1 x dim.
    Attention { d1: usize, dim: usize },
}

pub fn linear_chain(dims: &[usize]) -> Result<Model, ModelError> {
    if dims.len() < 2 {
        return Err(ModelError::BadDims(
            "a chain needs at least one layer (two widths)".into(),
        ));
    }
    if dims.contains(&0) {
        return Err(ModelError::BadDims("all widths must be >= 1".into()));
    }
    Ok(Model::LinearChain {
        dims: dims.to_vec(),
    })
}

pub fn rank_one_lift(n: usize, m: usize, r: usize) -> Result<Model, ModelError> {
    if n == 0 || m == 0 || r == 0 {
        return Err(ModelError::BadDims("n, m, r must be >= 1".into()));
    }
    Ok(Model::RankOne { n, m, r })
}

pub fn diag_path_lift(n: usize, m: usize) -> Result<Model, ModelError> {
    if n == 0 || m == 0 {
        return Err(ModelError::BadDims("n, m must be >= 1".into()));
    }
    Ok(Model::DiagPath { n, m })
}

pub fn attention_lift(d1: usize, dim: usize) -> Result<Model, ModelError> {
    if d1 == 0 || dim == 0 {
        return Err(ModelError::BadDims("d1, dim must be >= 1".into()));
    }
    Ok(Model::Attention { d1, dim })
}

impl Model {
    pub fn layout(&self) -> BlockLayout {
        let blocks = match self {
            Model::LinearChain { dims } => (1..dims.len())
                .map(|j| Block {
                    name: format!("U{j}"),
                    rows: dims[j],
                    cols: dims[j - 1],
                })
                .collect(),
            Model::RankOne { n, m, r } => vec![
                Block {
                    name: "U".into(),
                    rows: *n,
                    cols: *r,
                },
                Block {
                    name: "V".into(),
                    rows: *m,
                    cols: *r,
                },
            ],
            Model::DiagPath { n, m } => vec![
                Block {
                    name: "u".into(),
                    rows: *n,
                    cols: 1,
                },
                Block {
                    name: "V".into(),
                    rows: *n,
                    cols: *m,
                },
                Block {
                    name: "w".into(),
                    rows: *m,
                    cols: 1,
                },
            ],
            Model::Attention { d1, dim } => ["Q", "K", "V", "O"]
                .iter()
                .map(|name| Block {
                    name: (*name).into(),
                    rows: *d1,
                    cols: *dim,
                })
                .collect(),
        };
        BlockLayout { blocks }
    }

    pub fn param_dim(&self) -> usize {
        self.layout().total_dim()
    }

    pub fn lifted_dim(&self) -> usize {
        match self {
            Model::LinearChain { dims } => dims[dims.len() - 1] * dims[0],
            Model::RankOne { n, m, r } => r * n * m,
            Model::DiagPath { n, m } => n * m,
            Model::Attention { dim, .. } => 2 * dim * dim,
        }
    }

    /// Shape `(n, m)` when the lifted vector views as a single matrix Z.
    pub fn lift_shape(&self) -> Option<(usize, usize)> {
        match self {
            Model::LinearChain { dims } => Some((dims[dims.len() - 1], dims[0])),
            Model::RankOne { n, m, r: 1 } => Some((*n, *m)),
            Model::RankOne { .. } => None,
            Model::DiagPath { n, m } => Some((*n, *m)),
            Model::Attention { .. } => None,
        }
    }

    pub fn check_len(&self, theta: &Vector) -> Result<(), ModelError> {
        let expected = self.param_dim();
        if theta.len() != expected {
            return Err(ModelError::LengthMismatch {
                expected,
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// φ(θ).
    pub fn lift(&self, theta: &Vector) -> Result<Vector, ModelError> {
        self.check_len(theta)?;
        let layout = self.layout();
        Ok(match self {
            Model::LinearChain { dims } => {
                let l = dims.len() - 1;
                let mut prod = layout.view(theta, 0);
                for j in 1..l {
                    prod = layout.view(theta, j) * prod;
                }
                vec_mat(&prod)
            }
            Model::RankOne { n, m, r } => {
                let u = layout.view(theta, 0);
                let v = layout.view(theta, 1);
                let mut z = Vector::zeros(r * n * m);
                for j in 0..*r {
                    let outer = u.column(j) * v.column(j).transpose();
                    z.rows_mut(j * n * m, n * m).copy_from(&vec_mat(&outer));
                }
                z
            }
            Model::DiagPath { n, m } => {
                let u = layout.view(theta, 0);
                let v = layout.view(theta, 1);
                let w = layout.view(theta, 2);
                let mut z = Vector::zeros(n * m);
                for j in 0..*m {
                    for i in 0..*n {
                        z[i + j * n] = u[(i, 0)] * v[(i, j)] * w[(j, 0)];
                    }
                }
                z
            }
            Model::Attention { dim, .. } => {
                let q = layout.view(theta, 0);
                let k = layout.view(theta, 1);
                let v = layout.view(theta, 2);
                let o = layout.view(theta, 3);
                let phi1 = q.transpose() * k;
                let phi2 = v.transpose() * o;
                let mut z = Vector::zeros(2 * dim * dim);
                z.rows_mut(0, dim * dim).copy_from(&vec_mat(&phi1));
                z.rows_mut(dim * dim, dim * dim).copy_from(&vec_mat(&phi2));
                z
            }
        })
    }

    /// ∂φ(θ), shape d x D.
    pub fn jacobian(&self, theta: &Vector) -> Result<Matrix, ModelError> {
        self.check_len(theta)?;
        let layout = self.layout();
        let d = self.lifted_dim();
        let big_d = self.param_dim();
        let mut jac = Matrix::zeros(d, big_d);
        match self {
            Model::LinearChain { dims } => {
                let l = dims.len() - 1;
                let layers: Vec<Matrix> = (0..l).map(|j| layout.view(theta, j)).collect();
                // prefix[j] = U_j ... U_1 (prefix[0] = I), suffix[j] = U_L ... U_{j+1}
                let mut prefix = vec![Matrix::identity(dims[0], dims[0])];
                for (j, u) in layers.iter().enumerate() {
                    let next = u * &prefix[j];
                    prefix.push(next);
                }
                let mut suffix = vec![Matrix::identity(dims[l], dims[l]); l + 1];
                for j in (0..l).rev() {
                    suffix[j] = &suffix[j + 1] * &layers[j];
                }
                for j in 0..l {
                    let block = kron(&prefix[j].transpose(), &suffix[j + 1]);
                    let off = layout.offset(j);
                    jac.view_mut((0, off), (d, layout.blocks[j].size()))
                        .copy_from(&block);
                }
            }
            Model::RankOne { n, m, r } => {
                let u = layout.view(theta, 0);
                let v = layout.view(theta, 1);
                for j in 0..*r {
                    for b in 0..*m {
                        for a in 0..*n {
                            let row = j * n * m + a + b * n;
                            jac[(row, j * n + a)] = v[(b, j)];
                            jac[(row, n * r + j * m + b)] = u[(a, j)];
                        }
                    }
                }
            }
            Model::DiagPath { n, m } => {
                let u = layout.view(theta, 0);
                let v = layout.view(theta, 1);
                let w = layout.view(theta, 2);
                for j in 0..*m {
                    for i in 0..*n {
                        let row = i + j * n;
                        jac[(row, i)] = v[(i, j)] * w[(j, 0)];
                        jac[(row, n + i + j * n)] = u[(i, 0)] * w[(j, 0)];
                        jac[(row, n + n * m + j)] = u[(i, 0)] * v[(i, j)];
                    }
                }
            }
            Model::Attention { d1, dim } => {
                let q = layout.view(theta, 0);
                let k = layout.view(theta, 1);
                let v = layout.view(theta, 2);
                let o = layout.view(theta, 3);
                let (q_off, k_off, v_off, o_off) = (
                    layout.offset(0),
                    layout.offset(1),
                    layout.offset(2),
                    layout.offset(3),
                );
                for b in 0..*dim {
                    for a in 0..*dim {
                        let row1 = a + b * dim;
                        let row2 = dim * dim + a + b * dim;
                        for c in 0..*d1 {
                            jac[(row1, q_off + c + a * d1)] = k[(c, b)];
                            jac[(row1, k_off + c + b * d1)] = q[(c, a)];
                            jac[(row2, v_off + c + a * d1)] = o[(c, b)];
                            jac[(row2, o_off + c + b * d1)] = v[(c, a)];
                        }
                    }
                }
            }
        }
        Ok(jac)
    }

    /// M(θ) = ∂φ ∂φ^T, symmetrized.
    pub fn metric(&self, theta: &Vector) -> Result<Matrix, ModelError> {
        let j = self.jacobian(theta)?;
        Ok(symmetrize(&(&j * j.transpose())))
    }

    /// For linear chains: the factor pairs (S_j, T_j) with
    /// `M vec(X) = Σ_j vec(S_j X T_j)`.
    pub fn chain_metric_factors(
        &self,
        theta: &Vector,
    ) -> Result<(Vec<Matrix>, Vec<Matrix>), ModelError> {
        let Model::LinearChain { dims } = self else {
            return Err(ModelError::BadDims(
                "metric factors only exist for chains".into(),
            ));
        };
        self.check_len(theta)?;
        let layout = self.layout();
        let l = dims.len() - 1;
        let layers: Vec<Matrix> = (0..l).map(|j| layout.view(theta, j)).collect();
        let mut prefix = vec![Matrix::identity(dims[0], dims[0])];
        for (j, u) in layers.iter().enumerate() {
            let next = u * &prefix[j];
            prefix.push(next);
        }
        let mut suffix = vec![Matrix::identity(dims[l], dims[l]); l + 1];
        for j in (0..l).rev() {
            suffix[j] = &suffix[j + 1] * &layers[j];
        }
        let s: Vec<Matrix> = (0..l)
            .map(|j| symmetrize(&(&suffix[j + 1] * suffix[j + 1].transpose())))
            .collect();
        let t: Vec<Matrix> = (0..l)
            .map(|j| symmetrize(&(prefix[j].transpose() * &prefix[j])))
            .collect();
        Ok((s, t))
    }
}

/// Directional derivative of θ -> M(θ) along `v`.
///
/// Two-layer chains use the closed form
/// `∂M·(H, K) = I_m ⊗ (U H^T + H U^T) + (V K^T + K V^T) ⊗ I_n`
/// (with U the output layer and V the transposed input layer); every other
/// model falls back to a central difference with step `1e-5 (1 + |θ|) / |v|`.
pub fn metric_directional(model: &Model, theta: &Vector, v: &Vector) -> Result<Matrix, ModelError> {
    model.check_len(theta)?;
    if v.len() != theta.len() {
        return Err(ModelError::LengthMismatch {
            expected: theta.len(),
            got: v.len(),
        });
    }
    if v.norm() == 0.0 {
        return Err(ModelError::ZeroDirection);
    }
    if let Model::LinearChain { dims } = model {
        if dims.len() == 3 {
            let layout = model.layout();
            let (m, n) = (dims[0], dims[2]);
            let u = layout.view(theta, 1); // U_2: n x r
            let vt = layout.view(theta, 0); // U_1: r x m
            let big_v = vt.transpose(); // V: m x r
            let du1 = layout.view(v, 0);
            let h = layout.view(v, 1); // H = dU_2
            let k = du1.transpose(); // K = dV
            let un = &u * h.transpose() + &h * u.transpose();
            let vm = &big_v * k.transpose() + &k * big_v.transpose();
            return Ok(kron(&Matrix::identity(m, m), &un) + kron(&vm, &Matrix::identity(n, n)));
        }
    }
    let f = |x: &Vector| model.metric(x).expect("metric evaluation");
    Ok(numdiff::central_directional(
        &f,
        theta,
        v,
        numdiff::default_step(theta),
    ))
}

/// A lifting whose coordinates are monomials `φ_i(θ) = Π_l θ_l^{α_l^{(i)}}`,
/// with the shared-exponent property: within a column of the exponent matrix
/// all nonzero entries agree.
#[derive(Debug, Clone)]
pub struct MonomialLifting {
    exponents: Vec<Vec<u32>>,
    dim_params: usize,
}

impl MonomialLifting {
    pub fn new(exponents: Vec<Vec<u32>>) -> Result<Self, ModelError> {
        let dim_params = exponents.first().map_or(0, Vec::len);
        if exponents.is_empty() || dim_params == 0 {
            return Err(ModelError::BadDims("empty exponent matrix".into()));
        }
        if exponents.iter().any(|row| row.len() != dim_params) {
            return Err(ModelError::BadDims("ragged exponent matrix".into()));
        }
        for col in 0..dim_params {
            let mut seen: Option<u32> = None;
            for row in &exponents {
                let e = row[col];
                if e == 0 {
                    continue;
                }
                match seen {
                    None => seen = Some(e),
                    Some(prev) if prev != e => {
                        return Err(ModelError::SharedExponent { col });
                    }
                    _ => {}
                }
            }
        }
        Ok(Self {
            exponents,
            dim_params,
        })
    }

    pub fn dim_lifted(&self) -> usize {
        self.exponents.len()
    }

    pub fn dim_params(&self) -> usize {
        self.dim_params
    }

    pub fn exponent(&self, i: usize, l: usize) -> u32 {
        self.exponents[i][l]
    }

    pub fn evaluate_coord(&self, i: usize, theta: &Vector) -> f64 {
        self.exponents[i]
            .iter()
            .enumerate()
            .filter(|(_, &a)| a > 0)
            .map(|(l, &a)| theta[l].powi(a as i32))
            .product()
    }

    pub fn evaluate(&self, theta: &Vector) -> Result<Vector, ModelError> {
        if theta.len() != self.dim_params {
            return Err(ModelError::LengthMismatch {
                expected: self.dim_params,
                got: theta.len(),
            });
        }
        Ok(Vector::from_iterator(
            self.dim_lifted(),
            (0..self.dim_lifted()).map(|i| self.evaluate_coord(i, theta)),
        ))
    }

    fn check_support(&self, i: usize, theta: &Vector) -> Result<(), ModelError> {
        for (l, &a) in self.exponents[i].iter().enumerate() {
            if a > 0 && theta[l] == 0.0 {
                return Err(ModelError::ZeroCoordinate { index: l });
            }
        }
        Ok(())
    }

    /// Exact gradient of coordinate `i`: `∇φ_i(θ)_l = α_l φ_i(θ) / θ_l`.
    pub fn grad(&self, i: usize, theta: &Vector) -> Result<Vector, ModelError> {
        self.check_support(i, theta)?;
        let phi = self.evaluate_coord(i, theta);
        let mut g = Vector::zeros(self.dim_params);
        for (l, &a) in self.exponents[i].iter().enumerate() {
            if a > 0 {
                g[l] = a as f64 * phi / theta[l];
            }
        }
        Ok(g)
    }

    /// Exact gradient and Hessian of coordinate `i`.
    pub fn grad_hess(&self, i: usize, theta: &Vector) -> Result<(Vector, Matrix), ModelError> {
        self.check_support(i, theta)?;
        let phi = self.evaluate_coord(i, theta);
        let alpha = &self.exponents[i];
        let dim = self.dim_params;
        let mut g = Vector::zeros(dim);
        let mut h = Matrix::zeros(dim, dim);
        for l in 0..dim {
            let al = alpha[l] as f64;
            if alpha[l] == 0 {
                continue;
            }
            g[l] = al * phi / theta[l];
            h[(l, l)] = al * (al - 1.0) * phi / (theta[l] * theta[l]);
            for k in (l + 1)..dim {
                if alpha[k] == 0 {
                    continue;
                }
                let ak = alpha[k] as f64;
                let v = al * ak * phi / (theta[l] * theta[k]);
                h[(l, k)] = v;
                h[(k, l)] = v;
            }
        }
        Ok((g, h))
    }
}

/// Converts a coordinate-wise monomial parametrization to its exponent form.
///
/// Only `rank_one_lift`, `diag_path_lift` and width-one linear chains are
/// monomial coordinate-wise; a general chain coordinate is a sum of monomials
/// and is rejected.
pub fn as_monomial(model: &Model) -> Result<MonomialLifting, ModelError> {
    match model {
        Model::RankOne { n, m, r } => {
            let big_d = (n + m) * r;
            let mut rows = Vec::with_capacity(r * n * m);
            for j in 0..*r {
                for b in 0..*m {
                    for a in 0..*n {
                        let mut row = vec![0u32; big_d];
                        row[j * n + a] = 1;
                        row[n * r + j * m + b] = 1;
                        rows.push(row);
                    }
                }
            }
            MonomialLifting::new(rows)
        }
        Model::DiagPath { n, m } => {
            let big_d = n + n * m + m;
            let mut rows = Vec::with_capacity(n * m);
            for j in 0..*m {
                for i in 0..*n {
                    let mut row = vec![0u32; big_d];
                    row[i] = 1;
                    row[n + i + j * n] = 1;
                    row[n + n * m + j] = 1;
                    rows.push(row);
                }
            }
            MonomialLifting::new(rows)
        }
        Model::LinearChain { dims } => {
            if dims.iter().any(|&d| d != 1) {
                return Err(ModelError::NotMonomial(
                    "general linear chains sum over paths; only width-1 chains are monomial",
                ));
            }
            let l = dims.len() - 1;
            MonomialLifting::new(vec![vec![1u32; l]])
        }
        Model::Attention { .. } => Err(ModelError::NotMonomial(
            "attention coordinates are sums of monomials",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    fn random_theta(rng: &mut impl Rng, dim: usize) -> Vector {
        Vector::from_fn(dim, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn random_nonzero_theta(rng: &mut impl Rng, dim: usize) -> Vector {
        Vector::from_fn(dim, |_, _| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * (0.5 + rng.random::<f64>())
        })
    }

    fn all_models() -> Vec<Model> {
        vec![
            linear_chain(&[2, 2, 2, 2]).unwrap(),
            linear_chain(&[3, 2]).unwrap(),
            rank_one_lift(2, 3, 2).unwrap(),
            diag_path_lift(2, 3).unwrap(),
            attention_lift(2, 2).unwrap(),
        ]
    }

    #[test]
    fn layout_round_trip_is_exact() {
        let model = linear_chain(&[3, 2, 4]).unwrap();
        let layout = model.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = random_theta(&mut rng, model.param_dim());
        let blocks: Vec<Matrix> = (0..layout.blocks.len())
            .map(|i| layout.view(&theta, i))
            .collect();
        let back = layout.pack(&blocks).unwrap();
        assert_eq!(back, theta);
    }

    #[test]
    fn single_layer_chain_is_identity_map() {
        let model = linear_chain(&[3, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = random_theta(&mut rng, model.param_dim());
        assert_eq!(model.lift(&theta).unwrap(), theta);
        let j = model.jacobian(&theta).unwrap();
        assert!((j - Matrix::identity(6, 6)).norm() == 0.0);
    }

    #[test]
    fn two_layer_metric_matches_kronecker_form() {
        // M = I_m ⊗ UU^T + VV^T ⊗ I_n for θ = (U_1, U_2) = (V^T, U)
        let model = linear_chain(&[4, 2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = random_theta(&mut rng, model.param_dim());
        let layout = model.layout();
        let u = layout.view(&theta, 1);
        let v = layout.view(&theta, 0).transpose();
        let expected = linalg::kron(&Matrix::identity(4, 4), &(&u * u.transpose()))
            + linalg::kron(&(&v * v.transpose()), &Matrix::identity(3, 3));
        let m = model.metric(&theta).unwrap();
        assert!((m - &expected).norm() <= 1e-12 * expected.norm());
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for model in all_models() {
            for _ in 0..3 {
                let theta = random_theta(&mut rng, model.param_dim());
                let j = model.jacobian(&theta).unwrap();
                let f = |x: &Vector| model.lift(x).unwrap();
                let j_fd = numdiff::central_jacobian(&f, &theta, numdiff::default_step(&theta));
                let rel = (&j - &j_fd).norm() / (1.0 + j.norm());
                assert!(rel <= 1e-6, "{model:?}: rel err {rel}");
            }
        }
    }

    #[test]
    fn metric_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for model in all_models() {
            for _ in 0..20 {
                let theta = random_theta(&mut rng, model.param_dim());
                let m = model.metric(&theta).unwrap();
                assert!((&m - m.transpose()).norm() <= 1e-12 * m.norm().max(1.0));
                let spec = linalg::sym_eig(&m).unwrap();
                let min = spec.eigenvalues[0];
                assert!(min >= -1e-10 * spec.spectral_norm().max(1.0));
            }
        }
    }

    #[test]
    fn chain_metric_factors_agree_with_jacobian_route() {
        let model = linear_chain(&[2, 3, 2, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let theta = random_theta(&mut rng, model.param_dim());
        let (s, t) = model.chain_metric_factors(&theta).unwrap();
        let m = model.metric(&theta).unwrap();
        let (n_l, n_0) = model.lift_shape().unwrap();
        for _ in 0..5 {
            let x = Matrix::from_fn(n_l, n_0, |_, _| rng.random::<f64>() - 0.5);
            let lhs = &m * linalg::vec_mat(&x);
            let mut rhs = Vector::zeros(n_l * n_0);
            for (sj, tj) in s.iter().zip(&t) {
                rhs += linalg::vec_mat(&(sj * &x * tj));
            }
            assert!((lhs - &rhs).norm() <= 1e-10 * rhs.norm().max(1.0));
        }
    }

    #[test]
    fn rank_one_blocks_are_independent() {
        // M is block-diagonal over neurons j
        let model = rank_one_lift(2, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta = random_theta(&mut rng, model.param_dim());
        let j = model.jacobian(&theta).unwrap();
        // rows of block 0 involve only u_1, v_1 columns
        let nm = 4;
        for row in 0..nm {
            for col in [2usize, 3, 6, 7] {
                assert_eq!(j[(row, col)], 0.0);
            }
        }
    }

    #[test]
    fn diag_path_special_points() {
        let model = diag_path_lift(1, 1).unwrap();
        let theta = Vector::from_vec(vec![2.0, 3.0, 5.0]); // u, V, w
        let z = model.lift(&theta).unwrap();
        assert_abs_diff_eq!(z[0], 30.0, epsilon = 1e-14);
        let j = model.jacobian(&theta).unwrap();
        assert_eq!(j.as_slice(), &[15.0, 10.0, 6.0]); // (Vw, uw, uV)

        let model = diag_path_lift(2, 3).unwrap();
        let mut theta = Vector::zeros(model.param_dim());
        theta.rows_mut(0, 2).fill(1.0); // u = 1
        for k in 0..6 {
            theta[2 + k] = (k + 1) as f64; // V
        }
        theta.rows_mut(8, 3).fill(1.0); // w = 1
        let z = model.lift(&theta).unwrap();
        let v = model.layout().view(&theta, 1);
        assert_eq!(z, linalg::vec_mat(&v));
    }

    #[test]
    fn attention_zero_and_scalar() {
        let model = attention_lift(2, 2).unwrap();
        let z = model.lift(&Vector::zeros(model.param_dim())).unwrap();
        assert_eq!(z.norm(), 0.0);
        assert_eq!(
            model
                .metric(&Vector::zeros(model.param_dim()))
                .unwrap()
                .norm(),
            0.0
        );

        let scalar = attention_lift(1, 1).unwrap();
        let theta = Vector::from_vec(vec![2.0, 3.0, 5.0, 7.0]); // q, k, v, o
        let z = scalar.lift(&theta).unwrap();
        assert_eq!(z.as_slice(), &[6.0, 35.0]);
    }

    #[test]
    fn attention_metric_is_block_diagonal() {
        let model = attention_lift(2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let theta = random_theta(&mut rng, model.param_dim());
        let m = model.metric(&theta).unwrap();
        let d_half = 4;
        for i in 0..d_half {
            for j in d_half..2 * d_half {
                assert_abs_diff_eq!(m[(i, j)], 0.0, epsilon = 1e-12);
            }
        }
        // each half has the two-layer form I ⊗ Q^T Q + K^T K ⊗ I
        let layout = model.layout();
        let q = layout.view(&theta, 0);
        let k = layout.view(&theta, 1);
        let dim = 2;
        let half = linalg::kron(&Matrix::identity(dim, dim), &(q.transpose() * &q))
            + linalg::kron(&(k.transpose() * &k), &Matrix::identity(dim, dim));
        let top = m.view((0, 0), (d_half, d_half)).into_owned();
        assert!((top - &half).norm() <= 1e-12 * half.norm());
    }

    #[test]
    fn monomial_forms_match_lift_on_nonzero_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for model in [
            rank_one_lift(2, 2, 1).unwrap(),
            rank_one_lift(2, 3, 2).unwrap(),
            diag_path_lift(2, 2).unwrap(),
            linear_chain(&[1, 1, 1]).unwrap(),
        ] {
            let ml = as_monomial(&model).unwrap();
            assert_eq!(ml.dim_lifted(), model.lifted_dim());
            for _ in 0..50 {
                let theta = random_nonzero_theta(&mut rng, model.param_dim());
                let via_ml = ml.evaluate(&theta).unwrap();
                let via_phi = model.lift(&theta).unwrap();
                assert!((via_ml - &via_phi).norm() <= 1e-12 * via_phi.norm().max(1.0));
            }
        }
    }

    #[test]
    fn monomial_rejects_non_monomial_models() {
        assert!(matches!(
            as_monomial(&linear_chain(&[2, 2]).unwrap()),
            Err(ModelError::NotMonomial(_))
        ));
        assert!(matches!(
            as_monomial(&attention_lift(1, 2).unwrap()),
            Err(ModelError::NotMonomial(_))
        ));
    }

    #[test]
    fn monomial_shared_exponent_enforced() {
        // θ_1 appears with exponent 1 in row 0 and exponent 2 in row 1
        let bad = vec![vec![1, 1], vec![2, 0]];
        assert!(matches!(
            MonomialLifting::new(bad),
            Err(ModelError::SharedExponent { col: 0 })
        ));
    }

    #[test]
    fn monomial_grad_hess_hand_cases() {
        // φ = θ1 θ2 at (2, 3)
        let ml = MonomialLifting::new(vec![vec![1, 1]]).unwrap();
        let theta = Vector::from_vec(vec![2.0, 3.0]);
        let (g, h) = ml.grad_hess(0, &theta).unwrap();
        assert_eq!(g.as_slice(), &[3.0, 2.0]);
        assert_eq!(h.as_slice(), &[0.0, 1.0, 1.0, 0.0]);

        // φ = θ1^2 at (5)
        let ml = MonomialLifting::new(vec![vec![2]]).unwrap();
        let theta = Vector::from_vec(vec![5.0]);
        let (g, h) = ml.grad_hess(0, &theta).unwrap();
        assert_abs_diff_eq!(g[0], 10.0, epsilon = 1e-14);
        assert_abs_diff_eq!(h[(0, 0)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn monomial_hessian_matches_fd_of_gradient() {
        let ml = MonomialLifting::new(vec![vec![2, 1, 0, 3]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let theta = random_nonzero_theta(&mut rng, 4);
        let (_, h) = ml.grad_hess(0, &theta).unwrap();
        let grad_fn = |x: &Vector| ml.grad(0, x).unwrap();
        let h_fd = numdiff::central_jacobian(&grad_fn, &theta, 1e-5 * (1.0 + theta.norm()));
        let rel = (&h - &h_fd).norm() / (1.0 + h.norm());
        assert!(rel <= 1e-5, "rel err {rel}");
    }

    #[test]
    fn monomial_rejects_zero_support() {
        let ml = MonomialLifting::new(vec![vec![1, 1]]).unwrap();
        let theta = Vector::from_vec(vec![0.0, 3.0]);
        assert!(matches!(
            ml.grad(0, &theta),
            Err(ModelError::ZeroCoordinate { index: 0 })
        ));
    }

    #[test]
    fn metric_directional_two_layer_matches_fd() {
        let model = linear_chain(&[3, 2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta = random_theta(&mut rng, model.param_dim());
        let v = random_theta(&mut rng, model.param_dim());
        let analytic = metric_directional(&model, &theta, &v).unwrap();
        let f = |x: &Vector| model.metric(x).unwrap();
        let fd = numdiff::central_directional(&f, &theta, &v, numdiff::default_step(&theta));
        let rel = (&analytic - &fd).norm() / (1.0 + analytic.norm());
        assert!(rel <= 1e-5, "rel err {rel}");
        // linearity of the analytic path
        let doubled = metric_directional(&model, &theta, &(&v * 2.0)).unwrap();
        assert!((doubled - &analytic * 2.0).norm() <= 1e-8 * (1.0 + analytic.norm()));
    }

    #[test]
    fn metric_directional_zero_block_edge() {
        // two-layer with U = 0 and direction only in U_1: ∂M = 0
        let model = linear_chain(&[2, 2, 2]).unwrap();
        let mut theta = Vector::zeros(model.param_dim());
        theta[0] = 0.7; // only U_1 nonzero... U part (block 1) stays zero
        theta[3] = -0.2;
        let mut v = Vector::zeros(model.param_dim());
        v[1] = 1.0; // direction K in the input layer
        let d = metric_directional(&model, &theta, &v).unwrap();
        // I_m ⊗ 0 + (VK^T + KV^T) ⊗ I_n with V from θ is nonzero in general;
        // but with direction in U_2 against U = 0 the first term vanishes:
        let mut v2 = Vector::zeros(model.param_dim());
        v2[4] = 1.0;
        let d2 = metric_directional(&model, &theta, &v2).unwrap();
        assert_eq!(d2.norm(), 0.0);
        assert!(d.norm() > 0.0);
        assert!(matches!(
            metric_directional(&model, &theta, &Vector::zeros(model.param_dim())),
            Err(ModelError::ZeroDirection)
        ));
    }
}
