//! Structural tests on liftings: kernel-inclusion and trivial-intersection
//! checks, the unbalanced counterexample direction built from a Lyapunov
//! solve, and the Frobenius property via exact Lie brackets of monomial
//! gradient fields.

use crate::conservation::LawFamily;
use crate::linalg::{
    kernel_basis, kron, lyapunov_solve, subspace_intersection, sym_eig, symmetrize, Matrix, Vector,
    RANK_TOL,
};
use crate::models::{metric_directional, Model, ModelError, MonomialLifting};
use crate::numdiff;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CriteriaError {
    #[error("S is numerically proportional to the identity (gap {gap:.3e} < {tol:.3e}): the input is relaxed balanced, no counterexample direction exists")]
    RelaxedBalanced { gap: f64, tol: f64 },
    #[error("{0} must have full column rank (min singular value {1:.3e})")]
    RankDeficient(&'static str, f64),
    #[error("factor shapes disagree: U is {un}x{ur}, V is {vm}x{vr}")]
    ShapeMismatch {
        un: usize,
        ur: usize,
        vm: usize,
        vr: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Conservation(#[from] crate::conservation::ConservationError),
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
}

/// Kernel dimensions and the worst metric-derivative norm over the
/// intersection of `ker ∂φ` and `ker ∂h`.
#[derive(Debug, Clone)]
pub struct CriterionReport {
    pub dim_ker_phi: usize,
    pub dim_ker_h: usize,
    pub dim_intersection: usize,
    /// `max_v |∂M(θ)·v|_F` over the orthonormal intersection basis.
    pub worst_dm_norm: f64,
    /// Frobenius norm of ∂M(θ) as a linear map (over canonical directions),
    /// the scale against which `worst_dm_norm` is judged.
    pub dm_scale: f64,
    pub intersection_trivial: bool,
    pub inclusion_holds: bool,
}

/// Scale of ∂M at θ: sqrt of the sum over canonical parameter directions of
/// `|∂M(θ)·e_l|_F^2`.
fn metric_derivative_scale(model: &Model, theta: &Vector) -> Result<f64, ModelError> {
    let dim = model.param_dim();
    let mut total = 0.0;
    for l in 0..dim {
        let mut e = Vector::zeros(dim);
        e[l] = 1.0;
        let d = metric_directional(model, theta, &e)?;
        total += d.norm_squared();
    }
    Ok(total.sqrt())
}

/// Computes `ker ∂φ(θ)`, `ker ∂h(θ)`, their intersection, and tests the
/// kernel inclusion `ker ∂φ ∩ ker ∂h ⊆ ker ∂M` at θ by measuring
/// `|∂M(θ)·v|` on each intersection basis vector against `tol * scale`.
pub fn kernel_inclusion_check(
    model: &Model,
    laws: &LawFamily,
    theta: &Vector,
    tol: f64,
) -> Result<CriterionReport, CriteriaError> {
    let j_phi = model.jacobian(theta)?;
    let j_h = laws.jacobian(theta)?;
    let ker_phi = kernel_basis(&j_phi, RANK_TOL);
    let ker_h = if laws.is_empty() {
        Matrix::identity(model.param_dim(), model.param_dim())
    } else {
        kernel_basis(&j_h, RANK_TOL)
    };
    let inter = subspace_intersection(&ker_phi, &ker_h, RANK_TOL)?;
    let dm_scale = metric_derivative_scale(model, theta)?;
    let mut worst = 0.0f64;
    for c in 0..inter.ncols() {
        let v = inter.column(c).into_owned();
        let d = metric_directional(model, theta, &v)?;
        worst = worst.max(d.norm());
    }
    Ok(CriterionReport {
        dim_ker_phi: ker_phi.ncols(),
        dim_ker_h: ker_h.ncols(),
        dim_intersection: inter.ncols(),
        worst_dm_norm: worst,
        dm_scale,
        intersection_trivial: inter.ncols() == 0,
        inclusion_holds: worst <= tol * dm_scale,
    })
}

/// The two-layer counterexample direction and its diagnostics.
#[derive(Debug, Clone)]
pub struct CounterexampleDirection {
    /// Perturbation of U.
    pub h_block: Matrix,
    /// Perturbation of V.
    pub k_block: Matrix,
    pub dphi_norm: f64,
    pub dh_norm: f64,
    pub dm_norm: f64,
    /// Norms of the three linear maps, for relative judgments.
    pub dphi_scale: f64,
    pub dh_scale: f64,
    pub dm_scale: f64,
}

fn min_singular_value(a: &Matrix) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    sv.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Builds a direction `(H, K) = (UΔ, -VΔ^T)` that lies in
/// `ker ∂φ ∩ ker ∂h` but not in `ker ∂M`, for full-rank `U` (n x r),
/// `V` (m x r) whose balance defect `S = U^T U - V^T V` is not a multiple of
/// the identity:
/// * `Δ_A = x y^T - y x^T` from eigenvectors of S at its two extreme
///   eigenvalues,
/// * `Δ_S` solves the Lyapunov equation
///   `Δ_S (U^T U + V^T V) + (U^T U + V^T V) Δ_S = [Δ_A, S]`,
/// * `Δ = Δ_S + Δ_A`.
pub fn counterexample_direction(
    u: &Matrix,
    v: &Matrix,
) -> Result<CounterexampleDirection, CriteriaError> {
    if u.ncols() != v.ncols() {
        return Err(CriteriaError::ShapeMismatch {
            un: u.nrows(),
            ur: u.ncols(),
            vm: v.nrows(),
            vr: v.ncols(),
        });
    }
    let r = u.ncols();
    let sigma_u = min_singular_value(u);
    if sigma_u <= RANK_TOL * u.norm() * r as f64 {
        return Err(CriteriaError::RankDeficient("U", sigma_u));
    }
    let sigma_v = min_singular_value(v);
    if sigma_v <= RANK_TOL * v.norm() * r as f64 {
        return Err(CriteriaError::RankDeficient("V", sigma_v));
    }
    let utu = symmetrize(&(u.transpose() * u));
    let vtv = symmetrize(&(v.transpose() * v));
    let s = &utu - &vtv;
    let spec = sym_eig(&s)?;
    let gap = spec.eigenvalues[r - 1] - spec.eigenvalues[0];
    // the Gram scale keeps the test meaningful when S itself is ~ 0
    let gram_scale = utu.norm().max(vtv.norm());
    let tol = 1e-8 * spec.spectral_norm().max(gram_scale);
    if gap < tol {
        return Err(CriteriaError::RelaxedBalanced { gap, tol });
    }
    let x = spec.eigenvectors.column(r - 1).into_owned();
    let y = spec.eigenvectors.column(0).into_owned();
    let delta_a = &x * y.transpose() - &y * x.transpose();
    let bracket = &delta_a * &s - &s * &delta_a;
    let p = &utu + &vtv;
    let delta_s = lyapunov_solve(&p, &bracket)?;
    let delta = &delta_s + &delta_a;
    let h_block = u * &delta;
    let k_block = -(v * delta.transpose());

    // diagnostics: push (H, K) through ∂φ, ∂h, ∂M of the two-layer model
    let dphi = u * k_block.transpose() + &h_block * v.transpose();
    let dh = u.transpose() * &h_block + h_block.transpose() * u
        - v.transpose() * &k_block
        - k_block.transpose() * v;
    let (n, m) = (u.nrows(), v.nrows());
    let un_term = u * h_block.transpose() + &h_block * u.transpose();
    let vm_term = v * k_block.transpose() + &k_block * v.transpose();
    let dm = kron(&Matrix::identity(m, m), &un_term) + kron(&vm_term, &Matrix::identity(n, n));

    let dir_norm = (h_block.norm_squared() + k_block.norm_squared()).sqrt();
    let dphi_scale = two_layer_jacobian_norm(u, v) * dir_norm;
    let dh_scale = two_layer_law_jacobian_norm(u, v) * dir_norm;
    let dm_scale = two_layer_metric_derivative_norm(u, v) * dir_norm;
    Ok(CounterexampleDirection {
        dphi_norm: dphi.norm(),
        dh_norm: dh.norm(),
        dm_norm: dm.norm(),
        h_block,
        k_block,
        dphi_scale,
        dh_scale,
        dm_scale,
    })
}

fn two_layer_jacobian_norm(u: &Matrix, v: &Matrix) -> f64 {
    // |∂φ|_F^2 = Σ over unit directions; ∂φ(H, K) = H V^T + U K^T gives
    // m copies of each U column block and n of each V block
    ((v.norm_squared() * u.nrows() as f64) + (u.norm_squared() * v.nrows() as f64)).sqrt()
}

fn two_layer_law_jacobian_norm(u: &Matrix, v: &Matrix) -> f64 {
    // Frobenius norm of ∂h as a linear map, summed over canonical directions:
    // ∂h(E, 0) = U^T E + E^T U and ∂h(0, E) = -(V^T E + E^T V)
    let mut norm2 = 0.0;
    for b in [u, v] {
        for col in 0..b.ncols() {
            for row in 0..b.nrows() {
                let mut e = Matrix::zeros(b.nrows(), b.ncols());
                e[(row, col)] = 1.0;
                let img = b.transpose() * &e + e.transpose() * b;
                norm2 += img.norm_squared();
            }
        }
    }
    norm2.sqrt()
}

fn two_layer_metric_derivative_norm(u: &Matrix, v: &Matrix) -> f64 {
    let (n, m) = (u.nrows(), v.nrows());
    let mut norm2 = 0.0;
    for block_idx in 0..2 {
        let b = if block_idx == 0 { u } else { v };
        for col in 0..b.ncols() {
            for row in 0..b.nrows() {
                let mut e = Matrix::zeros(b.nrows(), b.ncols());
                e[(row, col)] = 1.0;
                let term = b * e.transpose() + &e * b.transpose();
                // I ⊗ T or T ⊗ I both have Frobenius norm sqrt(dim) |T|
                let copies = if block_idx == 0 { m } else { n };
                norm2 += term.norm_squared() * copies as f64;
            }
        }
    }
    norm2.sqrt()
}

/// Exact Lie bracket `[∇φ_i, ∇φ_j](θ) = ∂²φ_j(θ)∇φ_i(θ) - ∂²φ_i(θ)∇φ_j(θ)`
/// of two monomial gradient fields.
pub fn lie_bracket(
    ml: &MonomialLifting,
    i: usize,
    j: usize,
    theta: &Vector,
) -> Result<Vector, ModelError> {
    let (gi, hi) = ml.grad_hess(i, theta)?;
    let (gj, hj) = ml.grad_hess(j, theta)?;
    Ok(&hj * gi - hi * gj)
}

/// Span dimensions before and after appending Lie brackets.
#[derive(Debug, Clone)]
pub struct FrobeniusReport {
    pub dim_span: usize,
    pub dim_span_with_brackets: usize,
    pub holds: bool,
}

/// Checks the Frobenius property of a monomial lifting at θ: the span of the
/// gradients must not grow when Lie brackets are appended.
///
/// `depth = 1` appends the exact first-generation brackets; deeper
/// generations bracket the previously collected fields numerically (central
/// differences of closed-form evaluations).
pub fn frobenius_check(
    ml: &MonomialLifting,
    theta: &Vector,
    tol: f64,
    depth: usize,
) -> Result<FrobeniusReport, ModelError> {
    assert!(depth >= 1, "at least one bracket generation is required");
    let d = ml.dim_lifted();
    let big_d = ml.dim_params();
    let mut grad_cols: Vec<Vector> = Vec::with_capacity(d);
    for i in 0..d {
        grad_cols.push(ml.grad(i, theta)?);
    }
    let gradients = from_columns(big_d, &grad_cols);
    let dim_span = rank_of(&gradients, tol);

    let mut all_cols = grad_cols.clone();
    for i in 0..d {
        for j in (i + 1)..d {
            all_cols.push(lie_bracket(ml, i, j, theta)?);
        }
    }
    if depth > 1 {
        // Deeper generations follow Lie_k = [W, Lie_{k-1}]: each new field is
        // the bracket of a gradient field with a previous-generation field.
        // Fields are closures evaluable anywhere, so brackets can be taken
        // numerically and rebracketed.
        use std::rc::Rc;
        type Field = Rc<dyn Fn(&Vector) -> Vector>;
        let ml_owned = ml.clone();
        let gradient_field = |i: usize| -> Field {
            let ml = ml_owned.clone();
            Rc::new(move |x: &Vector| ml.grad(i, x).expect("nonzero support"))
        };
        let bracket_of = |f: Field, g: Field| -> Field {
            Rc::new(move |x: &Vector| {
                let step = numdiff::default_step(x);
                let jf = numdiff::central_jacobian(f.as_ref(), x, step);
                let jg = numdiff::central_jacobian(g.as_ref(), x, step);
                &jg * f(x) - jf * g(x)
            })
        };
        let basis: Vec<Field> = (0..d).map(gradient_field).collect();
        let mut previous: Vec<Field> = Vec::new();
        for i in 0..d {
            for j in (i + 1)..d {
                previous.push(bracket_of(basis[i].clone(), basis[j].clone()));
            }
        }
        for _gen in 2..=depth {
            let mut next: Vec<Field> = Vec::new();
            for f in &basis {
                for g in &previous {
                    let b = bracket_of(f.clone(), g.clone());
                    all_cols.push(b(theta));
                    next.push(b);
                }
            }
            previous = next;
        }
    }
    let extended = from_columns(big_d, &all_cols);
    let dim_with = rank_of(&extended, tol);
    Ok(FrobeniusReport {
        dim_span,
        dim_span_with_brackets: dim_with,
        holds: dim_with == dim_span,
    })
}

fn from_columns(rows: usize, cols: &[Vector]) -> Matrix {
    let mut m = Matrix::zeros(rows, cols.len());
    for (c, v) in cols.iter().enumerate() {
        m.set_column(c, v);
    }
    m
}

fn rank_of(m: &Matrix, tol: f64) -> usize {
    if m.ncols() == 0 {
        return 0;
    }
    m.ncols() - kernel_basis(m, tol).ncols()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conservation::laws_for;
    use crate::linalg::unvec;
    use crate::models::{as_monomial, diag_path_lift, linear_chain, rank_one_lift};
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    fn random_nonzero(rng: &mut impl Rng, dim: usize) -> Vector {
        Vector::from_fn(dim, |_, _| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * (0.5 + rng.random::<f64>())
        })
    }

    #[test]
    fn bracket_of_disjoint_supports_vanishes() {
        // φ1 = θ1θ2, φ2 = θ3θ4
        let ml = MonomialLifting::new(vec![vec![1, 1, 0, 0], vec![0, 0, 1, 1]]).unwrap();
        let theta = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let b = lie_bracket(&ml, 0, 1, &theta).unwrap();
        assert_eq!(b.norm(), 0.0);
        // antisymmetry and [i, i] = 0
        let same = lie_bracket(&ml, 0, 0, &theta).unwrap();
        assert_eq!(same.norm(), 0.0);
    }

    #[test]
    fn bracket_hand_case() {
        // φ1 = θ1θ2, φ2 = θ1θ3 at (1,1,1): bracket = (0, -1, 1)
        let ml = MonomialLifting::new(vec![vec![1, 1, 0], vec![1, 0, 1]]).unwrap();
        let theta = Vector::from_vec(vec![1.0, 1.0, 1.0]);
        let b = lie_bracket(&ml, 0, 1, &theta).unwrap();
        assert_eq!(b.as_slice(), &[0.0, -1.0, 1.0]);
        let rev = lie_bracket(&ml, 1, 0, &theta).unwrap();
        assert_eq!((b + rev).norm(), 0.0);
    }

    #[test]
    fn bracket_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ml = as_monomial(&rank_one_lift(2, 2, 2).unwrap()).unwrap();
        let theta = random_nonzero(&mut rng, ml.dim_params());
        for (i, j) in [(0usize, 1usize), (2, 5), (1, 7)] {
            let exact = lie_bracket(&ml, i, j, &theta).unwrap();
            let fi = |x: &Vector| ml.grad(i, x).unwrap();
            let fj = |x: &Vector| ml.grad(j, x).unwrap();
            let step = numdiff::default_step(&theta);
            let ji = numdiff::central_jacobian(&fi, &theta, step);
            let jj = numdiff::central_jacobian(&fj, &theta, step);
            let fd = &jj * fi(&theta) - &ji * fj(&theta);
            let rel = (&exact - &fd).norm() / (1.0 + exact.norm());
            assert!(rel <= 1e-5, "pair ({i},{j}): rel {rel}");
        }
    }

    #[test]
    fn frobenius_holds_for_path_liftings() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rank_one = rank_one_lift(2, 2, 2).unwrap();
        let ml = as_monomial(&rank_one).unwrap();
        for _ in 0..20 {
            let theta = random_nonzero(&mut rng, ml.dim_params());
            let rep = frobenius_check(&ml, &theta, RANK_TOL, 1).unwrap();
            assert!(rep.holds, "rank-one: {rep:?}");
            assert_eq!(rep.dim_span, 6); // D - r hidden neurons = 8 - 2
        }
        let diag = diag_path_lift(2, 2).unwrap();
        let ml = as_monomial(&diag).unwrap();
        for _ in 0..20 {
            let theta = random_nonzero(&mut rng, ml.dim_params());
            let rep = frobenius_check(&ml, &theta, RANK_TOL, 1).unwrap();
            assert!(rep.holds, "diag-path: {rep:?}");
            assert_eq!(rep.dim_span, 4); // D - (n + m) = 8 - 4
        }
    }

    #[test]
    fn frobenius_trivial_for_commuting_scalar_chain() {
        let chain = linear_chain(&[1, 1, 1]).unwrap();
        let ml = as_monomial(&chain).unwrap();
        let theta = Vector::from_vec(vec![0.7, -1.3]);
        let rep = frobenius_check(&ml, &theta, RANK_TOL, 1).unwrap();
        assert!(rep.holds);
        assert_eq!(rep.dim_span, 1);
        assert_eq!(rep.dim_span_with_brackets, 1);
    }

    #[test]
    fn kernel_inclusion_trivial_for_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = rank_one_lift(2, 2, 2).unwrap();
        let laws = laws_for(&model).unwrap();
        for _ in 0..10 {
            let theta = random_nonzero(&mut rng, model.param_dim());
            let rep = kernel_inclusion_check(&model, &laws, &theta, 1e-8).unwrap();
            assert!(rep.intersection_trivial, "{rep:?}");
            assert!(rep.inclusion_holds);
            assert!(rep.dim_intersection <= rep.dim_ker_phi.min(rep.dim_ker_h));
        }
    }

    #[test]
    fn kernel_inclusion_two_layer_balanced_vs_not() {
        let dims = [3, 2, 3];
        let model = linear_chain(&dims).unwrap();
        let laws = laws_for(&model).unwrap();
        // balanced full-rank: inclusion holds
        let theta = crate::conservation::make_relaxed_balanced(&dims, &[0.4], 7).unwrap();
        let rep = kernel_inclusion_check(&model, &laws, &theta, 1e-8).unwrap();
        assert!(!rep.intersection_trivial);
        assert!(
            rep.inclusion_holds,
            "balanced worst {} vs scale {}",
            rep.worst_dm_norm, rep.dm_scale
        );
        // generic full-rank point with S != λI: inclusion must fail
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let theta = Vector::from_fn(model.param_dim(), |_, _| rng.random::<f64>() + 0.2);
        let rep = kernel_inclusion_check(&model, &laws, &theta, 1e-8).unwrap();
        assert!(!rep.inclusion_holds, "{rep:?}");
        assert!(rep.worst_dm_norm > 1e-6 * rep.dm_scale);
    }

    #[test]
    fn counterexample_direction_diagnostics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let u = Matrix::from_fn(3, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let v = Matrix::from_fn(3, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let s = u.transpose() * &u - v.transpose() * &v;
            let spec = sym_eig(&symmetrize(&s)).unwrap();
            if spec.eigenvalues[1] - spec.eigenvalues[0] < 1e-3 {
                continue; // nearly balanced draws are excluded by the error path
            }
            let dir = counterexample_direction(&u, &v).unwrap();
            assert!(dir.dphi_norm <= 1e-10 * dir.dphi_scale, "{dir:?}");
            assert!(dir.dh_norm <= 1e-10 * dir.dh_scale, "{dir:?}");
            assert!(dir.dm_norm > 1e-6 * dir.dm_scale, "{dir:?}");
        }
    }

    #[test]
    fn counterexample_identity_lyapunov_case() {
        // S = diag(1, -1) and U^T U + V^T V = I: Δ_S = [Δ_A, S] / 2
        let s = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, -1.0]));
        let x = Vector::from_vec(vec![1.0, 0.0]);
        let y = Vector::from_vec(vec![0.0, 1.0]);
        let delta_a = &x * y.transpose() - &y * x.transpose();
        let bracket = &delta_a * &s - &s * &delta_a;
        let delta_s = lyapunov_solve(&Matrix::identity(2, 2), &bracket).unwrap();
        assert!((delta_s - &bracket * 0.5).norm() <= 1e-14);
    }

    #[test]
    fn counterexample_rejects_balanced_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = Matrix::from_fn(3, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        // V with V^T V = U^T U: gives S = 0
        let utu = symmetrize(&(u.transpose() * &u));
        let root = crate::linalg::matfun_psd(&utu, crate::linalg::MatrixFn::Sqrt, 1e-10).unwrap();
        let q = Matrix::from_fn(3, 2, |_, _| rng.random::<f64>() - 0.5)
            .qr()
            .q();
        let v = q * root;
        assert!(matches!(
            counterexample_direction(&u, &v),
            Err(CriteriaError::RelaxedBalanced { .. })
        ));
    }

    #[test]
    fn counterexample_direction_lies_in_model_kernels() {
        // cross-check the hand-rolled diagnostics against the chain jacobians
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, m, r) = (3, 3, 2);
        let u = Matrix::from_fn(n, r, |_, _| rng.random::<f64>() + 0.3);
        let v = Matrix::from_fn(m, r, |_, _| rng.random::<f64>() * 2.0);
        let dir = counterexample_direction(&u, &v).unwrap();
        let model = linear_chain(&[m, r, n]).unwrap();
        let laws = laws_for(&model).unwrap();
        // θ = (U_1, U_2) = (V^T, U); K perturbs V, so dU_1 = K^T
        let theta = model.layout().pack(&[v.transpose(), u.clone()]).unwrap();
        let direction = model
            .layout()
            .pack(&[dir.k_block.transpose(), dir.h_block.clone()])
            .unwrap();
        let jphi = model.jacobian(&theta).unwrap();
        let jh = laws.jacobian(&theta).unwrap();
        let img_phi = &jphi * &direction;
        let img_h = &jh * &direction;
        assert!(img_phi.norm() <= 1e-10 * jphi.norm() * direction.norm());
        assert!(img_h.norm() <= 1e-10 * jh.norm() * direction.norm());
        let dm = metric_directional(&model, &theta, &direction).unwrap();
        assert!(dm.norm() > 1e-6 * direction.norm());
        // and the lifted image matches the hand-computed ∂φ action
        let z_dot = unvec(&img_phi, n, m).unwrap();
        assert!(z_dot.norm() <= 1e-8);
    }
}
