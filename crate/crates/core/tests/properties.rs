//! Property tests for the algebraic identities the kernels rely on.

use intrinsic_flow::flows::{recover_gram, solve_alpha_beta, ALPHA_BETA_MAX_ITER, ALPHA_BETA_TOL};
use intrinsic_flow::linalg::{
    kernel_basis, kron, matfun_psd, sym_eig, symmetrize, unvec, vec_mat, Matrix, MatrixFn, Vector,
    PSD_CLAMP_TOL, RANK_TOL,
};
use proptest::prelude::*;

fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |data| Matrix::from_vec(rows, cols, data))
}

fn dims() -> impl Strategy<Value = usize> {
    1usize..5
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vec_kron_identity((p, q, r) in (dims(), dims(), dims()),
                         seed in 0u64..1000) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let s = Matrix::from_fn(p, q, |_, _| rng.random::<f64>() - 0.5);
        let x = Matrix::from_fn(q, r, |_, _| rng.random::<f64>() - 0.5);
        let t = Matrix::from_fn(r, p, |_, _| rng.random::<f64>() - 0.5);
        let lhs = kron(&t.transpose(), &s) * vec_mat(&x);
        let rhs = vec_mat(&(&s * &x * &t));
        prop_assert!((lhs - &rhs).norm() <= 1e-12 * (1.0 + rhs.norm()));
    }

    #[test]
    fn vec_unvec_round_trip(rows in dims(), cols in dims(), data in proptest::collection::vec(-5.0f64..5.0, 16)) {
        prop_assume!(data.len() >= rows * cols);
        let m = Matrix::from_vec(rows, cols, data[..rows * cols].to_vec());
        let back = unvec(&vec_mat(&m), rows, cols).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn sym_eig_reconstructs(a in matrix_strategy(6, 6)) {
        let s = symmetrize(&a);
        let spec = sym_eig(&s).unwrap();
        let rebuilt = spec.assemble(|l| l);
        prop_assert!((rebuilt - &s).norm() <= 1e-10 * (1.0 + s.norm()));
        // eigenvalues ascending
        for w in spec.eigenvalues.as_slice().windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn sqrt_squares_back(b in matrix_strategy(5, 3)) {
        let gram = symmetrize(&(&b * b.transpose()));
        let root = matfun_psd(&gram, MatrixFn::Sqrt, PSD_CLAMP_TOL).unwrap();
        prop_assert!((&root * &root - &gram).norm() <= 1e-9 * (1.0 + gram.norm()));
    }

    #[test]
    fn kernel_rank_nullity(a in matrix_strategy(4, 6)) {
        let basis = kernel_basis(&a, RANK_TOL);
        let nullity = basis.ncols();
        let sv = a.clone().svd(false, false).singular_values;
        let sigma_max = sv.iter().cloned().fold(0.0f64, f64::max);
        let rank = sv.iter().filter(|&&s| s > RANK_TOL * sigma_max * 6.0).count();
        prop_assert_eq!(rank + nullity, 6);
        if nullity > 0 {
            prop_assert!((&a * &basis).norm() <= 1e-8 * (1.0 + sigma_max));
            let gram = basis.transpose() * &basis;
            prop_assert!((gram - Matrix::identity(nullity, nullity)).norm() <= 1e-10);
        }
    }

    #[test]
    fn gram_recovery_inverts_polynomials(
        eigs in proptest::collection::vec(0.05f64..4.0, 3),
        roots in proptest::collection::vec(-0.5f64..0.5, 1..4),
        seed in 0u64..1000,
    ) {
        // build P with spectrum above max(0, roots), map through the
        // polynomial, and recover
        let mut roots = roots;
        roots.insert(0, 0.0); // the families used here always contain 0
        let lower = roots.iter().cloned().fold(0.0f64, f64::max);
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let q = Matrix::from_fn(3, 3, |_, _| rng.random::<f64>() - 0.5)
            .qr()
            .q();
        let p = &q
            * Matrix::from_diagonal(&Vector::from_iterator(3, eigs.iter().map(|e| lower + e)))
            * q.transpose();
        let p = symmetrize(&p);
        let spec = sym_eig(&p).unwrap();
        let e = spec.assemble(|x| roots.iter().map(|r| x - r).product());
        let recovered = recover_gram(&e, &roots).unwrap();
        prop_assert!((recovered - &p).norm() <= 1e-8 * (1.0 + p.norm()));
    }

    #[test]
    fn alpha_beta_residuals_vanish(
        entries in proptest::collection::vec(0.05f64..2.0, 6),
        lam in proptest::collection::vec(-0.3f64..0.5, 2),
        mu in proptest::collection::vec(-0.3f64..0.5, 3),
    ) {
        let zsq = Matrix::from_vec(2, 3, entries);
        let lambda = Vector::from_vec(lam);
        let mu = Vector::from_vec(mu);
        if let Ok(sol) = solve_alpha_beta(&zsq, &lambda, &mu, ALPHA_BETA_TOL, ALPHA_BETA_MAX_ITER) {
            prop_assert!(sol.residual <= 1e-10, "residual {}", sol.residual);
            prop_assert!(sol.alpha.iter().all(|&a| a > 0.0));
            prop_assert!(sol.beta.iter().all(|&b| b > 0.0));
        }
    }
}
