mod common;

use common::{coordinate_descent_lasso, gaussian_matrix, gaussian_vec, lasso_objective_ref, rng, to_dmatrix};
use ista_nas::linalg::norm_inf;
use ista_nas::sparse_coding::{
    ista_solve, ista_solve_traced, lasso_objective, lipschitz_constant, project_top_s,
    soft_threshold, LassoProblem, SolverConfig, SolverVariant,
};
use ista_nas::{Error, Matrix};
use proptest::prelude::*;

fn tight() -> SolverConfig {
    SolverConfig {
        max_iters: 200_000,
        rel_tol: 1e-12,
        ..SolverConfig::plain()
    }
}

fn instance(seed: u64) -> LassoProblem {
    let mut r = rng(seed);
    let m = 4 + (seed as usize % 9);
    let n = m + 2 + (seed as usize % 11);
    let a = gaussian_matrix(m, n, &mut r);
    let b = gaussian_vec(m, &mut r);
    let lambda = 0.05 * norm_inf(&a.t_mul_vec(&b));
    LassoProblem::new(a, b, lambda).unwrap()
}

#[test]
fn objective_matches_reference_formula() {
    let p = instance(3);
    let z = gaussian_vec(p.n(), &mut rng(4));
    let got = lasso_objective(&p, &z).unwrap();
    let want = lasso_objective_ref(p.a(), p.b(), p.lambda(), &z);
    assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
}

#[test]
fn every_variant_reaches_the_coordinate_descent_optimum() {
    for seed in 0..20 {
        let p = instance(seed);
        let oracle = coordinate_descent_lasso(p.a(), p.b(), p.lambda());
        let best = lasso_objective_ref(p.a(), p.b(), p.lambda(), &oracle);
        for variant in [SolverVariant::Ista, SolverVariant::Accelerated] {
            for continuation in [None, Some(Default::default())] {
                let cfg = SolverConfig {
                    variant,
                    continuation,
                    ..tight()
                };
                let sol = ista_solve(&p, &cfg, None).unwrap();
                assert!(
                    (sol.objective - best).abs() <= 1e-8,
                    "seed {seed} {variant:?}: {} vs {best}",
                    sol.objective
                );
            }
        }
    }
}

#[test]
fn plain_ista_never_increases_the_objective() {
    for seed in 0..10 {
        let (_, history) = ista_solve_traced(&instance(seed), &tight(), None).unwrap();
        assert!(history.windows(2).all(|w| w[1] <= w[0] + 1e-10), "seed {seed}");
    }
}

#[test]
fn warm_start_at_the_optimum_stays_there() {
    let p = instance(7);
    let oracle = coordinate_descent_lasso(p.a(), p.b(), p.lambda());
    let sol = ista_solve(&p, &tight(), Some(&oracle)).unwrap();
    assert!(sol.converged);
    for (x, y) in sol.z.iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn lipschitz_matches_dense_eigenvalue() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let a = gaussian_matrix(6 + seed as usize, 15, &mut r);
        let d = to_dmatrix(&a);
        let gram = d.transpose() * &d;
        let want = gram.symmetric_eigenvalues().max();
        let got = lipschitz_constant(&a).unwrap();
        assert!((got - want).abs() <= 1e-8 * want, "{got} vs {want}");
    }
}

#[test]
fn zero_matrix_is_rejected() {
    assert!(matches!(lipschitz_constant(&Matrix::zeros(3, 4)), Err(Error::ZeroMatrix)));
}

proptest! {
    #[test]
    fn soft_threshold_is_the_proximal_operator(x in prop::collection::vec(-10.0f64..10.0, 1..20), theta in 0.0f64..5.0) {
        let y = soft_threshold(&x, theta).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            // shrinks towards zero by exactly theta, never past it
            prop_assert!(yi.abs() <= xi.abs());
            prop_assert!(yi * xi >= 0.0);
            if xi.abs() > theta {
                prop_assert!((xi - yi - theta * xi.signum()).abs() < 1e-12);
            } else {
                prop_assert_eq!(*yi, 0.0);
            }
        }
    }

    #[test]
    fn soft_threshold_commutes_with_positive_scaling(x in prop::collection::vec(-10.0f64..10.0, 1..20), theta in 0.0f64..5.0, c in 0.1f64..10.0) {
        let scaled: Vec<f64> = x.iter().map(|v| c * v).collect();
        let lhs = soft_threshold(&scaled, c * theta).unwrap();
        let rhs = soft_threshold(&x, theta).unwrap();
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!((l - c * r).abs() <= 1e-9 * (1.0 + l.abs()));
        }
    }

    #[test]
    fn soft_threshold_is_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0, theta in 0.0f64..5.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let y = soft_threshold(&[lo, hi], theta).unwrap();
        prop_assert!(y[0] <= y[1]);
    }

    #[test]
    fn top_s_keeps_the_largest_magnitudes(z in prop::collection::vec(-10.0f64..10.0, 2..20), s_raw in 1usize..20) {
        let s = 1 + s_raw % z.len();
        let p = project_top_s(&z, s).unwrap();
        prop_assert!(p.support.len() <= s);
        prop_assert!(p.support.windows(2).all(|w| w[0] < w[1]));
        let min_kept = p.support.iter().map(|&i| z[i].abs()).fold(f64::INFINITY, f64::min);
        for i in 0..z.len() {
            if p.support.contains(&i) {
                prop_assert_eq!(p.z[i], z[i]);
            } else {
                prop_assert_eq!(p.z[i], 0.0);
                if p.support.len() == s {
                    prop_assert!(z[i].abs() <= min_kept);
                }
            }
        }
        // idempotent
        prop_assert_eq!(project_top_s(&p.z, s).unwrap(), p);
    }
}

#[test]
fn top_s_ties_go_to_the_lowest_index() {
    let p = project_top_s(&[1.0, -2.0, 2.0, 2.0], 2).unwrap();
    assert_eq!(p.support, vec![1, 2]);
}
