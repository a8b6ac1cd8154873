mod common;

use common::{brute_force_rip, gaussian_matrix, rng, to_dmatrix};
use ista_nas::measurement::{estimate_rip_constant, mutual_coherence, sample_matrix, RipMode};
use ista_nas::sparse_coding::{ista_solve, project_top_s, LassoProblem, SolverConfig};
use ista_nas::Matrix;

#[test]
fn exhaustive_scan_equals_brute_force_bit_for_bit() {
    for seed in 0..5 {
        let a = sample_matrix(8, 14, seed).unwrap();
        for s in [1, 2] {
            let d = estimate_rip_constant(a.a(), s, RipMode::Exhaustive).unwrap();
            assert_eq!(d.delta_hat.to_bits(), brute_force_rip(a.a(), 2 * s).to_bits());
            assert!(!d.lower_bound);
        }
    }
}

#[test]
fn sampled_scan_is_a_lower_bound() {
    let a = sample_matrix(8, 14, 3).unwrap();
    let exact = estimate_rip_constant(a.a(), 2, RipMode::Exhaustive).unwrap();
    let sampled = estimate_rip_constant(a.a(), 2, RipMode::Sampled { seed: 1 }).unwrap();
    assert!(sampled.lower_bound);
    assert!(sampled.delta_hat <= exact.delta_hat);
}

#[test]
fn duplicated_column_breaks_isometry() {
    let mut a = sample_matrix(8, 14, 2).unwrap().a().clone();
    for i in 0..8 {
        a[(i, 5)] = a[(i, 9)];
    }
    let d = estimate_rip_constant(&a, 2, RipMode::Exhaustive).unwrap();
    assert!(d.delta_hat >= 1.0 - 1e-12, "{}", d.delta_hat);
    assert!((d.coherence - 1.0).abs() < 1e-12);
}

#[test]
fn residual_identity_against_dense_product() {
    let a = sample_matrix(9, 20, 11).unwrap();
    let d = to_dmatrix(a.a());
    let gram = d.transpose() * &d;
    for i in 0..20 {
        for j in 0..20 {
            let want = gram[(i, j)] - if i == j { 1.0 } else { 0.0 };
            assert!((a.e()[(i, j)] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn coherence_matches_pairwise_scan() {
    let mut r = rng(5);
    let a = gaussian_matrix(6, 10, &mut r);
    let d = to_dmatrix(&a);
    let mut want = 0.0_f64;
    for i in 0..10 {
        for j in i + 1..10 {
            let (ci, cj) = (d.column(i), d.column(j));
            want = want.max((ci.dot(&cj) / (ci.norm() * cj.norm())).abs());
        }
    }
    assert!((mutual_coherence(&a) - want).abs() < 1e-12);
}

#[test]
fn small_rip_constant_gives_unique_sparse_preimages() {
    // δ₂ₛ < 1 means no 2s-sparse vector is in the kernel, so two distinct
    // s-sparse codes never share a measurement.
    let a = sample_matrix(10, 12, 4).unwrap();
    let d = estimate_rip_constant(a.a(), 1, RipMode::Exhaustive).unwrap();
    assert!(d.delta_hat < 1.0);
    let mut z = vec![0.0; 12];
    z[3] = 1.5;
    z[8] = -0.7;
    let b = a.a().mul_vec(&z);
    let p = LassoProblem::new(a.a().clone(), b, 1e-5).unwrap();
    let sol = ista_solve(&p, &SolverConfig::default(), None).unwrap();
    assert_eq!(project_top_s(&sol.z, 2).unwrap().support, vec![3, 8]);
}

#[test]
fn identity_columns_are_isometric() {
    let mut a = Matrix::zeros(4, 5);
    for i in 0..4 {
        a[(i, i)] = 1.0;
    }
    let d = estimate_rip_constant(&a, 1, RipMode::Exhaustive).unwrap();
    assert_eq!(d.delta_hat, brute_force_rip(&a, 2));
}
