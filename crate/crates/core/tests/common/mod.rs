//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ista_nas::linalg::Matrix;
use ista_nas::supernet::tape::ParamKey;
use ista_nas::supernet::{
    BnMode, CellSpec, GradRequest, Network, NetworkConfig, NodeMixing, OperationKind, StemKind,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn to_dmatrix(a: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice())
}

/// Cyclic coordinate descent for `½‖Az − b‖² + λ‖z‖₁`, run until no
/// coordinate moves by more than 1e-15.
pub fn coordinate_descent_lasso(a: &Matrix, b: &[f64], lambda: f64) -> Vec<f64> {
    let (m, n) = (a.rows(), a.cols());
    let col_sq: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| a[(i, j)] * a[(i, j)]).sum())
        .collect();
    let mut z = vec![0.0; n];
    let mut r = b.to_vec();
    for _ in 0..1_000_000 {
        let mut delta = 0.0_f64;
        for j in 0..n {
            if col_sq[j] == 0.0 {
                continue;
            }
            let rho: f64 = (0..m).map(|i| a[(i, j)] * r[i]).sum::<f64>() + col_sq[j] * z[j];
            let new = rho.signum() * (rho.abs() - lambda).max(0.0) / col_sq[j];
            let d = new - z[j];
            if d != 0.0 {
                for i in 0..m {
                    r[i] -= a[(i, j)] * d;
                }
                z[j] = new;
                delta = delta.max(d.abs());
            }
        }
        if delta <= 1e-15 {
            break;
        }
    }
    z
}

pub fn lasso_objective_ref(a: &Matrix, b: &[f64], lambda: f64, z: &[f64]) -> f64 {
    let az = a.mul_vec(z);
    let fit: f64 = az.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    0.5 * fit + lambda * z.iter().map(|v| v.abs()).sum::<f64>()
}

/// Worst isometry defect over every column subset of size `k`, enumerated by
/// bitmask and scored with a dense SVD.
pub fn brute_force_rip(a: &Matrix, k: usize) -> f64 {
    let n = a.cols();
    assert!(n < 32);
    let mut worst = 0.0_f64;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let cols: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
        let sub = DMatrix::from_fn(a.rows(), k, |i, c| a[(i, cols[c])]);
        let sv = sub.singular_values();
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        let smin = if a.rows() < k {
            0.0
        } else {
            sv.iter().cloned().fold(f64::INFINITY, f64::min)
        };
        worst = worst.max((1.0 - smin * smin).max(smax * smax - 1.0));
    }
    worst
}

/// Two-node cell over all seven operations with a linear stem: every kind
/// of trainable leaf is present.
pub fn rich_config() -> NetworkConfig {
    let mut cfg = NetworkConfig::new(CellSpec::standard(2, 4), 5, 3, StemKind::Linear);
    cfg.num_cells = 2;
    cfg
}

/// Single node over identity and both pools, fed by split inputs.
pub fn micro_config(width: usize) -> NetworkConfig {
    let spec = CellSpec {
        num_nodes: 3,
        num_input_nodes: 2,
        ops: vec![OperationKind::Identity, OperationKind::PoolAvg, OperationKind::PoolMax],
        sparseness: vec![2],
        width,
    };
    NetworkConfig::new(spec, 2 * width, 2, StemKind::Split)
}

pub fn labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Relative error used by the gradient checks; tiny pairs are compared
/// absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Central differences of the loss with respect to every entry of every
/// network parameter in `keys`.
pub fn finite_difference_net(
    net: &Network,
    mixing: &[Vec<NodeMixing>],
    x: &Matrix,
    y: &[usize],
    keys: &[ParamKey],
    h: f64,
) -> BTreeMap<ParamKey, Matrix> {
    let mut out = BTreeMap::new();
    for &key in keys {
        let base = net.param(key).unwrap().clone();
        let mut g = Matrix::zeros(base.rows(), base.cols());
        for e in 0..base.as_slice().len() {
            let mut probe = net.clone();
            probe.param_mut(key).unwrap().as_mut_slice()[e] = base.as_slice()[e] + h;
            let up = probe.forward(mixing, x, y, BnMode::Train, GradRequest::NONE).unwrap().loss_value();
            probe.param_mut(key).unwrap().as_mut_slice()[e] = base.as_slice()[e] - h;
            let down = probe.forward(mixing, x, y, BnMode::Train, GradRequest::NONE).unwrap().loss_value();
            g.as_mut_slice()[e] = (up - down) / (2.0 * h);
        }
        out.insert(key, g);
    }
    out
}
