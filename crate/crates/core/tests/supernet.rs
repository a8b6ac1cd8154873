mod common;

use std::sync::Arc;

use common::{finite_difference_net, gaussian_matrix, labels, micro_config, rel_err, rich_config, rng};
use ista_nas::measurement::{compressed_dim, sample_matrix, CompressionPolicy};
use ista_nas::supernet::tape::ParamKey;
use ista_nas::supernet::{
    Architecture, BnMode, GradRequest, Network, NetworkConfig, NodeChoice, NodeMixing,
};
use ista_nas::Matrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Compressed mixing for every node with `b = Az` of a random s-sparse `z`,
/// plus the matching direct mixing.
fn sparse_mixing(
    cfg: &NetworkConfig,
    restricted: bool,
    r: &mut ChaCha8Rng,
) -> (Vec<Vec<NodeMixing>>, Vec<Vec<NodeMixing>>) {
    let spec = &cfg.cell;
    let mut compressed = Vec::new();
    let mut direct = Vec::new();
    for _ in 0..cfg.num_kinds() {
        let (mut ck, mut dk) = (Vec::new(), Vec::new());
        for j in 0..spec.intermediate() {
            let n = spec.candidates(j);
            let s = spec.sparseness[j];
            let m = compressed_dim(n, s, CompressionPolicy::Default).unwrap();
            let mat = Arc::new(sample_matrix(m, n, r.random()).unwrap());
            let mut support = sample(r, n, s).into_vec();
            support.sort_unstable();
            let mut z = vec![0.0; n];
            for &i in &support {
                z[i] = r.sample::<f64, _>(StandardNormal);
            }
            let b = mat.a().mul_vec(&z);
            ck.push(NodeMixing::Compressed {
                b,
                z: z.clone(),
                matrix: mat,
                support: restricted.then_some(support),
            });
            dk.push(NodeMixing::Direct { z });
        }
        compressed.push(ck);
        direct.push(dk);
    }
    (compressed, direct)
}

fn batch(cfg: &NetworkConfig, rows: usize, r: &mut ChaCha8Rng) -> (Matrix, Vec<usize>) {
    (gaussian_matrix(rows, cfg.input_dim, r), labels(rows, cfg.classes, r))
}

#[test]
fn compressed_propagation_equals_direct_propagation() {
    for restricted in [false, true] {
        for seed in 0..5 {
            let mut r = rng(seed);
            let cfg = rich_config();
            let net = Network::new(cfg.clone(), seed).unwrap();
            let (x, y) = batch(&cfg, 8, &mut r);
            let (comp, direct) = sparse_mixing(&cfg, restricted, &mut r);
            for mode in [BnMode::Train, BnMode::Eval] {
                let f1 = net.forward(&comp, &x, &y, mode, GradRequest::NONE).unwrap();
                let f2 = net.forward(&direct, &x, &y, mode, GradRequest::NONE).unwrap();
                assert!((f1.loss_value() - f2.loss_value()).abs() <= 1e-6);
                for (c1, c2) in f1.nodes.iter().zip(&f2.nodes) {
                    for (v1, v2) in c1.iter().zip(c2) {
                        let d = f1.tape.value(*v1).sub(f2.tape.value(*v2)).max_abs();
                        assert!(d <= 1e-6, "seed {seed} restricted {restricted}: {d}");
                    }
                }
            }
        }
    }
}

/// Central differences of the loss with respect to each architecture leaf.
fn finite_difference_arch(
    net: &Network,
    mixing: &[Vec<NodeMixing>],
    x: &Matrix,
    y: &[usize],
    h: f64,
) -> Vec<(ParamKey, Vec<f64>)> {
    let loss = |m: &[Vec<NodeMixing>]| {
        net.forward(m, x, y, BnMode::Train, GradRequest::NONE).unwrap().loss_value()
    };
    let mut out = Vec::new();
    for kind in 0..mixing.len() {
        for node in 0..mixing[kind].len() {
            let len = match &mixing[kind][node] {
                NodeMixing::Compressed { b, .. } => b.len(),
                NodeMixing::Softmax { alpha } => alpha.len(),
                _ => continue,
            };
            let mut g = Vec::with_capacity(len);
            for e in 0..len {
                let mut probe = mixing.to_vec();
                let shift = |delta: f64, p: &mut Vec<Vec<NodeMixing>>| match &mut p[kind][node] {
                    NodeMixing::Compressed { b, .. } => b[e] += delta,
                    NodeMixing::Softmax { alpha } => alpha[e] += delta,
                    _ => unreachable!(),
                };
                shift(h, &mut probe);
                let up = loss(&probe);
                shift(-2.0 * h, &mut probe);
                let down = loss(&probe);
                g.push((up - down) / (2.0 * h));
            }
            out.push((ParamKey::Arch { kind, node }, g));
        }
    }
    out
}

fn check_gradients(net: &Network, mixing: &[Vec<NodeMixing>], x: &Matrix, y: &[usize]) {
    let fwd = net.forward(mixing, x, y, BnMode::Train, GradRequest::ALL).unwrap();
    let grads = fwd.tape.backward(fwd.loss).unwrap();
    let mut keys = net.weight_keys();
    for slot in 0..net.bn_count() {
        let (g, b) = net.bn_keys(slot);
        keys.extend([g, b]);
    }
    let numeric = finite_difference_net(net, mixing, x, y, &keys, 1e-5);
    let mut checked = 0;
    for (key, fd) in &numeric {
        match grads.get(key) {
            Some(g) => {
                for (a, n) in g.as_slice().iter().zip(fd.as_slice()) {
                    assert!(rel_err(*a, *n) <= 1e-4, "{}: {a} vs {n}", net.param_name(*key).unwrap());
                }
                checked += 1;
            }
            // unreached leaves must not influence the loss at all
            None => assert!(fd.as_slice().iter().all(|v| *v == 0.0), "{}", net.param_name(*key).unwrap()),
        }
    }
    assert!(checked > 0);
    for (key, fd) in finite_difference_arch(net, mixing, x, y, 1e-5) {
        let g = grads.get(&key).expect("architecture leaf has a gradient");
        for (a, n) in g.as_slice().iter().zip(&fd) {
            assert!(rel_err(*a, *n) <= 1e-4, "{key:?}: {a} vs {n}");
        }
    }
}

#[test]
fn gradients_match_finite_differences_under_compressed_mixing() {
    let mut r = rng(21);
    let cfg = rich_config();
    let net = Network::new(cfg.clone(), 3).unwrap();
    let (x, y) = batch(&cfg, 6, &mut r);
    let (mixing, _) = sparse_mixing(&cfg, true, &mut r);
    check_gradients(&net, &mixing, &x, &y);
}

#[test]
fn gradients_match_finite_differences_under_softmax_mixing() {
    let mut r = rng(22);
    let mut cfg = rich_config();
    cfg.reduction_cells = vec![1];
    let net = Network::new(cfg.clone(), 4).unwrap();
    let (x, y) = batch(&cfg, 6, &mut r);
    let mixing: Vec<Vec<NodeMixing>> = (0..2)
        .map(|_| {
            (0..cfg.cell.intermediate())
                .map(|j| NodeMixing::Softmax {
                    alpha: (0..cfg.cell.candidates(j)).map(|_| r.sample(StandardNormal)).collect(),
                })
                .collect()
        })
        .collect();
    check_gradients(&net, &mixing, &x, &y);
}

#[test]
fn non_support_weights_get_no_gradient() {
    let mut r = rng(23);
    let cfg = rich_config();
    let net = Network::new(cfg.clone(), 5).unwrap();
    let (x, y) = batch(&cfg, 6, &mut r);
    let (mixing, _) = sparse_mixing(&cfg, true, &mut r);
    let fwd = net.forward(&mixing, &x, &y, BnMode::Train, GradRequest::ALL).unwrap();
    let grads = fwd.tape.backward(fwd.loss).unwrap();
    let base = fwd.loss_value();
    for cell in 0..cfg.num_cells {
        for (j, node) in mixing[0].iter().enumerate() {
            let NodeMixing::Compressed { support: Some(s), .. } = node else { unreachable!() };
            for cand in (0..cfg.cell.candidates(j)).filter(|c| !s.contains(c)) {
                let slot = net.bn_slot(cell, j, cand);
                let (g, b) = net.bn_keys(slot);
                let mut keys = net.connection_weight_keys(cell, j, cand);
                keys.extend([g, b]);
                for key in keys {
                    assert!(!grads.contains_key(&key));
                    let mut probe = net.clone();
                    probe.param_mut(key).unwrap().as_mut_slice()[0] += 1.0;
                    let loss = probe.forward(&mixing, &x, &y, BnMode::Train, GradRequest::NONE).unwrap();
                    assert_eq!(loss.loss_value().to_bits(), base.to_bits());
                }
            }
        }
    }
}

/// Run a few training-mode passes so running statistics move away from
/// their initial values, then perturb the affine parameters.
fn warmed_network(cfg: &NetworkConfig, mixing: &[Vec<NodeMixing>], seed: u64) -> Network {
    let mut r = rng(seed);
    let mut net = Network::new(cfg.clone(), seed).unwrap();
    for _ in 0..5 {
        let (x, y) = batch(cfg, 16, &mut r);
        let f = net.forward(mixing, &x, &y, BnMode::Train, GradRequest::NONE).unwrap();
        net.commit_bn_stats(&f.bn_stats);
    }
    for slot in 0..net.bn_count() {
        let mut p = net.bn_params(slot);
        p.gamma.iter_mut().for_each(|g| *g += 0.3 * r.sample::<f64, _>(StandardNormal));
        p.beta.iter_mut().for_each(|b| *b += 0.3 * r.sample::<f64, _>(StandardNormal));
        net.set_bn_params(slot, &p).unwrap();
    }
    net
}

#[test]
fn absorbed_network_reproduces_outputs() {
    let cfg = rich_config();
    let arch = Architecture {
        kinds: vec![vec![
            NodeChoice {
                support: vec![0, 9],
                coefficients: vec![0.7, -1.3],
            },
            NodeChoice {
                support: vec![4, 12, 20],
                coefficients: vec![2.0, 0.25, -0.5],
            },
        ]],
    };
    let mut sparse = cfg.clone();
    sparse.cell.sparseness = vec![2, 3];
    let mixing = NodeMixing::from_architecture(&arch);
    let net = warmed_network(&sparse, &mixing, 8);
    let (x, _) = batch(&sparse, 40, &mut rng(9));
    let before = net.predict(&mixing, &x).unwrap();

    let mut absorbed = net.clone();
    let unit = absorbed.absorb(&arch).unwrap();
    assert!(unit.kinds[0].iter().all(|n| n.coefficients.iter().all(|&c| c == 1.0)));
    let after = absorbed.predict(&NodeMixing::from_architecture(&unit), &x).unwrap();
    assert!(before.sub(&after).max_abs() <= 1e-6);
    assert_eq!(before.argmax_rows(), after.argmax_rows());
}

#[test]
fn frozen_normalization_is_identity_affine_and_untrained() {
    let cfg = micro_config(4);
    let mut r = rng(30);
    let mut net = Network::new(cfg.clone(), 1).unwrap();
    for slot in 0..net.bn_count() {
        let mut p = net.bn_params(slot);
        p.gamma[0] = 3.0;
        p.beta[1] = -2.0;
        net.set_bn_params(slot, &p).unwrap();
    }
    net.freeze_bn();
    let (x, y) = batch(&cfg, 8, &mut r);
    let mixing = vec![vec![NodeMixing::Direct {
        z: vec![1.0, 0.0, 0.5, 0.0, -1.0, 0.0],
    }]];
    let fwd = net.forward(&mixing, &x, &y, BnMode::Train, GradRequest::ALL).unwrap();
    let grads = fwd.tape.backward(fwd.loss).unwrap();
    for slot in 0..net.bn_count() {
        assert!(net.bn_frozen(slot));
        let p = net.bn_params(slot);
        assert!(p.gamma.iter().all(|&g| g == 1.0) && p.beta.iter().all(|&b| b == 0.0));
        let (g, b) = net.bn_keys(slot);
        assert!(!grads.contains_key(&g) && !grads.contains_key(&b));
    }
    let arch = Architecture {
        kinds: vec![vec![NodeChoice {
            support: vec![0, 2],
            coefficients: vec![1.0, 0.5],
        }]],
    };
    assert!(net.clone().absorb(&arch).is_err());
    net.unfreeze_bn();
    assert!(net.absorb(&arch).is_ok());
}

#[test]
fn construction_is_deterministic_per_seed() {
    let cfg = rich_config();
    let a = Network::new(cfg.clone(), 12).unwrap();
    let b = Network::new(cfg.clone(), 12).unwrap();
    let c = Network::new(cfg, 13).unwrap();
    assert_eq!(a.named_tensors(), b.named_tensors());
    assert_ne!(a.named_tensors(), c.named_tensors());
}
