use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    batches, cosine_lr, elapsed_ms, load_task, Adam, Observer, Phase, SearchOutcome,
    SearchTrace, Sgd, TraceRecord, TwoStageConfig,
};
use crate::error::{Error, Result};
use crate::eval_bench::Task;
use crate::sparse_coding::top_indices;
use crate::supernet::tape::ParamKey;
use crate::supernet::{Architecture, BnMode, GradRequest, Network, NodeChoice, NodeMixing};

/// Softmax over consecutive groups of `k` entries.
fn edge_softmax(alpha: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(alpha.len());
    for seg in alpha.chunks(k) {
        let mx = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = seg.iter().map(|a| (a - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// First-order softmax relaxation: every connection is propagated, weighted
/// by a per-edge softmax over operations. The final architecture keeps the
/// `s` strongest weights of each node.
pub fn darts_baseline_search(config: &TwoStageConfig, observer: Observer<'_>) -> Result<SearchOutcome> {
    config.validate()?;
    let task = load_task(&config.task)?;
    darts_baseline_search_on(config, &task, observer)
}

/// [`darts_baseline_search`] on an already generated task.
pub fn darts_baseline_search_on(
    config: &TwoStageConfig,
    task: &Task,
    observer: Observer<'_>,
) -> Result<SearchOutcome> {
    config.validate()?;
    let start = Instant::now();
    let spec = &config.model.cell;
    let k = spec.k();
    let (train, val) = task.split_train(config.train_fraction);
    let mut net = Network::new(
        config.model.network_config(task.input_dim(), task.classes()),
        config.seed,
    )?;
    net.freeze_bn();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7a1));
    let init = Normal::new(0.0, 1e-3).expect("positive std");
    let mut alphas: Vec<Vec<Vec<f64>>> = (0..config.model.num_kinds())
        .map(|_| {
            (0..spec.intermediate())
                .map(|j| (0..spec.candidates(j)).map(|_| init.sample(&mut rng)).collect())
                .collect()
        })
        .collect();
    let mixing_of = |alphas: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<NodeMixing>> {
        alphas
            .iter()
            .map(|k| k.iter().map(|a| NodeMixing::Softmax { alpha: a.clone() }).collect())
            .collect()
    };
    let weights_of = |alphas: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vec<f64>>> {
        alphas
            .iter()
            .map(|kk| kk.iter().map(|a| edge_softmax(a, k)).collect())
            .collect()
    };
    let project = |weights: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vec<usize>>> {
        weights
            .iter()
            .map(|kk| {
                kk.iter()
                    .enumerate()
                    .map(|(j, w)| {
                        let mut s = top_indices(w, spec.sparseness[j]);
                        s.sort_unstable();
                        s
                    })
                    .collect()
            })
            .collect()
    };

    let mut sgd = Sgd::new(config.weights.clone());
    let mut adam = Adam::new(config.arch.clone());
    let per_epoch = (train.len() / config.batch_size)
        .min(val.len() / config.batch_size)
        .max(1);
    let total = config.epochs * per_epoch;
    let mut trace = SearchTrace::default();
    let mut it = 0;
    for epoch in 0..config.epochs {
        let tb = batches(train.len(), config.batch_size, &mut rng);
        let vb = batches(val.len(), config.batch_size, &mut rng);
        for (trows, vrows) in tb.iter().zip(&vb) {
            let mixing = mixing_of(&alphas);
            let batch = train.gather(trows);
            let req = GradRequest {
                weights: true,
                bn_affine: false,
                arch: false,
            };
            let fwd = net.forward(&mixing, &batch.x, &batch.y, BnMode::Train, req)?;
            let train_loss = fwd.loss_value();
            if !train_loss.is_finite() {
                return Err(Error::Divergence { iteration: it });
            }
            let grads = fwd.tape.backward(fwd.loss)?;
            net.commit_bn_stats(&fwd.bn_stats);
            let lr = cosine_lr(config.weights.lr, it, total);
            sgd.step(&mut net, &grads, lr);

            let vbatch = val.gather(vrows);
            let req = GradRequest {
                weights: false,
                bn_affine: false,
                arch: true,
            };
            let vf = net.forward(&mixing, &vbatch.x, &vbatch.y, BnMode::Train, req)?;
            let val_loss = vf.loss_value();
            if !val_loss.is_finite() {
                return Err(Error::Divergence { iteration: it });
            }
            let hits = vf
                .logits_value()
                .argmax_rows()
                .iter()
                .zip(&vbatch.y)
                .filter(|(p, l)| p == l)
                .count();
            let vgrads = vf.tape.backward(vf.loss)?;
            for (kind, nodes) in alphas.iter_mut().enumerate() {
                for (node, a) in nodes.iter_mut().enumerate() {
                    let key = ParamKey::Arch { kind, node };
                    if let Some(g) = vgrads.get(&key) {
                        adam.step(key, a, g.as_slice());
                    }
                }
            }
            let weights = weights_of(&alphas);
            let record = TraceRecord {
                phase: Phase::Baseline,
                epoch,
                iteration: it,
                lr,
                train_loss,
                val_loss: Some(val_loss),
                val_accuracy: Some(hits as f64 / vbatch.len() as f64),
                z_change: None,
                supports: project(&weights),
                active_connections: fwd.active.clone(),
                arch_weights: Some(weights),
                search_flag: true,
                bn_frozen: true,
                elapsed_ms: elapsed_ms(start),
            };
            observer(&record)?;
            trace.push(record);
            it += 1;
        }
    }

    let weights = weights_of(&alphas);
    let supports = project(&weights);
    let architecture = Architecture {
        kinds: supports
            .iter()
            .zip(&weights)
            .map(|(ks, kw)| {
                ks.iter()
                    .zip(kw)
                    .map(|(s, w)| NodeChoice {
                        support: s.clone(),
                        coefficients: s.iter().map(|&i| w[i]).collect(),
                    })
                    .collect()
            })
            .collect(),
    };
    let val_accuracy = net.accuracy(&mixing_of(&alphas), &val.x, &val.y)?;
    Ok(SearchOutcome {
        architecture,
        trace,
        network: net,
        val_accuracy,
        matrix_seeds: Vec::new(),
    })
}
