use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{cosine_lr, ModelConfig, Sgd, TrainConfig};
use crate::error::{Error, Result};
use crate::eval_bench::{Split, Task};
use crate::supernet::{Architecture, BnMode, GradRequest, Network, NodeMixing};

/// Shuffle `0..n` and cut it into `max(1, n / batch_size)` batches whose
/// sizes differ by at most one, so no batch is degenerate.
pub fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let count = (n / batch_size.max(1)).max(1);
    let (base, extra) = (n / count, n % count);
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for i in 0..count {
        let len = base + usize::from(i < extra);
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Train weights and normalization affines of a network under a fixed
/// mixing. Returns the mean training loss of the final epoch.
pub fn train_fixed(
    net: &mut Network,
    mixing: &[Vec<NodeMixing>],
    data: &Split,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    train_fixed_observed(net, mixing, data, config, rng, &mut |_| Ok(()))
}

/// Progress of one weight-training step.
pub(crate) struct StepInfo<'a> {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub active: &'a [Vec<usize>],
}

pub(crate) fn train_fixed_observed(
    net: &mut Network,
    mixing: &[Vec<NodeMixing>],
    data: &Split,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    on_step: &mut dyn FnMut(StepInfo<'_>) -> Result<()>,
) -> Result<f64> {
    let mut sgd = Sgd::new(config.weights.clone());
    let per_epoch = (data.len() / config.batch_size.max(1)).max(1);
    let total = config.epochs * per_epoch;
    let mut step = 0;
    let mut last = f64::NAN;
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        let bs = batches(data.len(), config.batch_size, rng);
        for rows in &bs {
            let batch = data.gather(rows);
            let req = GradRequest {
                weights: true,
                bn_affine: true,
                arch: false,
            };
            let fwd = net.forward(mixing, &batch.x, &batch.y, BnMode::Train, req)?;
            let loss = fwd.loss_value();
            if !loss.is_finite() {
                return Err(Error::Divergence { iteration: step });
            }
            let grads = fwd.tape.backward(fwd.loss)?;
            net.commit_bn_stats(&fwd.bn_stats);
            let lr = if config.cosine {
                cosine_lr(config.weights.lr, step, total)
            } else {
                config.weights.lr
            };
            sgd.step(net, &grads, lr);
            on_step(StepInfo {
                epoch,
                step,
                loss,
                lr,
                active: &fwd.active,
            })?;
            sum += loss;
            step += 1;
        }
        last = sum / bs.len() as f64;
    }
    Ok(last)
}

/// Train an architecture from scratch on the full train split and report its
/// test accuracy. Coefficients are used as given.
pub fn train_architecture(
    model: &ModelConfig,
    task: &Task,
    arch: &Architecture,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Network, f64)> {
    let net_cfg = model.network_config(task.input_dim(), task.classes());
    arch.validate(&net_cfg.cell, net_cfg.num_kinds())?;
    let mut net = Network::new(net_cfg, seed)?;
    let mixing = NodeMixing::from_architecture(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    train_fixed(&mut net, &mixing, &task.train, config, &mut rng)?;
    let acc = net.accuracy(&mixing, &task.test.x, &task.test.y)?;
    Ok((net, acc))
}
