use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    batches, cosine_lr, elapsed_ms, load_task, Adam, Observer, Phase, RecoveryFrequency,
    SearchOutcome, SearchState, SearchTrace, Sgd, TraceRecord, TwoStageConfig,
};
use crate::error::{Error, Result};
use crate::eval_bench::Task;
use crate::supernet::tape::ParamKey;
use crate::supernet::{BnMode, GradRequest, Network};

/// Alternate sparse recovery, weight descent on the train half, and
/// compressed-variable descent on the validation half.
pub fn two_stage_search(config: &TwoStageConfig, observer: Observer<'_>) -> Result<SearchOutcome> {
    config.validate()?;
    let task = load_task(&config.task)?;
    two_stage_search_on(config, &task, observer)
}

/// [`two_stage_search`] on an already generated task.
pub fn two_stage_search_on(
    config: &TwoStageConfig,
    task: &Task,
    observer: Observer<'_>,
) -> Result<SearchOutcome> {
    config.validate()?;
    let start = Instant::now();
    let spec = &config.model.cell;
    let (train, val) = task.split_train(config.train_fraction);
    let mut net = Network::new(
        config.model.network_config(task.input_dim(), task.classes()),
        config.seed,
    )?;
    net.freeze_bn();
    let mut state = SearchState::init(&config.model, config.seed, config.b_init_scale)?;
    state.recover(spec, config.lambda, &config.solver, config.warm_iters)?;

    let mut sgd = Sgd::new(config.weights.clone());
    let mut adam = Adam::new(config.arch.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7a1));
    let per_epoch = (train.len() / config.batch_size)
        .min(val.len() / config.batch_size)
        .max(1);
    let total = config.epochs * per_epoch;
    let mut trace = SearchTrace::default();

    for epoch in 0..config.epochs {
        let tb = batches(train.len(), config.batch_size, &mut rng);
        let vb = batches(val.len(), config.batch_size, &mut rng);
        for (k, (trows, vrows)) in tb.iter().zip(&vb).enumerate() {
            let it = state.iteration;
            let due = match config.recovery {
                RecoveryFrequency::Epoch => k == 0,
                RecoveryFrequency::Step => true,
            };
            let z_change = if due && it > 0 {
                state.recover(spec, config.lambda, &config.solver, config.warm_iters)?
            } else {
                None
            };
            let mixing = state.mixing();
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
            for (kind, nodes) in state.nodes.iter_mut().enumerate() {
                for (node, ns) in nodes.iter_mut().enumerate() {
                    let key = ParamKey::Arch { kind, node };
                    if let Some(g) = vgrads.get(&key) {
                        adam.step(key, &mut ns.b, g.as_slice());
                    }
                }
            }

            let record = TraceRecord {
                phase: Phase::Search,
                epoch,
                iteration: it,
                lr,
                train_loss,
                val_loss: Some(val_loss),
                val_accuracy: Some(hits as f64 / vbatch.len() as f64),
                z_change,
                supports: state.supports(),
                active_connections: fwd.active.clone(),
                arch_weights: None,
                search_flag: true,
                bn_frozen: true,
                elapsed_ms: elapsed_ms(start),
            };
            observer(&record)?;
            trace.push(record);
            state.iteration += 1;
        }
    }
    if config.epochs > 0 {
        state.recover(spec, config.lambda, &config.solver, config.warm_iters)?;
    }
    let architecture = state.architecture()?;
    let val_accuracy = net.accuracy(&state.mixing(), &val.x, &val.y)?;
    Ok(SearchOutcome {
        architecture,
        trace,
        network: net,
        val_accuracy,
        matrix_seeds: state.matrix_seeds(),
    })
}
