use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::train::{train_fixed_observed, StepInfo};
use super::{
    batches, elapsed_ms, load_task, Adam, Observer, OneStageConfig, Phase, RecoveryFrequency,
    SearchState, SearchTrace, Sgd, TraceRecord, TrainConfig,
};
use crate::error::{Error, Result};
use crate::eval_bench::Task;
use crate::linalg::distance2;
use crate::supernet::tape::ParamKey;
use crate::supernet::{Architecture, BnMode, GradRequest, Network, NodeMixing};

/// True iff every node moved by at most `epsilon` in ℓ2 distance.
pub fn termination_check(z_new: &[Vec<f64>], z_old: &[Vec<f64>], epsilon: f64) -> Result<bool> {
    if z_new.len() != z_old.len() {
        return Err(Error::Dimension(format!(
            "{} new nodes against {} old nodes",
            z_new.len(),
            z_old.len()
        )));
    }
    for (j, (a, b)) in z_new.iter().zip(z_old).enumerate() {
        if a.len() != b.len() {
            return Err(Error::Dimension(format!(
                "node {j}: lengths {} and {}",
                a.len(),
                b.len()
            )));
        }
    }
    Ok(z_new
        .iter()
        .zip(z_old)
        .all(|(a, b)| distance2(a, b) <= epsilon))
}

/// Termination test on the two most recent recoveries of every node.
fn converged(state: &SearchState, epsilon: f64) -> Result<bool> {
    let nodes: Vec<_> = state.nodes.iter().flatten().collect();
    let Some(z_old) = nodes.iter().map(|n| n.z_old.clone()).collect::<Option<Vec<_>>>() else {
        return Ok(false);
    };
    let z_new: Vec<Vec<f64>> = nodes.iter().map(|n| n.z.clone()).collect();
    termination_check(&z_new, &z_old, epsilon)
}

#[derive(Clone, Debug)]
pub struct OneStageOutcome {
    /// Final architecture with coefficients absorbed (all ones).
    pub architecture: Architecture,
    /// Supports with the coefficients fixed at termination.
    pub search_architecture: Architecture,
    /// Trained network with coefficients folded into normalization.
    pub network: Network,
    pub trace: SearchTrace,
    /// Epoch in which the termination test fired.
    pub terminated_at: Option<usize>,
    /// First iteration that ran with the architecture fixed.
    pub terminated_iteration: Option<usize>,
    /// Set when the search budget ran out before termination.
    pub warning: bool,
    pub search_flag: bool,
    /// Test accuracy of the final network.
    pub accuracy: f64,
    pub matrix_seeds: Vec<Vec<u64>>,
}

/// Search and train on the full train split with frozen normalization until
/// the recovered architecture stops moving, then train weights alone and fold
/// the mixing coefficients into normalization.
pub fn one_stage_search(config: &OneStageConfig, observer: Observer<'_>) -> Result<OneStageOutcome> {
    config.validate()?;
    let task = load_task(&config.task)?;
    one_stage_search_on(config, &task, observer)
}

/// [`one_stage_search`] on an already generated task.
pub fn one_stage_search_on(
    config: &OneStageConfig,
    task: &Task,
    observer: Observer<'_>,
) -> Result<OneStageOutcome> {
    config.validate()?;
    let start = Instant::now();
    let spec = &config.model.cell;
    let train = &task.train;
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
    let mut trace = SearchTrace::default();
    let mut terminated_at = None;
    let mut terminated_iteration = None;

    let step_mode = config.recovery == RecoveryFrequency::Step;
    'search: for epoch in 0..config.epochs {
        let bs = batches(train.len(), config.batch_size, &mut rng);
        for (k, rows) in bs.iter().enumerate() {
            let it = state.iteration;
            let z_change = if step_mode && (epoch, k) != (0, 0) {
                let change = state.recover(spec, config.lambda, &config.solver, config.warm_iters)?;
                if converged(&state, config.epsilon)? {
                    terminated_at = Some(epoch);
                    terminated_iteration = Some(it);
                    state.search_flag = false;
                    break 'search;
                }
                change
            } else {
                None
            };
            let mixing = state.mixing();
            let batch = train.gather(rows);
            let req = GradRequest {
                weights: true,
                bn_affine: false,
                arch: true,
            };
            let fwd = net.forward(&mixing, &batch.x, &batch.y, BnMode::Train, req)?;
            let loss = fwd.loss_value();
            if !loss.is_finite() {
                return Err(Error::Divergence { iteration: it });
            }
            let grads = fwd.tape.backward(fwd.loss)?;
            net.commit_bn_stats(&fwd.bn_stats);
            sgd.step(&mut net, &grads, config.weights.lr);
            for (kind, nodes) in state.nodes.iter_mut().enumerate() {
                for (node, ns) in nodes.iter_mut().enumerate() {
                    let key = ParamKey::Arch { kind, node };
                    if let Some(g) = grads.get(&key) {
                        adam.step(key, &mut ns.b, g.as_slice());
                    }
                }
            }
            let record = TraceRecord {
                phase: Phase::Search,
                epoch,
                iteration: it,
                lr: config.weights.lr,
                train_loss: loss,
                val_loss: None,
                val_accuracy: None,
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
        if !step_mode {
            state.recover(spec, config.lambda, &config.solver, config.warm_iters)?;
            if converged(&state, config.epsilon)? {
                terminated_at = Some(epoch);
                terminated_iteration = Some(state.iteration);
                state.search_flag = false;
                break;
            }
        }
    }

    let search_architecture = state.architecture()?;
    let fixed = NodeMixing::from_architecture(&search_architecture);
    net.unfreeze_bn();
    if terminated_at.is_some() && config.post_epochs > 0 {
        let post = TrainConfig {
            epochs: config.post_epochs,
            batch_size: config.batch_size,
            weights: config.weights.clone(),
            cosine: true,
        };
        let supports = state.supports();
        let offset = state.iteration;
        let first_epoch = terminated_at.map_or(0, |e| e + 1);
        let mut on_step = |info: StepInfo<'_>| -> Result<()> {
            let record = TraceRecord {
                phase: Phase::PostSearch,
                epoch: first_epoch + info.epoch,
                iteration: offset + info.step,
                lr: info.lr,
                train_loss: info.loss,
                val_loss: None,
                val_accuracy: None,
                z_change: None,
                supports: supports.clone(),
                active_connections: info.active.to_vec(),
                arch_weights: None,
                search_flag: false,
                bn_frozen: false,
                elapsed_ms: elapsed_ms(start),
            };
            observer(&record)?;
            trace.push(record);
            Ok(())
        };
        train_fixed_observed(&mut net, &fixed, train, &post, &mut rng, &mut on_step)?;
    }
    let architecture = net.absorb(&search_architecture)?;
    let accuracy = net.accuracy(
        &NodeMixing::from_architecture(&architecture),
        &task.test.x,
        &task.test.y,
    )?;
    Ok(OneStageOutcome {
        architecture,
        search_architecture,
        network: net,
        trace,
        terminated_at,
        terminated_iteration,
        warning: terminated_at.is_none(),
        search_flag: state.search_flag,
        accuracy,
        matrix_seeds: state.matrix_seeds(),
    })
}
