//! Search drivers: two-stage and one-stage sparse-coding search, and a
//! softmax-relaxation baseline.

mod darts;
mod one_stage;
mod optim;
mod recovery;
mod train;
mod two_stage;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use darts::{darts_baseline_search, darts_baseline_search_on};
pub use one_stage::{one_stage_search, one_stage_search_on, termination_check, OneStageOutcome};
pub use optim::{cosine_lr, Adam, Sgd};
pub use recovery::{recover_architecture, recover_node, NodeRecovery, RecoveryInput};
pub use train::{batches, train_architecture, train_fixed};
pub use two_stage::{two_stage_search, two_stage_search_on};

use crate::error::{Error, Result};
use crate::eval_bench::{Task, TaskConfig, TaskKind};
use crate::measurement::{compressed_dim, sample_matrix, CompressionPolicy, MeasurementMatrix};
use crate::sparse_coding::SolverConfig;
use crate::supernet::{
    Architecture, CellSpec, NetworkConfig, NodeChoice, NodeMixing, OperationKind, StemKind,
};

/// Momentum gradient descent settings for network weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 3e-4,
        }
    }
}

/// Adaptive moment settings for architecture variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 6e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryFrequency {
    Epoch,
    Step,
}

/// Super-net shape shared by every driver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cell: CellSpec,
    pub num_cells: usize,
    pub reduction_cells: Vec<usize>,
    pub stem: StemKind,
    pub compression: CompressionPolicy,
}

impl ModelConfig {
    /// One cell with a single intermediate node over identity, average
    /// pooling, and max pooling: six candidates, two kept.
    pub fn micro(width: usize) -> Self {
        Self {
            cell: CellSpec {
                num_nodes: 3,
                num_input_nodes: 2,
                ops: vec![
                    OperationKind::Identity,
                    OperationKind::PoolAvg,
                    OperationKind::PoolMax,
                ],
                sparseness: vec![2],
                width,
            },
            num_cells: 1,
            reduction_cells: Vec::new(),
            stem: StemKind::Split,
            compression: CompressionPolicy::Default,
        }
    }

    pub fn network_config(&self, input_dim: usize, classes: usize) -> NetworkConfig {
        let mut cfg = NetworkConfig::new(self.cell.clone(), input_dim, classes, self.stem);
        cfg.num_cells = self.num_cells;
        cfg.reduction_cells = self.reduction_cells.clone();
        cfg
    }

    pub fn num_kinds(&self) -> usize {
        if self.reduction_cells.is_empty() {
            1
        } else {
            2
        }
    }
}

/// Settings for training a fixed architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: SgdConfig,
    pub cosine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            weights: SgdConfig::default(),
            cosine: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: SgdConfig,
    pub arch: AdamConfig,
    pub lambda: f64,
    pub solver: SolverConfig,
    /// Iteration cap of warm-started recoveries after the first.
    pub warm_iters: usize,
    pub recovery: RecoveryFrequency,
    /// Standard deviation of the initial compressed architecture variables.
    pub b_init_scale: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            weights: SgdConfig::default(),
            arch: AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            lambda: 1e-5,
            solver: SolverConfig::default(),
            warm_iters: 500,
            recovery: RecoveryFrequency::Step,
            b_init_scale: 1.0,
            train_fraction: 0.5,
            val_fraction: 0.5,
            seed: 0,
            task: TaskConfig::new(TaskKind::PlantedLinear, 4000, 2, 18, 0),
            model: ModelConfig::micro(9),
        }
    }
}

impl TwoStageConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        common_checks(
            &mut problems,
            self.batch_size,
            &self.weights,
            &self.arch,
            self.lambda,
            self.warm_iters,
            self.b_init_scale,
        );
        if !(self.train_fraction > 0.0 && self.val_fraction > 0.0)
            || (self.train_fraction + self.val_fraction - 1.0).abs() > 1e-12
        {
            problems.push("train and val fractions must be positive and sum to 1".into());
        }
        nested_checks(&mut problems, &self.solver, &self.task, &self.model);
        finish(problems)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneStageConfig {
    /// Upper bound on search epochs.
    pub epochs: usize,
    /// Weight-training epochs after termination, with cosine decay.
    pub post_epochs: usize,
    pub batch_size: usize,
    pub weights: SgdConfig,
    pub arch: AdamConfig,
    pub lambda: f64,
    pub solver: SolverConfig,
    pub warm_iters: usize,
    pub recovery: RecoveryFrequency,
    pub b_init_scale: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
}

impl Default for OneStageConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            post_epochs: 10,
            batch_size: 32,
            weights: SgdConfig::default(),
            arch: AdamConfig::default(),
            lambda: 1e-5,
            solver: SolverConfig::default(),
            warm_iters: 500,
            recovery: RecoveryFrequency::Step,
            b_init_scale: 1.0,
            epsilon: 1e-3,
            seed: 0,
            task: TaskConfig::new(TaskKind::PlantedLinear, 400, 2, 18, 0),
            model: ModelConfig::micro(9),
        }
    }
}

impl OneStageConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        common_checks(
            &mut problems,
            self.batch_size,
            &self.weights,
            &self.arch,
            self.lambda,
            self.warm_iters,
            self.b_init_scale,
        );
        if !(self.epsilon > 0.0) {
            problems.push("epsilon must be positive".into());
        }
        nested_checks(&mut problems, &self.solver, &self.task, &self.model);
        finish(problems)
    }
}

fn common_checks(
    problems: &mut Vec<String>,
    batch_size: usize,
    weights: &SgdConfig,
    arch: &AdamConfig,
    lambda: f64,
    warm_iters: usize,
    b_init_scale: f64,
) {
    if batch_size < 2 {
        problems.push("batch_size must be at least 2".into());
    }
    if !(weights.lr > 0.0) {
        problems.push("weights.lr must be positive".into());
    }
    if !(0.0..1.0).contains(&weights.momentum) {
        problems.push("weights.momentum must lie in [0, 1)".into());
    }
    if !(weights.weight_decay >= 0.0) {
        problems.push("weights.weight_decay must be non-negative".into());
    }
    if !(arch.lr > 0.0) {
        problems.push("arch.lr must be positive".into());
    }
    if !(0.0..1.0).contains(&arch.beta1) || !(0.0..1.0).contains(&arch.beta2) {
        problems.push("arch betas must lie in [0, 1)".into());
    }
    if !(arch.weight_decay >= 0.0) {
        problems.push("arch.weight_decay must be non-negative".into());
    }
    if !(lambda > 0.0) {
        problems.push("lambda must be positive".into());
    }
    if warm_iters == 0 {
        problems.push("warm_iters must be positive".into());
    }
    if !(b_init_scale > 0.0) {
        problems.push("b_init_scale must be positive".into());
    }
}

fn nested_checks(
    problems: &mut Vec<String>,
    solver: &SolverConfig,
    task: &TaskConfig,
    model: &ModelConfig,
) {
    if let Err(e) = solver.validate() {
        problems.push(e.to_string());
    }
    for r in [task.validate(), model.cell.validate()] {
        match r {
            Err(Error::Config(list)) => problems.extend(list),
            Err(e) => problems.push(e.to_string()),
            Ok(()) => {}
        }
    }
}

fn finish(problems: Vec<String>) -> Result<()> {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Search,
    PostSearch,
    Baseline,
}

/// One optimizer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    /// `‖z_new − z_old‖₂` per cell kind and node when a recovery ran in this
    /// iteration and had a predecessor.
    pub z_change: Option<Vec<Vec<f64>>>,
    /// Support per cell kind and node.
    pub supports: Vec<Vec<Vec<usize>>>,
    /// Connections evaluated per cell and node during propagation.
    pub active_connections: Vec<Vec<usize>>,
    /// Relaxed operation weights per cell kind and node (baseline only).
    pub arch_weights: Option<Vec<Vec<Vec<f64>>>>,
    pub search_flag: bool,
    pub bn_frozen: bool,
    /// Wall-clock milliseconds since the driver started. Excluded from
    /// determinism guarantees.
    pub elapsed_ms: f64,
}

/// Append-only list of iteration records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub records: Vec<TraceRecord>,
}

impl SearchTrace {
    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Receives every trace record as soon as it is produced.
pub type Observer<'a> = &'a mut dyn FnMut(&TraceRecord) -> Result<()>;

/// Per-node state of a sparse-coding search.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub b: Vec<f64>,
    /// Last unprojected recovery.
    pub z: Vec<f64>,
    /// Previous unprojected recovery.
    pub z_old: Option<Vec<f64>>,
    /// Top-s projection of `z`, completed on the support.
    pub z_projected: Vec<f64>,
    pub support: Vec<usize>,
}

/// Search state indexed by cell kind, then intermediate node.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchState {
    pub nodes: Vec<Vec<NodeState>>,
    pub matrices: Vec<Vec<Arc<MeasurementMatrix>>>,
    pub iteration: usize,
    pub search_flag: bool,
    /// Recoveries so far; the first one runs the full solver schedule.
    recoveries: usize,
}

impl SearchState {
    /// Sample one measurement matrix per node and draw the initial `b`.
    pub fn init(model: &ModelConfig, seed: u64, b_init_scale: f64) -> Result<Self> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5_eedb);
        let spec = &model.cell;
        let mut matrices = Vec::new();
        let mut nodes = Vec::new();
        for kind in 0..model.num_kinds() {
            let mut km = Vec::new();
            let mut kn = Vec::new();
            for j in 0..spec.intermediate() {
                let n = spec.candidates(j);
                let m = compressed_dim(n, spec.sparseness[j], model.compression)?;
                let mat = sample_matrix(m, n, matrix_seed(seed, kind, j))?;
                let b: Vec<f64> = (0..m)
                    .map(|_| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        b_init_scale * g
                    })
                    .collect();
                km.push(Arc::new(mat));
                kn.push(NodeState {
                    b,
                    z: vec![0.0; n],
                    z_old: None,
                    z_projected: vec![0.0; n],
                    support: Vec::new(),
                });
            }
            matrices.push(km);
            nodes.push(kn);
        }
        Ok(Self {
            nodes,
            matrices,
            iteration: 0,
            search_flag: true,
            recoveries: 0,
        })
    }

    /// Solve every node's recovery problem and refresh supports. Returns the
    /// per-node change of `z` when a previous recovery exists.
    pub fn recover(
        &mut self,
        spec: &CellSpec,
        lambda: f64,
        solver: &SolverConfig,
        warm_iters: usize,
    ) -> Result<Option<Vec<Vec<f64>>>> {
        let warm_solver = SolverConfig {
            max_iters: warm_iters,
            continuation: None,
            ..solver.clone()
        };
        let first = self.recoveries == 0;
        let solver = if first { solver } else { &warm_solver };
        let mut inputs = Vec::new();
        for (kind, nodes) in self.nodes.iter().enumerate() {
            for (j, node) in nodes.iter().enumerate() {
                inputs.push(RecoveryInput {
                    b: &node.b,
                    matrix: &self.matrices[kind][j],
                    s: spec.sparseness[j],
                    warm: if first { None } else { Some(&node.z) },
                });
            }
        }
        let results = recover_architecture(&inputs, lambda, solver)?;
        let mut results = results.into_iter();
        let mut changes = Vec::new();
        for nodes in self.nodes.iter_mut() {
            let mut kc = Vec::new();
            for node in nodes.iter_mut() {
                let r = results.next().expect("one result per node");
                if !first {
                    kc.push(crate::linalg::distance2(&r.z, &node.z));
                }
                let old = std::mem::replace(&mut node.z, r.z);
                node.z_old = if first { None } else { Some(old) };
                node.z_projected = r.projected;
                node.support = r.support;
            }
            changes.push(kc);
        }
        self.recoveries += 1;
        Ok(if first { None } else { Some(changes) })
    }

    pub fn supports(&self) -> Vec<Vec<Vec<usize>>> {
        self.nodes
            .iter()
            .map(|k| k.iter().map(|n| n.support.clone()).collect())
            .collect()
    }

    /// Support-restricted compressed mixing for every node.
    pub fn mixing(&self) -> Vec<Vec<NodeMixing>> {
        self.nodes
            .iter()
            .zip(&self.matrices)
            .map(|(nodes, mats)| {
                nodes
                    .iter()
                    .zip(mats)
                    .map(|(n, m)| NodeMixing::Compressed {
                        b: n.b.clone(),
                        z: n.z_projected.clone(),
                        matrix: Arc::clone(m),
                        support: Some(n.support.clone()),
                    })
                    .collect()
            })
            .collect()
    }

    /// The current supports with their restricted mixing coefficients.
    pub fn architecture(&self) -> Result<Architecture> {
        let mut kinds = Vec::new();
        for (nodes, mats) in self.nodes.iter().zip(&self.matrices) {
            let mut k = Vec::new();
            for (n, m) in nodes.iter().zip(mats) {
                let coefficients =
                    crate::supernet::mixing_coefficients(&n.b, m, &n.z_projected, &n.support)?;
                k.push(NodeChoice {
                    support: n.support.clone(),
                    coefficients,
                });
            }
            kinds.push(k);
        }
        Ok(Architecture { kinds })
    }

    pub fn matrix_seeds(&self) -> Vec<Vec<u64>> {
        self.matrices
            .iter()
            .map(|k| k.iter().map(|m| m.seed()).collect())
            .collect()
    }
}

/// Seed of the measurement matrix of one node, derived from the run seed.
pub fn matrix_seed(seed: u64, kind: usize, node: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(((kind as u64) << 32) | node as u64)
}

/// Result of a search driver.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub architecture: Architecture,
    pub trace: SearchTrace,
    pub network: crate::supernet::Network,
    /// Accuracy of the super-net on the validation half at the end of search.
    pub val_accuracy: f64,
    pub matrix_seeds: Vec<Vec<u64>>,
}

pub(crate) fn elapsed_ms(start: std::time::Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

pub(crate) fn load_task(config: &TaskConfig) -> Result<Task> {
    crate::eval_bench::make_task(config)
}
