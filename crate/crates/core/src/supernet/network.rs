use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{BatchStats, ParamKey, Tape, Var};
use super::{
    Architecture, BatchNormParams, CellSpec, OperationKind, SCALED_IDENTITY_FACTOR,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::measurement::MeasurementMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StemKind {
    /// Input of width `2·width`; the halves feed the two input nodes directly.
    Split,
    /// Two trainable linear maps from the raw input to the input nodes.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub cell: CellSpec,
    pub num_cells: usize,
    /// Cells using the second (reduction) kind of architecture variables.
    /// Empty means a single cell kind.
    pub reduction_cells: Vec<usize>,
    pub input_dim: usize,
    pub classes: usize,
    pub stem: StemKind,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl NetworkConfig {
    pub fn new(cell: CellSpec, input_dim: usize, classes: usize, stem: StemKind) -> Self {
        Self {
            cell,
            num_cells: 1,
            reduction_cells: Vec::new(),
            input_dim,
            classes,
            stem,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn num_kinds(&self) -> usize {
        if self.reduction_cells.is_empty() {
            1
        } else {
            2
        }
    }

    pub fn kind_of(&self, cell: usize) -> usize {
        usize::from(self.reduction_cells.contains(&cell))
    }

    pub fn validate(&self) -> Result<()> {
        self.cell.validate()?;
        let mut problems = Vec::new();
        if self.num_cells == 0 {
            problems.push("num_cells must be positive".to_string());
        }
        if self.classes < 2 {
            problems.push("at least two classes are required".to_string());
        }
        if self.cell.num_input_nodes != 2 {
            problems.push("cells take exactly two input nodes".to_string());
        }
        if let Some(c) = self.reduction_cells.iter().find(|&&c| c >= self.num_cells) {
            problems.push(format!("reduction cell {c} beyond num_cells"));
        }
        if self.stem == StemKind::Split && self.input_dim != 2 * self.cell.width {
            problems.push(format!(
                "split stem needs input_dim = 2·width = {}, got {}",
                2 * self.cell.width,
                self.input_dim
            ));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            problems.push("bn_momentum must lie in (0, 1]".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running estimates are reported for committing.
    Train,
    /// Running statistics.
    Eval,
}

/// Which leaf groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct GradRequest {
    pub weights: bool,
    pub bn_affine: bool,
    pub arch: bool,
}

impl GradRequest {
    pub const NONE: GradRequest = GradRequest {
        weights: false,
        bn_affine: false,
        arch: false,
    };
    pub const ALL: GradRequest = GradRequest {
        weights: true,
        bn_affine: true,
        arch: true,
    };
}

/// How the connections of one intermediate node are weighted.
#[derive(Clone, Debug)]
pub enum NodeMixing {
    /// Constant architecture vector over all candidates: `x = zᵀo`.
    Direct { z: Vec<f64> },
    /// Compressed-space coefficients `bᵀA − zᵀE`; over all candidates when
    /// `support` is `None`, otherwise restricted to the support.
    Compressed {
        b: Vec<f64>,
        z: Vec<f64>,
        matrix: Arc<MeasurementMatrix>,
        support: Option<Vec<usize>>,
    },
    /// Constant coefficients on a support.
    Fixed {
        support: Vec<usize>,
        coefficients: Vec<f64>,
    },
    /// Softmax relaxation over each edge's operations.
    Softmax { alpha: Vec<f64> },
}

impl NodeMixing {
    /// Connections evaluated by this mixing.
    pub fn active(&self, candidates: usize) -> usize {
        match self {
            NodeMixing::Direct { .. }
            | NodeMixing::Softmax { .. }
            | NodeMixing::Compressed { support: None, .. } => candidates,
            NodeMixing::Compressed {
                support: Some(s), ..
            } => s.len(),
            NodeMixing::Fixed { support, .. } => support.len(),
        }
    }

    pub fn from_architecture(arch: &Architecture) -> Vec<Vec<NodeMixing>> {
        arch.kinds
            .iter()
            .map(|k| {
                k.iter()
                    .map(|n| NodeMixing::Fixed {
                        support: n.support.clone(),
                        coefficients: n.coefficients.clone(),
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Param {
    name: String,
    value: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
struct Connection {
    op_weights: Option<(usize, usize)>,
    bn: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct BnSlot {
    gamma: usize,
    beta: usize,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    frozen: bool,
}

/// Super-net parameters: stems, per-cell operation weights, per-connection
/// batch normalization, and the classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Param>,
    stems: Vec<(usize, usize)>,
    cells: Vec<Vec<Vec<Connection>>>,
    head: (usize, usize),
    bns: Vec<BnSlot>,
    weight_ids: Vec<usize>,
}

/// A recorded forward pass.
pub struct Forward {
    pub tape: Tape,
    pub logits: Var,
    pub loss: Var,
    /// Every node of every cell, input nodes first.
    pub nodes: Vec<Vec<Var>>,
    /// Batch statistics of each normalization evaluated in training mode.
    pub bn_stats: Vec<(usize, BatchStats)>,
    /// Connections evaluated per cell and intermediate node.
    pub active: Vec<Vec<usize>>,
}

impl Forward {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).as_slice()[0]
    }

    pub fn logits_value(&self) -> &Matrix {
        self.tape.value(self.logits)
    }
}

struct Ctx<'a> {
    tape: Tape,
    mode: BnMode,
    req: GradRequest,
    stats: Vec<(usize, BatchStats)>,
    leaves: HashMap<ParamKey, Var>,
    coeffs: HashMap<(usize, usize), Var>,
    mixing: &'a [Vec<NodeMixing>],
}

impl Network {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = config.cell.width;
        let mut params = Vec::new();
        let mut weight_ids = Vec::new();
        let push = |params: &mut Vec<Param>, name: String, value: Matrix| {
            params.push(Param { name, value });
            params.len() - 1
        };
        let mut gaussian = |rows: usize, cols: usize, fan_in: usize| {
            let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
            let mut m = Matrix::zeros(rows, cols);
            for v in m.as_mut_slice() {
                *v = dist.sample(&mut rng);
            }
            m
        };

        let mut stems = Vec::new();
        if config.stem == StemKind::Linear {
            for s in 0..2 {
                let w = push(
                    &mut params,
                    format!("stem{s}.weight"),
                    gaussian(config.input_dim, width, config.input_dim),
                );
                let b = push(&mut params, format!("stem{s}.bias"), Matrix::zeros(1, width));
                weight_ids.extend([w, b]);
                stems.push((w, b));
            }
        }

        let mut bns = Vec::new();
        let mut cells = Vec::with_capacity(config.num_cells);
        for c in 0..config.num_cells {
            let mut nodes = Vec::new();
            for j in 0..config.cell.intermediate() {
                let mut conns = Vec::new();
                for i in 0..config.cell.candidates(j) {
                    let (_, op) = config.cell.connection(i);
                    let prefix = format!("cell{c}.node{j}.cand{i}");
                    let op_weights = if op.is_parametric() {
                        let w = push(
                            &mut params,
                            format!("{prefix}.weight"),
                            gaussian(width, width, width),
                        );
                        let b = push(&mut params, format!("{prefix}.bias"), Matrix::zeros(1, width));
                        weight_ids.extend([w, b]);
                        Some((w, b))
                    } else {
                        None
                    };
                    let gamma = push(&mut params, format!("{prefix}.bn.gamma"), Matrix::filled(1, width, 1.0));
                    let beta = push(&mut params, format!("{prefix}.bn.beta"), Matrix::zeros(1, width));
                    bns.push(BnSlot {
                        gamma,
                        beta,
                        running_mean: vec![0.0; width],
                        running_var: vec![1.0; width],
                        frozen: false,
                    });
                    conns.push(Connection {
                        op_weights,
                        bn: bns.len() - 1,
                    });
                }
                nodes.push(conns);
            }
            cells.push(nodes);
        }

        let hw = push(
            &mut params,
            "head.weight".into(),
            gaussian(width, config.classes, width),
        );
        let hb = push(&mut params, "head.bias".into(), Matrix::zeros(1, config.classes));
        weight_ids.extend([hw, hb]);

        Ok(Self {
            config,
            params,
            stems,
            cells,
            head: (hw, hb),
            bns,
            weight_ids,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn param(&self, key: ParamKey) -> Option<&Matrix> {
        match key {
            ParamKey::Net(i) => self.params.get(i).map(|p| &p.value),
            ParamKey::Arch { .. } => None,
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Matrix> {
        match key {
            ParamKey::Net(i) => self.params.get_mut(i).map(|p| &mut p.value),
            ParamKey::Arch { .. } => None,
        }
    }

    pub fn param_name(&self, key: ParamKey) -> Option<&str> {
        match key {
            ParamKey::Net(i) => self.params.get(i).map(|p| p.name.as_str()),
            ParamKey::Arch { .. } => None,
        }
    }

    /// Keys of stem, operation, and head weights.
    pub fn weight_keys(&self) -> Vec<ParamKey> {
        self.weight_ids.iter().map(|&i| ParamKey::Net(i)).collect()
    }

    /// Keys of operation weights belonging to one connection (empty for
    /// non-parametric operations).
    pub fn connection_weight_keys(&self, cell: usize, node: usize, cand: usize) -> Vec<ParamKey> {
        match self.cells[cell][node][cand].op_weights {
            Some((w, b)) => vec![ParamKey::Net(w), ParamKey::Net(b)],
            None => Vec::new(),
        }
    }

    pub fn bn_slot(&self, cell: usize, node: usize, cand: usize) -> usize {
        self.cells[cell][node][cand].bn
    }

    pub fn bn_count(&self) -> usize {
        self.bns.len()
    }

    pub fn bn_keys(&self, slot: usize) -> (ParamKey, ParamKey) {
        let s = &self.bns[slot];
        (ParamKey::Net(s.gamma), ParamKey::Net(s.beta))
    }

    pub fn bn_params(&self, slot: usize) -> BatchNormParams {
        let s = &self.bns[slot];
        BatchNormParams {
            gamma: self.params[s.gamma].value.as_slice().to_vec(),
            beta: self.params[s.beta].value.as_slice().to_vec(),
            running_mean: s.running_mean.clone(),
            running_var: s.running_var.clone(),
            frozen: s.frozen,
        }
    }

    pub fn set_bn_params(&mut self, slot: usize, bn: &BatchNormParams) -> Result<()> {
        let width = self.config.cell.width;
        if [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
            .iter()
            .any(|v| v.len() != width)
        {
            return Err(Error::Dimension(format!(
                "batch normalization vectors must have width {width}"
            )));
        }
        let s = &mut self.bns[slot];
        s.running_mean = bn.running_mean.clone();
        s.running_var = bn.running_var.clone();
        s.frozen = bn.frozen;
        let (g, b) = (s.gamma, s.beta);
        self.params[g].value = Matrix::row_vector(&bn.gamma);
        self.params[b].value = Matrix::row_vector(&bn.beta);
        Ok(())
    }

    pub fn freeze_bn(&mut self) {
        for slot in 0..self.bns.len() {
            let mut p = self.bn_params(slot);
            p.freeze();
            self.set_bn_params(slot, &p).expect("own width");
        }
    }

    pub fn unfreeze_bn(&mut self) {
        self.bns.iter_mut().for_each(|s| s.frozen = false);
    }

    pub fn bn_frozen(&self, slot: usize) -> bool {
        self.bns[slot].frozen
    }

    /// Fold each active connection's coefficient into its normalization and
    /// return the architecture with unit coefficients.
    pub fn absorb(&mut self, arch: &Architecture) -> Result<Architecture> {
        arch.validate(&self.config.cell, self.config.num_kinds())?;
        for c in 0..self.config.num_cells {
            let kind = self.config.kind_of(c);
            for (j, node) in arch.kinds[kind].iter().enumerate() {
                for (&cand, &coef) in node.support.iter().zip(&node.coefficients) {
                    let slot = self.bn_slot(c, j, cand);
                    let absorbed = self.bn_params(slot).absorb(coef)?;
                    self.set_bn_params(slot, &absorbed)?;
                }
            }
        }
        Ok(arch.with_unit_coefficients())
    }

    /// Blend running statistics with the batch statistics of a training-mode
    /// forward pass.
    pub fn commit_bn_stats(&mut self, stats: &[(usize, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (slot, st) in stats {
            let s = &mut self.bns[*slot];
            for (r, b) in s.running_mean.iter_mut().zip(&st.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in s.running_var.iter_mut().zip(&st.var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }

    /// Named tensors for checkpointing, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out: Vec<(String, Matrix)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for (i, s) in self.bns.iter().enumerate() {
            out.push((format!("bn{i}.running_mean"), Matrix::row_vector(&s.running_mean)));
            out.push((format!("bn{i}.running_var"), Matrix::row_vector(&s.running_var)));
            out.push((
                format!("bn{i}.frozen"),
                Matrix::filled(1, 1, if s.frozen { 1.0 } else { 0.0 }),
            ));
        }
        out
    }

    /// Inverse of [`Network::named_tensors`]; every tensor must be present
    /// with its original shape.
    pub fn load_named_tensors(&mut self, tensors: &[(String, Matrix)]) -> Result<()> {
        let map: HashMap<&str, &Matrix> = tensors.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let fetch = |name: &str, shape: (usize, usize)| -> Result<Matrix> {
            let m = map.get(name).ok_or_else(|| Error::Schema {
                field: name.to_string(),
                message: "missing from checkpoint".into(),
            })?;
            if m.shape() != shape {
                return Err(Error::Schema {
                    field: name.to_string(),
                    message: format!("shape {:?}, expected {:?}", m.shape(), shape),
                });
            }
            Ok((*m).clone())
        };
        let mut params = self.params.clone();
        for p in &mut params {
            p.value = fetch(&p.name, p.value.shape())?;
        }
        let mut bns = self.bns.clone();
        let w = self.config.cell.width;
        for (i, s) in bns.iter_mut().enumerate() {
            s.running_mean = fetch(&format!("bn{i}.running_mean"), (1, w))?.into_vec();
            s.running_var = fetch(&format!("bn{i}.running_var"), (1, w))?.into_vec();
            s.frozen = fetch(&format!("bn{i}.frozen"), (1, 1))?.as_slice()[0] != 0.0;
        }
        self.params = params;
        self.bns = bns;
        Ok(())
    }

    fn check_mixing(&self, mixing: &[Vec<NodeMixing>]) -> Result<()> {
        let spec = &self.config.cell;
        if mixing.len() != self.config.num_kinds() {
            return Err(Error::Dimension(format!(
                "{} mixing kinds for {} cell kinds",
                mixing.len(),
                self.config.num_kinds()
            )));
        }
        for nodes in mixing {
            if nodes.len() != spec.intermediate() {
                return Err(Error::Dimension(format!(
                    "{} node mixings for {} intermediate nodes",
                    nodes.len(),
                    spec.intermediate()
                )));
            }
            for (j, mix) in nodes.iter().enumerate() {
                let n = spec.candidates(j);
                let check_support = |s: &[usize]| -> Result<()> {
                    match s.iter().find(|&&i| i >= n) {
                        Some(&index) => Err(Error::IndexOutOfRange { index, len: n }),
                        None => Ok(()),
                    }
                };
                match mix {
                    NodeMixing::Direct { z } if z.len() != n => {
                        return Err(Error::Dimension(format!("node {j}: z length {}", z.len())))
                    }
                    NodeMixing::Compressed {
                        b,
                        z,
                        matrix,
                        support,
                    } => {
                        if matrix.n() != n || z.len() != n || b.len() != matrix.m() {
                            return Err(Error::Dimension(format!(
                                "node {j}: compressed mixing shapes do not match {n} candidates"
                            )));
                        }
                        if let Some(s) = support {
                            check_support(s)?;
                        }
                    }
                    NodeMixing::Fixed {
                        support,
                        coefficients,
                    } => {
                        check_support(support)?;
                        if support.len() != coefficients.len() {
                            return Err(Error::Dimension(format!(
                                "node {j}: {} coefficients for {} connections",
                                coefficients.len(),
                                support.len()
                            )));
                        }
                    }
                    NodeMixing::Softmax { alpha } if alpha.len() != n => {
                        return Err(Error::Dimension(format!(
                            "node {j}: alpha length {}",
                            alpha.len()
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Run the network on a batch and record the computation.
    pub fn forward(
        &self,
        mixing: &[Vec<NodeMixing>],
        x: &Matrix,
        labels: &[usize],
        mode: BnMode,
        req: GradRequest,
    ) -> Result<Forward> {
        if x.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if x.cols() != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "input width {}, expected {}",
                x.cols(),
                self.config.input_dim
            )));
        }
        self.check_mixing(mixing)?;
        let mut ctx = Ctx {
            tape: Tape::new(),
            mode,
            req,
            stats: Vec::new(),
            leaves: HashMap::new(),
            coeffs: HashMap::new(),
            mixing,
        };

        let width = self.config.cell.width;
        let (s0, s1) = match self.config.stem {
            StemKind::Split => {
                let mut left = Matrix::zeros(x.rows(), width);
                let mut right = Matrix::zeros(x.rows(), width);
                for i in 0..x.rows() {
                    left.row_mut(i).copy_from_slice(&x.row(i)[..width]);
                    right.row_mut(i).copy_from_slice(&x.row(i)[width..]);
                }
                (ctx.tape.constant(left), ctx.tape.constant(right))
            }
            StemKind::Linear => {
                let input = ctx.tape.constant(x.clone());
                let mut outs = Vec::new();
                for &(w, b) in &self.stems {
                    let wv = self.weight_leaf(&mut ctx, w);
                    let bv = self.weight_leaf(&mut ctx, b);
                    let h = ctx.tape.matmul(input, wv);
                    outs.push(ctx.tape.add_row(h, bv));
                }
                (outs[0], outs[1])
            }
        };

        let mut prev_prev = s0;
        let mut prev = s1;
        let mut all_nodes = Vec::with_capacity(self.config.num_cells);
        let mut active = Vec::with_capacity(self.config.num_cells);
        for c in 0..self.config.num_cells {
            let kind = self.config.kind_of(c);
            let mut nodes = vec![prev_prev, prev];
            let mut counts = Vec::new();
            for j in 0..self.config.cell.intermediate() {
                let (node, count) = self.emit_node(&mut ctx, c, kind, j, &nodes)?;
                nodes.push(node);
                counts.push(count);
            }
            let out = ctx.tape.sum(&nodes[self.config.cell.num_input_nodes..]);
            prev_prev = prev;
            prev = out;
            all_nodes.push(nodes);
            active.push(counts);
        }

        let hw = self.weight_leaf(&mut ctx, self.head.0);
        let hb = self.weight_leaf(&mut ctx, self.head.1);
        let h = ctx.tape.matmul(prev, hw);
        let logits = ctx.tape.add_row(h, hb);
        let loss = ctx.tape.softmax_cross_entropy(logits, labels)?;
        Ok(Forward {
            tape: ctx.tape,
            logits,
            loss,
            nodes: all_nodes,
            bn_stats: ctx.stats,
            active,
        })
    }

    /// Evaluate one intermediate node from explicit input features.
    pub fn node_output(
        &self,
        cell: usize,
        node: usize,
        inputs: &[Matrix],
        support: &[usize],
        coefficients: &[f64],
        mode: BnMode,
    ) -> Result<Matrix> {
        let spec = &self.config.cell;
        if inputs.len() != spec.num_input_nodes + node {
            return Err(Error::Dimension(format!(
                "node {node} needs {} inputs, got {}",
                spec.num_input_nodes + node,
                inputs.len()
            )));
        }
        if let Some(bad) = inputs
            .iter()
            .find(|m| m.cols() != spec.width || m.rows() != inputs[0].rows())
        {
            return Err(Error::Dimension(format!(
                "input of shape {:?}, expected width {}",
                bad.shape(),
                spec.width
            )));
        }
        let mut nodes_mix: Vec<Vec<NodeMixing>> = (0..self.config.num_kinds())
            .map(|_| {
                (0..spec.intermediate())
                    .map(|_| NodeMixing::Fixed {
                        support: Vec::new(),
                        coefficients: Vec::new(),
                    })
                    .collect()
            })
            .collect();
        let kind = self.config.kind_of(cell);
        nodes_mix[kind][node] = NodeMixing::Fixed {
            support: support.to_vec(),
            coefficients: coefficients.to_vec(),
        };
        self.check_mixing(&nodes_mix)?;
        let mut ctx = Ctx {
            tape: Tape::new(),
            mode,
            req: GradRequest::NONE,
            stats: Vec::new(),
            leaves: HashMap::new(),
            coeffs: HashMap::new(),
            mixing: &nodes_mix,
        };
        let vars: Vec<Var> = inputs.iter().map(|m| ctx.tape.constant(m.clone())).collect();
        let (out, _) = self.emit_node(&mut ctx, cell, kind, node, &vars)?;
        Ok(ctx.tape.value(out).clone())
    }

    fn weight_leaf(&self, ctx: &mut Ctx<'_>, id: usize) -> Var {
        let key = ParamKey::Net(id);
        if let Some(v) = ctx.leaves.get(&key) {
            return *v;
        }
        let v = ctx
            .tape
            .param(key, self.params[id].value.clone(), ctx.req.weights);
        ctx.leaves.insert(key, v);
        v
    }

    fn bn_leaf(&self, ctx: &mut Ctx<'_>, id: usize) -> Var {
        let key = ParamKey::Net(id);
        if let Some(v) = ctx.leaves.get(&key) {
            return *v;
        }
        let v = ctx
            .tape
            .param(key, self.params[id].value.clone(), ctx.req.bn_affine);
        ctx.leaves.insert(key, v);
        v
    }

    /// Coefficient row for a node, shared by every cell of the same kind.
    fn coefficient_row(&self, ctx: &mut Ctx<'_>, kind: usize, node: usize) -> Var {
        if let Some(v) = ctx.coeffs.get(&(kind, node)) {
            return *v;
        }
        let v = match &ctx.mixing[kind][node] {
            NodeMixing::Direct { z } => ctx.tape.constant(Matrix::row_vector(z)),
            NodeMixing::Fixed { coefficients, .. } => {
                ctx.tape.constant(Matrix::row_vector(coefficients))
            }
            NodeMixing::Compressed {
                b,
                z,
                matrix,
                support,
            } => {
                let cols: Vec<usize> = match support {
                    Some(s) => s.clone(),
                    None => (0..matrix.n()).collect(),
                };
                let a_cols = matrix.a().select_columns(&cols);
                let correction: Vec<f64> = cols
                    .iter()
                    .map(|&k| cols.iter().map(|&i| z[i] * matrix.e()[(i, k)]).sum())
                    .collect();
                let b_leaf = ctx.tape.param(
                    ParamKey::Arch { kind, node },
                    Matrix::row_vector(b),
                    ctx.req.arch,
                );
                let a_var = ctx.tape.constant(a_cols);
                let bta = ctx.tape.matmul(b_leaf, a_var);
                let corr = ctx.tape.constant(Matrix::row_vector(&correction));
                ctx.tape.sub(bta, corr)
            }
            NodeMixing::Softmax { alpha } => {
                let leaf = ctx.tape.param(
                    ParamKey::Arch { kind, node },
                    Matrix::row_vector(alpha),
                    ctx.req.arch,
                );
                ctx.tape.segment_softmax(leaf, self.config.cell.k())
            }
        };
        ctx.coeffs.insert((kind, node), v);
        v
    }

    fn emit_node(
        &self,
        ctx: &mut Ctx<'_>,
        cell: usize,
        kind: usize,
        node: usize,
        inputs: &[Var],
    ) -> Result<(Var, usize)> {
        let n = self.config.cell.candidates(node);
        let active: Vec<usize> = match &ctx.mixing[kind][node] {
            NodeMixing::Fixed { support, .. } => support.clone(),
            NodeMixing::Compressed {
                support: Some(s), ..
            } => s.clone(),
            _ => (0..n).collect(),
        };
        let coeffs = self.coefficient_row(ctx, kind, node);
        let mut terms = Vec::with_capacity(active.len());
        for (slot, &cand) in active.iter().enumerate() {
            let (src, _) = self.config.cell.connection(cand);
            let out = self.emit_connection(ctx, cell, node, cand, inputs[src]);
            terms.push(ctx.tape.scale_by_entry(out, coeffs, slot));
        }
        let value = if terms.is_empty() {
            let rows = ctx.tape.value(inputs[0]).rows();
            ctx.tape
                .constant(Matrix::zeros(rows, self.config.cell.width))
        } else {
            ctx.tape.sum(&terms)
        };
        Ok((value, active.len()))
    }

    fn emit_connection(
        &self,
        ctx: &mut Ctx<'_>,
        cell: usize,
        node: usize,
        cand: usize,
        input: Var,
    ) -> Var {
        let conn = &self.cells[cell][node][cand];
        let (_, op) = self.config.cell.connection(cand);
        let raw = match op {
            OperationKind::Identity => input,
            OperationKind::ScaledIdentity => ctx.tape.scale(input, SCALED_IDENTITY_FACTOR),
            OperationKind::PoolAvg => ctx.tape.avg_pool3(input),
            OperationKind::PoolMax => ctx.tape.max_pool3(input),
            OperationKind::Tanh => ctx.tape.tanh(input),
            OperationKind::LinearA | OperationKind::LinearB => {
                let (w, b) = conn.op_weights.expect("parametric op has weights");
                let wv = self.weight_leaf(ctx, w);
                let bv = self.weight_leaf(ctx, b);
                let h = ctx.tape.matmul(input, wv);
                ctx.tape.add_row(h, bv)
            }
        };
        let slot = &self.bns[conn.bn];
        let normalized = match ctx.mode {
            BnMode::Train => {
                let (v, stats) = ctx.tape.batch_norm(raw, self.config.bn_eps);
                ctx.stats.push((conn.bn, stats));
                v
            }
            BnMode::Eval => {
                let inv: Vec<f64> = slot
                    .running_var
                    .iter()
                    .map(|v| 1.0 / (v + self.config.bn_eps).sqrt())
                    .collect();
                let shift: Vec<f64> = slot
                    .running_mean
                    .iter()
                    .zip(&inv)
                    .map(|(m, i)| -m * i)
                    .collect();
                let sv = ctx.tape.constant(Matrix::row_vector(&inv));
                let bv = ctx.tape.constant(Matrix::row_vector(&shift));
                ctx.tape.col_affine(raw, sv, bv)
            }
        };
        if slot.frozen {
            normalized
        } else {
            let g = self.bn_leaf(ctx, slot.gamma);
            let b = self.bn_leaf(ctx, slot.beta);
            ctx.tape.col_affine(normalized, g, b)
        }
    }

    /// Logits in evaluation mode.
    pub fn predict(&self, mixing: &[Vec<NodeMixing>], x: &Matrix) -> Result<Matrix> {
        let labels = vec![0; x.rows()];
        let fwd = self.forward(mixing, x, &labels, BnMode::Eval, GradRequest::NONE)?;
        Ok(fwd.logits_value().clone())
    }

    /// Fraction of rows whose argmax logit equals the label, in evaluation mode.
    pub fn accuracy(&self, mixing: &[Vec<NodeMixing>], x: &Matrix, labels: &[usize]) -> Result<f64> {
        let fwd = self.forward(mixing, x, labels, BnMode::Eval, GradRequest::NONE)?;
        let pred = fwd.logits_value().argmax_rows();
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Mean loss in evaluation mode.
    pub fn eval_loss(&self, mixing: &[Vec<NodeMixing>], x: &Matrix, labels: &[usize]) -> Result<f64> {
        let fwd = self.forward(mixing, x, labels, BnMode::Eval, GradRequest::NONE)?;
        Ok(fwd.loss_value())
    }
}
