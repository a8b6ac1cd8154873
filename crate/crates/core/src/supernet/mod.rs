//! The cell super-net: candidate operations, compressed-space mixing, per
//! connection batch normalization, and coefficient absorption.
//!
//! An intermediate node `j` of a cell (0-based, counting input nodes) draws
//! from `j·K` candidate connections. Candidate `i` applies operation
//! `i mod K` to node `i div K`, followed by its own batch normalization.

mod network;
pub mod tape;

pub use network::{BnMode, Forward, GradRequest, Network, NetworkConfig, NodeMixing, StemKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::measurement::MeasurementMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperationKind {
    Identity,
    ScaledIdentity,
    PoolAvg,
    PoolMax,
    LinearA,
    LinearB,
    Tanh,
}

impl OperationKind {
    pub const ALL: [OperationKind; 7] = [
        OperationKind::Identity,
        OperationKind::ScaledIdentity,
        OperationKind::LinearA,
        OperationKind::LinearB,
        OperationKind::Tanh,
        OperationKind::PoolAvg,
        OperationKind::PoolMax,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            OperationKind::Identity => "identity",
            OperationKind::ScaledIdentity => "scaled-identity",
            OperationKind::PoolAvg => "pool-avg",
            OperationKind::PoolMax => "pool-max",
            OperationKind::LinearA => "linear-a",
            OperationKind::LinearB => "linear-b",
            OperationKind::Tanh => "tanh",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.tag() == tag)
    }

    pub fn is_parametric(self) -> bool {
        matches!(self, OperationKind::LinearA | OperationKind::LinearB)
    }
}

/// Fixed factor applied by [`OperationKind::ScaledIdentity`].
pub const SCALED_IDENTITY_FACTOR: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    /// Total nodes per cell, input nodes included.
    pub num_nodes: usize,
    pub num_input_nodes: usize,
    pub ops: Vec<OperationKind>,
    /// Connections kept by each intermediate node.
    pub sparseness: Vec<usize>,
    pub width: usize,
}

impl CellSpec {
    /// `intermediate` nodes with all seven operations and sparseness 2.
    pub fn standard(intermediate: usize, width: usize) -> Self {
        Self {
            num_nodes: 2 + intermediate,
            num_input_nodes: 2,
            ops: OperationKind::ALL.to_vec(),
            sparseness: vec![2; intermediate],
            width,
        }
    }

    pub fn k(&self) -> usize {
        self.ops.len()
    }

    pub fn intermediate(&self) -> usize {
        self.num_nodes - self.num_input_nodes
    }

    /// Candidate count of the `local`-th intermediate node.
    pub fn candidates(&self, local: usize) -> usize {
        (self.num_input_nodes + local) * self.k()
    }

    /// `(source node, operation)` of a candidate index.
    pub fn connection(&self, candidate: usize) -> (usize, OperationKind) {
        (candidate / self.k(), self.ops[candidate % self.k()])
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_input_nodes == 0 {
            problems.push("num_input_nodes must be positive".to_string());
        }
        if self.num_nodes <= self.num_input_nodes {
            problems.push("cell needs at least one intermediate node".to_string());
        }
        if self.ops.is_empty() {
            problems.push("operation list is empty".to_string());
        }
        if self.width == 0 {
            problems.push("width must be positive".to_string());
        }
        for (i, a) in self.ops.iter().enumerate() {
            if self.ops[..i].contains(a) {
                problems.push(format!("operation {} listed twice", a.tag()));
            }
        }
        if problems.is_empty() {
            if self.sparseness.len() != self.intermediate() {
                problems.push(format!(
                    "{} sparseness values for {} intermediate nodes",
                    self.sparseness.len(),
                    self.intermediate()
                ));
            } else {
                for (j, &s) in self.sparseness.iter().enumerate() {
                    if s == 0 || s > self.candidates(j) {
                        problems.push(format!(
                            "node {j}: sparseness {s} outside 1..={}",
                            self.candidates(j)
                        ));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Active connections and their mixing coefficients for one node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeChoice {
    pub support: Vec<usize>,
    pub coefficients: Vec<f64>,
}

/// A concrete sparse architecture: one [`NodeChoice`] per intermediate node
/// of every cell kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kinds: Vec<Vec<NodeChoice>>,
}

impl Architecture {
    pub fn supports(&self) -> Vec<Vec<Vec<usize>>> {
        self.kinds
            .iter()
            .map(|k| k.iter().map(|n| n.support.clone()).collect())
            .collect()
    }

    /// Same supports, every coefficient set to one.
    pub fn with_unit_coefficients(&self) -> Self {
        Self {
            kinds: self
                .kinds
                .iter()
                .map(|k| {
                    k.iter()
                        .map(|n| NodeChoice {
                            support: n.support.clone(),
                            coefficients: vec![1.0; n.support.len()],
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn validate(&self, spec: &CellSpec, kinds: usize) -> Result<()> {
        if self.kinds.len() != kinds {
            return Err(Error::Schema {
                field: "kinds".into(),
                message: format!("{} cell kinds, expected {kinds}", self.kinds.len()),
            });
        }
        for (k, nodes) in self.kinds.iter().enumerate() {
            if nodes.len() != spec.intermediate() {
                return Err(Error::Schema {
                    field: format!("kinds[{k}]"),
                    message: format!(
                        "{} nodes, expected {}",
                        nodes.len(),
                        spec.intermediate()
                    ),
                });
            }
            for (j, node) in nodes.iter().enumerate() {
                let field = format!("kinds[{k}].nodes[{j}]");
                let want = spec.sparseness[j];
                if node.support.len() != want {
                    return Err(Error::Schema {
                        field: format!("{field}.support"),
                        message: format!("{} connections, expected {want}", node.support.len()),
                    });
                }
                if node.coefficients.len() != node.support.len() {
                    return Err(Error::Schema {
                        field: format!("{field}.coefficients"),
                        message: "length differs from support".into(),
                    });
                }
                if !node.support.windows(2).all(|w| w[0] < w[1]) {
                    return Err(Error::Schema {
                        field: format!("{field}.support"),
                        message: "indices must be strictly ascending".into(),
                    });
                }
                if let Some(&bad) = node.support.iter().find(|&&i| i >= spec.candidates(j)) {
                    return Err(Error::Schema {
                        field: format!("{field}.support"),
                        message: format!(
                            "index {bad} outside {} candidates",
                            spec.candidates(j)
                        ),
                    });
                }
                if node.coefficients.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Schema {
                        field: format!("{field}.coefficients"),
                        message: "non-finite coefficient".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// `c = bᵀA₍S₎ − z₍S₎ᵀE₍S,S₎`, the per-connection coefficients of a node
/// whose architecture vector `z` is supported on `support`.
pub fn mixing_coefficients(
    b: &[f64],
    matrix: &MeasurementMatrix,
    z: &[f64],
    support: &[usize],
) -> Result<Vec<f64>> {
    let n = matrix.n();
    if support.is_empty() {
        return Err(Error::InvalidArgument("support must be non-empty".into()));
    }
    if b.len() != matrix.m() {
        return Err(Error::Dimension(format!(
            "b has length {}, expected {}",
            b.len(),
            matrix.m()
        )));
    }
    if z.len() != n {
        return Err(Error::Dimension(format!("z has length {}, expected {n}", z.len())));
    }
    if let Some(&bad) = support.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    if let Some(i) = (0..n).find(|i| z[*i] != 0.0 && !support.contains(i)) {
        return Err(Error::InvalidArgument(format!(
            "z has a nonzero at {i} outside the support"
        )));
    }
    let a = matrix.a();
    let e = matrix.e();
    Ok(support
        .iter()
        .map(|&k| {
            let bta: f64 = (0..a.rows()).map(|r| b[r] * a[(r, k)]).sum();
            let zte: f64 = support.iter().map(|&i| z[i] * e[(i, k)]).sum();
            bta - zte
        })
        .collect())
}

/// Full-length coefficients `bᵀA − zᵀE` over all candidates.
pub fn dense_coefficients(b: &[f64], matrix: &MeasurementMatrix, z: &[f64]) -> Vec<f64> {
    let bta = matrix.a().t_mul_vec(b);
    let zte = matrix.e().t_mul_vec(z);
    bta.iter().zip(&zte).map(|(x, y)| x - y).collect()
}

/// Affine parameters and running statistics of one connection's batch
/// normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub frozen: bool,
}

impl BatchNormParams {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            frozen: false,
        }
    }

    /// Reset the affine part to (1, 0) and stop it from training.
    pub fn freeze(&mut self) {
        self.gamma.iter_mut().for_each(|g| *g = 1.0);
        self.beta.iter_mut().for_each(|b| *b = 0.0);
        self.frozen = true;
    }

    /// Fold a connection coefficient into the affine parameters:
    /// `γ̂ = c·γ`, `β̂ = c·β`.
    pub fn absorb(&self, c: f64) -> Result<Self> {
        if self.frozen {
            return Err(Error::InvalidArgument(
                "cannot absorb into frozen batch normalization".into(),
            ));
        }
        Ok(Self {
            gamma: self.gamma.iter().map(|g| c * g).collect(),
            beta: self.beta.iter().map(|b| c * b).collect(),
            ..self.clone()
        })
    }
}

/// Absorb one coefficient per active connection of a node.
pub fn bn_absorb(bns: &[BatchNormParams], coefficients: &[f64]) -> Result<Vec<BatchNormParams>> {
    if bns.len() != coefficients.len() {
        return Err(Error::Dimension(format!(
            "{} coefficients for {} connections",
            coefficients.len(),
            bns.len()
        )));
    }
    bns.iter()
        .zip(coefficients)
        .map(|(bn, &c)| bn.absorb(c))
        .collect()
}

/// Reference evaluation of `Σₖ cₖ · vₖ` used by consistency checks.
pub fn weighted_sum(terms: &[Vec<f64>], coefficients: &[f64]) -> Vec<f64> {
    let len = terms.first().map_or(0, Vec::len);
    (0..len)
        .map(|i| {
            let column: Vec<f64> = terms.iter().map(|t| t[i]).collect();
            dot(&column, coefficients)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::sample_matrix;

    #[test]
    fn tags_round_trip() {
        for op in OperationKind::ALL {
            assert_eq!(OperationKind::from_tag(op.tag()), Some(op));
        }
        assert_eq!(OperationKind::from_tag("zero"), None);
    }

    #[test]
    fn candidate_counts() {
        let spec = CellSpec::standard(4, 8);
        assert_eq!(spec.candidates(0), 14);
        assert_eq!(spec.candidates(3), 35);
        assert_eq!(spec.connection(9), (1, spec.ops[2]));
        spec.validate().unwrap();
    }

    #[test]
    fn invalid_spec_lists_problems() {
        let mut spec = CellSpec::standard(2, 8);
        spec.sparseness = vec![0, 100];
        match spec.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn planted_signal_coefficients_equal_z() {
        let mm = sample_matrix(8, 14, 5).unwrap();
        let mut z = vec![0.0; 14];
        z[3] = 0.7;
        z[11] = -1.3;
        let b = mm.a().mul_vec(&z);
        let c = mixing_coefficients(&b, &mm, &z, &[3, 11]).unwrap();
        assert!((c[0] - 0.7).abs() < 1e-12);
        assert!((c[1] + 1.3).abs() < 1e-12);
    }

    #[test]
    fn zero_inputs_zero_coefficients() {
        let mm = sample_matrix(4, 6, 9).unwrap();
        let c = mixing_coefficients(&[0.0; 4], &mm, &[0.0; 6], &[1, 2]).unwrap();
        assert_eq!(c, vec![0.0, 0.0]);
    }

    #[test]
    fn restricted_matches_dense() {
        let mm = sample_matrix(5, 9, 21).unwrap();
        let b = [0.3, -0.4, 1.1, 0.0, 0.25];
        let mut z = vec![0.0; 9];
        z[2] = 0.5;
        z[7] = -0.8;
        let dense = dense_coefficients(&b, &mm, &z);
        let sparse = mixing_coefficients(&b, &mm, &z, &[2, 7]).unwrap();
        assert!((dense[2] - sparse[0]).abs() < 1e-14);
        assert!((dense[7] - sparse[1]).abs() < 1e-14);
    }

    #[test]
    fn coefficient_errors() {
        let mm = sample_matrix(4, 6, 9).unwrap();
        assert!(matches!(
            mixing_coefficients(&[0.0; 4], &mm, &[0.0; 6], &[6]),
            Err(Error::IndexOutOfRange { index: 6, len: 6 })
        ));
        let mut z = vec![0.0; 6];
        z[5] = 1.0;
        assert!(mixing_coefficients(&[0.0; 4], &mm, &z, &[0]).is_err());
    }

    #[test]
    fn absorb_examples() {
        let bn = BatchNormParams {
            gamma: vec![0.3, 2.0],
            beta: vec![-1.0, 0.5],
            ..BatchNormParams::new(2)
        };
        assert_eq!(bn.absorb(1.0).unwrap(), bn);
        let fresh = BatchNormParams::new(3).absorb(0.5).unwrap();
        assert_eq!(fresh.gamma, vec![0.5; 3]);
        assert_eq!(fresh.beta, vec![0.0; 3]);
        let mut frozen = BatchNormParams::new(2);
        frozen.freeze();
        assert!(frozen.absorb(2.0).is_err());
        assert!(bn_absorb(std::slice::from_ref(&bn), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn architecture_validation() {
        let spec = CellSpec::standard(1, 4);
        let good = Architecture {
            kinds: vec![vec![NodeChoice {
                support: vec![0, 9],
                coefficients: vec![1.0, 1.0],
            }]],
        };
        good.validate(&spec, 1).unwrap();
        let mut bad = good.clone();
        bad.kinds[0][0].support = vec![9, 0];
        assert!(bad.validate(&spec, 1).is_err());
        let mut bad = good.clone();
        bad.kinds[0][0].support = vec![0];
        bad.kinds[0][0].coefficients = vec![1.0];
        assert!(bad.validate(&spec, 1).is_err());
        let mut bad = good;
        bad.kinds[0][0].support = vec![0, 14];
        assert!(bad.validate(&spec, 1).is_err());
    }
}
