//! JSON document describing a searched architecture and how it was produced.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supernet::{Architecture, CellSpec, NodeChoice, OperationKind};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub num_nodes: usize,
    pub num_input_nodes: usize,
    pub ops: Vec<String>,
    pub sparseness: Vec<usize>,
    pub width: usize,
    /// Cell kinds searched separately (normal, reduction).
    pub kinds: usize,
}

/// One kept connection of an intermediate node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectionDoc {
    /// Source node index within the cell; inputs come first.
    pub source: usize,
    pub op: String,
    /// Candidate index, `source · K + op position`.
    pub index: usize,
    pub coefficient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDoc {
    pub kind: usize,
    /// Node index within the cell, counting input nodes.
    pub node: usize,
    pub connections: Vec<ConnectionDoc>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub seed: u64,
    /// Seeds of the measurement matrices, per kind and intermediate node.
    pub matrix_seeds: Vec<Vec<u64>>,
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub config_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureDocument {
    pub schema_version: u32,
    pub cell: CellSummary,
    pub nodes: Vec<NodeDoc>,
    pub provenance: Provenance,
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        field: field.into(),
        message: message.into(),
    }
}

impl ArchitectureDocument {
    pub fn new(spec: &CellSpec, arch: &Architecture, provenance: Provenance) -> Result<Self> {
        let kinds = arch.kinds.len();
        arch.validate(spec, kinds)?;
        let mut nodes = Vec::new();
        for (kind, choices) in arch.kinds.iter().enumerate() {
            for (j, choice) in choices.iter().enumerate() {
                let connections = choice
                    .support
                    .iter()
                    .zip(&choice.coefficients)
                    .map(|(&index, &coefficient)| {
                        let (source, op) = spec.connection(index);
                        ConnectionDoc {
                            source,
                            op: op.tag().to_string(),
                            index,
                            coefficient,
                        }
                    })
                    .collect();
                nodes.push(NodeDoc {
                    kind,
                    node: spec.num_input_nodes + j,
                    connections,
                });
            }
        }
        let doc = Self {
            schema_version: SCHEMA_VERSION,
            cell: CellSummary {
                num_nodes: spec.num_nodes,
                num_input_nodes: spec.num_input_nodes,
                ops: spec.ops.iter().map(|o| o.tag().to_string()).collect(),
                sparseness: spec.sparseness.clone(),
                width: spec.width,
                kinds,
            },
            nodes,
            provenance,
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn cell_spec(&self) -> Result<CellSpec> {
        let ops = self
            .cell
            .ops
            .iter()
            .enumerate()
            .map(|(i, t)| {
                OperationKind::from_tag(t)
                    .ok_or_else(|| schema(format!("cell.ops[{i}]"), format!("unknown op `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = CellSpec {
            num_nodes: self.cell.num_nodes,
            num_input_nodes: self.cell.num_input_nodes,
            ops,
            sparseness: self.cell.sparseness.clone(),
            width: self.cell.width,
        };
        spec.validate().map_err(|e| schema("cell", e.to_string()))?;
        Ok(spec)
    }

    /// Check every structural invariant, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(schema(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        let spec = self.cell_spec()?;
        if self.cell.kinds == 0 {
            return Err(schema("cell.kinds", "must be positive"));
        }
        let inter = spec.intermediate();
        let expected = self.cell.kinds * inter;
        if self.nodes.len() != expected {
            return Err(schema(
                "nodes",
                format!("{} entries, expected {expected}", self.nodes.len()),
            ));
        }
        for (i, nd) in self.nodes.iter().enumerate() {
            let field = |f: &str| format!("nodes[{i}].{f}");
            let (kind, j) = (i / inter, i % inter);
            if nd.kind != kind {
                return Err(schema(field("kind"), format!("expected {kind}, found {}", nd.kind)));
            }
            let node = spec.num_input_nodes + j;
            if nd.node != node {
                return Err(schema(field("node"), format!("expected {node}, found {}", nd.node)));
            }
            let s = spec.sparseness[j];
            if nd.connections.len() != s {
                return Err(schema(
                    field("connections"),
                    format!("{} connections, sparseness is {s}", nd.connections.len()),
                ));
            }
            let mut prev = None;
            for (c, conn) in nd.connections.iter().enumerate() {
                let cf = |f: &str| format!("nodes[{i}].connections[{c}].{f}");
                if conn.index >= spec.candidates(j) {
                    return Err(schema(
                        cf("index"),
                        format!("{} out of range for {} candidates", conn.index, spec.candidates(j)),
                    ));
                }
                if prev.is_some_and(|p| p >= conn.index) {
                    return Err(schema(cf("index"), "indices must be strictly increasing"));
                }
                prev = Some(conn.index);
                let (source, op) = spec.connection(conn.index);
                if conn.source != source {
                    return Err(schema(
                        cf("source"),
                        format!("index {} implies source {source}", conn.index),
                    ));
                }
                if conn.op != op.tag() {
                    return Err(schema(
                        cf("op"),
                        format!("index {} implies op `{}`", conn.index, op.tag()),
                    ));
                }
                if !conn.coefficient.is_finite() {
                    return Err(schema(cf("coefficient"), "must be finite"));
                }
            }
        }
        let seeds = &self.provenance.matrix_seeds;
        if !seeds.is_empty() && (seeds.len() != self.cell.kinds || seeds.iter().any(|k| k.len() != inter)) {
            return Err(schema(
                "provenance.matrix_seeds",
                "must be empty or hold one seed per kind and intermediate node",
            ));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        self.validate()?;
        let inter = self.cell.num_nodes - self.cell.num_input_nodes;
        let kinds = self
            .nodes
            .chunks(inter)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|nd| NodeChoice {
                        support: nd.connections.iter().map(|c| c.index).collect(),
                        coefficients: nd.connections.iter().map(|c| c.coefficient).collect(),
                    })
                    .collect()
            })
            .collect();
        Ok(Architecture { kinds })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parse and validate.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        doc.validate()?;
        Ok(doc)
    }
}
