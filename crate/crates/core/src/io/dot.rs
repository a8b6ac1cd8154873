//! Graphviz export of architecture documents.

use std::fmt::Write;

use crate::error::Result;
use crate::io::architecture::ArchitectureDocument;

/// DOT digraph with one cluster per cell kind and one edge, labeled by its
/// operation, per kept connection. Nodes and edges follow document order.
pub fn to_dot(doc: &ArchitectureDocument) -> Result<String> {
    doc.validate()?;
    let mut out = String::from("digraph architecture {\n  rankdir=LR;\n");
    for kind in 0..doc.cell.kinds {
        let _ = writeln!(out, "  subgraph cluster_kind{kind} {{");
        let _ = writeln!(out, "    label=\"kind {kind}\";");
        for node in 0..doc.cell.num_nodes {
            let label = if node < doc.cell.num_input_nodes {
                format!("input {node}")
            } else {
                format!("node {node}")
            };
            let _ = writeln!(out, "    \"k{kind}_n{node}\" [label=\"{label}\"];");
        }
        for nd in doc.nodes.iter().filter(|n| n.kind == kind) {
            for c in &nd.connections {
                let _ = writeln!(
                    out,
                    "    \"k{kind}_n{}\" -> \"k{kind}_n{}\" [label=\"{}\"];",
                    c.source, nd.node, c.op
                );
            }
        }
        out.push_str("  }\n");
    }
    out.push_str("}\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::architecture::Provenance;
    use crate::supernet::{Architecture, CellSpec, NodeChoice};

    #[test]
    fn one_edge_per_connection() {
        let spec = CellSpec::standard(2, 4);
        let arch = Architecture {
            kinds: vec![vec![
                NodeChoice {
                    support: vec![0, 9],
                    coefficients: vec![1.0, 1.0],
                },
                NodeChoice {
                    support: vec![3, 15],
                    coefficients: vec![1.0, 1.0],
                },
            ]],
        };
        let doc = ArchitectureDocument::new(&spec, &arch, Provenance::default()).unwrap();
        let dot = to_dot(&doc).unwrap();
        assert_eq!(dot.matches("->").count(), 4);
        assert_eq!(dot.matches("-> \"k0_n3\"").count(), 2);
        assert!(dot.contains("\"k0_n2\" -> \"k0_n3\""));
        assert_eq!(to_dot(&doc).unwrap(), dot);
    }
}
