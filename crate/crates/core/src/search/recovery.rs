use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measurement::MeasurementMatrix;
use crate::sparse_coding::{ista_solve, project_top_s, top_indices, LassoProblem, SolverConfig};

/// One node's recovery problem.
#[derive(Clone, Copy, Debug)]
pub struct RecoveryInput<'a> {
    pub b: &'a [f64],
    pub matrix: &'a MeasurementMatrix,
    pub s: usize,
    pub warm: Option<&'a [f64]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeRecovery {
    /// Solver output before projection.
    pub z: Vec<f64>,
    /// Top-s projection; zero outside `support`.
    pub projected: Vec<f64>,
    /// Exactly `s` ascending indices.
    pub support: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

/// Solve the LASSO recovery of one node and project onto `s` connections.
/// When the solution has fewer than `s` nonzeros, the support is completed
/// with the largest entries of the matched filter `Aᵀb`, ties to the lowest
/// index.
pub fn recover_node(
    b: &[f64],
    matrix: &MeasurementMatrix,
    s: usize,
    lambda: f64,
    solver: &SolverConfig,
    warm: Option<&[f64]>,
) -> Result<NodeRecovery> {
    let n = matrix.n();
    if s == 0 || s > n {
        return Err(Error::InvalidArgument(format!(
            "sparseness {s} outside 1..={n}"
        )));
    }
    let problem = LassoProblem::new(matrix.a().clone(), b.to_vec(), lambda)?;
    let sol = ista_solve(&problem, solver, warm)?;
    let proj = project_top_s(&sol.z, s)?;
    let mut support = proj.support;
    if support.len() < s {
        let scores = matrix.a().t_mul_vec(b);
        for i in top_indices(&scores, n) {
            if support.len() == s {
                break;
            }
            if !support.contains(&i) {
                support.push(i);
            }
        }
        support.sort_unstable();
    }
    Ok(NodeRecovery {
        z: sol.z,
        projected: proj.z,
        support,
        iterations: sol.iterations,
        converged: sol.converged,
    })
}

/// Recover every node; nodes are solved in parallel and returned in input
/// order. A failure names the node's position in `inputs`.
pub fn recover_architecture(
    inputs: &[RecoveryInput<'_>],
    lambda: f64,
    solver: &SolverConfig,
) -> Result<Vec<NodeRecovery>> {
    inputs
        .par_iter()
        .enumerate()
        .map(|(node, inp)| {
            recover_node(inp.b, inp.matrix, inp.s, lambda, solver, inp.warm).map_err(|e| {
                Error::Recovery {
                    node,
                    source: Box::new(e),
                }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::sample_matrix;

    #[test]
    fn zero_observation_falls_back_to_lowest_indices() {
        let mat = sample_matrix(5, 6, 1).unwrap();
        let r = recover_node(&[0.0; 5], &mat, 2, 1e-5, &SolverConfig::default(), None).unwrap();
        assert!(r.z.iter().all(|&v| v == 0.0));
        assert_eq!(r.support, vec![0, 1]);
    }

    #[test]
    fn failure_names_node() {
        let mat = sample_matrix(5, 6, 1).unwrap();
        let bad = [f64::NAN, 0.0, 0.0, 0.0, 0.0];
        let ok = [0.0; 5];
        let inputs = [
            RecoveryInput { b: &ok, matrix: &mat, s: 2, warm: None },
            RecoveryInput { b: &bad, matrix: &mat, s: 2, warm: None },
        ];
        match recover_architecture(&inputs, 1e-5, &SolverConfig::default()) {
            Err(Error::Recovery { node, .. }) => assert_eq!(node, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
