//! LASSO solving by iterative shrinkage-thresholding.
//!
//! Minimizes `½‖Az − b‖₂² + λ‖z‖₁` with proximal gradient steps of length
//! `1/L`, where `L` is the largest eigenvalue of `AᵀA`. The accelerated
//! variant adds Nesterov momentum. An optional geometric λ-continuation
//! schedule solves a sequence of problems with decreasing regularization,
//! warm-starting each stage from the previous one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{distance2, dot, norm1, norm2, norm_inf, Matrix};

const POWER_ITERATION_SEED: u64 = 0x1574_a5ee_d000_0001;
const POWER_MAX_ITERS: usize = 1000;
const POWER_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct LassoProblem {
    a: Matrix,
    b: Vec<f64>,
    lambda: f64,
}

impl LassoProblem {
    pub fn new(a: Matrix, b: Vec<f64>, lambda: f64) -> Result<Self> {
        if a.rows() == 0 || a.cols() == 0 {
            return Err(Error::Dimension("measurement matrix must be non-empty".into()));
        }
        if b.len() != a.rows() {
            return Err(Error::Dimension(format!(
                "b has length {}, matrix has {} rows",
                b.len(),
                a.rows()
            )));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be a finite nonnegative number, got {lambda}"
            )));
        }
        if let Some(index) = a.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if let Some(index) = b.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { a, b, lambda })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n(&self) -> usize {
        self.a.cols()
    }

    pub fn m(&self) -> usize {
        self.a.rows()
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), lambda)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverVariant {
    Ista,
    Accelerated,
}

/// Geometric λ schedule: the first stage uses `start_factor · ‖Aᵀb‖∞`, each
/// following stage multiplies by `decay`, and the last stage is the target λ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Continuation {
    pub start_factor: f64,
    pub decay: f64,
    /// Upper bound on the number of stages, the target stage included.
    pub max_stages: Option<usize>,
}

impl Default for Continuation {
    fn default() -> Self {
        Self {
            start_factor: 0.1,
            decay: 0.5,
            max_stages: None,
        }
    }
}

impl Continuation {
    /// λ values for each stage, ending exactly at `target`.
    pub fn schedule(&self, problem: &LassoProblem, target: f64) -> Vec<f64> {
        let start = self.start_factor * norm_inf(&problem.a.t_mul_vec(&problem.b));
        let mut stages = Vec::new();
        let mut lam = start;
        while lam > target {
            stages.push(lam);
            lam *= self.decay;
        }
        if let Some(cap) = self.max_stages {
            let keep = cap.saturating_sub(1);
            if stages.len() > keep {
                stages.drain(..stages.len() - keep);
            }
        }
        stages.push(target);
        stages
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub variant: SolverVariant,
    pub continuation: Option<Continuation>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            rel_tol: 1e-6,
            variant: SolverVariant::Ista,
            continuation: Some(Continuation::default()),
        }
    }
}

impl SolverConfig {
    /// Plain ISTA at the target λ, no continuation.
    pub fn plain() -> Self {
        Self {
            continuation: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be positive".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidArgument("rel_tol must be positive".into()));
        }
        if let Some(c) = &self.continuation {
            if !(c.decay > 0.0 && c.decay < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "continuation decay must lie in (0, 1), got {}",
                    c.decay
                )));
            }
            if !(c.start_factor > 0.0) {
                return Err(Error::InvalidArgument(
                    "continuation start factor must be positive".into(),
                ));
            }
            if c.max_stages == Some(0) {
                return Err(Error::InvalidArgument(
                    "continuation needs at least one stage".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseSolution {
    pub z: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub support: Vec<usize>,
}

/// A vector with at most `s` nonzeros and its ascending support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub z: Vec<f64>,
    pub support: Vec<usize>,
}

pub fn support_of(z: &[f64]) -> Vec<usize> {
    z.iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Component-wise `sign(x)·max(|x| − θ, 0)`.
pub fn soft_threshold(x: &[f64], theta: f64) -> Result<Vec<f64>> {
    if !(theta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be nonnegative, got {theta}"
        )));
    }
    x.iter()
        .enumerate()
        .map(|(index, &v)| {
            if !v.is_finite() {
                return Err(Error::NonFinite { index });
            }
            Ok(shrink(v, theta))
        })
        .collect()
}

#[inline]
fn shrink(v: f64, theta: f64) -> f64 {
    let mag = v.abs() - theta;
    if mag > 0.0 {
        mag.copysign(v)
    } else {
        0.0
    }
}

/// Largest eigenvalue of `AᵀA` by power iteration.
///
/// Iterates on the smaller of the two Gram matrices `AᵀA` and `AAᵀ`, which
/// share their nonzero spectrum.
pub fn lipschitz_constant(a: &Matrix) -> Result<f64> {
    if a.max_abs() == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let gram = if a.rows() <= a.cols() {
        a.matmul_t(a)
    } else {
        a.t_matmul(a)
    };
    let n = gram.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let mut rho = 0.0;
    let mut prev_step = f64::INFINITY;
    for _ in 0..POWER_MAX_ITERS {
        let w = gram.mul_vec(&v);
        let next = dot(&v, &w);
        let nw = norm2(&w);
        if nw == 0.0 {
            // start vector landed in the null space; the spectrum is still nonzero
            v = vec![1.0 / (n as f64).sqrt(); n];
            continue;
        }
        v = w.into_iter().map(|x| x / nw).collect();
        // Rayleigh quotients converge geometrically, so the remaining error
        // is about step·r/(1 − r) with r the ratio of successive steps.
        let step = (next - rho).abs();
        let ratio = step / prev_step;
        let remaining = if ratio < 1.0 { step * ratio / (1.0 - ratio) } else { f64::INFINITY };
        let done = step == 0.0 || (step.max(remaining) <= POWER_TOL * next.abs());
        rho = next;
        prev_step = step;
        if done {
            break;
        }
    }
    Ok(rho)
}

/// `½‖Az − b‖₂² + λ‖z‖₁`.
pub fn lasso_objective(problem: &LassoProblem, z: &[f64]) -> Result<f64> {
    if z.len() != problem.n() {
        return Err(Error::Dimension(format!(
            "z has length {}, problem has {} columns",
            z.len(),
            problem.n()
        )));
    }
    Ok(objective_unchecked(problem, z, problem.lambda))
}

fn objective_unchecked(problem: &LassoProblem, z: &[f64], lambda: f64) -> f64 {
    let az = problem.a.mul_vec(z);
    let r2: f64 = az
        .iter()
        .zip(&problem.b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum();
    0.5 * r2 + lambda * norm1(z)
}

/// Solve the LASSO problem, optionally from a warm start.
pub fn ista_solve(
    problem: &LassoProblem,
    config: &SolverConfig,
    warm_start: Option<&[f64]>,
) -> Result<SparseSolution> {
    solve_inner(problem, config, warm_start, None)
}

/// Same as [`ista_solve`] but also returns the objective after every
/// iteration (evaluated at each stage's own λ).
pub fn ista_solve_traced(
    problem: &LassoProblem,
    config: &SolverConfig,
    warm_start: Option<&[f64]>,
) -> Result<(SparseSolution, Vec<f64>)> {
    let mut history = Vec::new();
    let sol = solve_inner(problem, config, warm_start, Some(&mut history))?;
    Ok((sol, history))
}

fn solve_inner(
    problem: &LassoProblem,
    config: &SolverConfig,
    warm_start: Option<&[f64]>,
    mut history: Option<&mut Vec<f64>>,
) -> Result<SparseSolution> {
    config.validate()?;
    let n = problem.n();
    let mut z = match warm_start {
        Some(w) if w.len() != n => {
            return Err(Error::Dimension(format!(
                "warm start has length {}, expected {n}",
                w.len()
            )))
        }
        Some(w) => w.to_vec(),
        None => vec![0.0; n],
    };

    // zero is the unique minimizer when Aᵀb vanishes
    if problem.b.iter().all(|&v| v == 0.0) && warm_start.is_none() {
        return Ok(SparseSolution {
            objective: 0.0,
            iterations: 0,
            converged: true,
            support: Vec::new(),
            z,
        });
    }

    let lipschitz = lipschitz_constant(&problem.a)?;
    let lambdas = match &config.continuation {
        Some(c) => c.schedule(problem, problem.lambda),
        None => vec![problem.lambda],
    };

    let mut total_iters = 0;
    let mut converged = false;
    for lam in lambdas {
        let (iters, ok) = run_stage(
            problem,
            config,
            lipschitz,
            lam,
            &mut z,
            history.as_deref_mut(),
        );
        total_iters += iters;
        converged = ok;
    }

    let objective = objective_unchecked(problem, &z, problem.lambda);
    Ok(SparseSolution {
        support: support_of(&z),
        z,
        objective,
        iterations: total_iters,
        converged,
    })
}

fn run_stage(
    problem: &LassoProblem,
    config: &SolverConfig,
    lipschitz: f64,
    lambda: f64,
    z: &mut Vec<f64>,
    mut history: Option<&mut Vec<f64>>,
) -> (usize, bool) {
    let step = 1.0 / lipschitz;
    let theta = lambda * step;
    let mut y = z.clone();
    let mut t = 1.0_f64;

    for iter in 1..=config.max_iters {
        let point = match config.variant {
            SolverVariant::Ista => &*z,
            SolverVariant::Accelerated => &y,
        };
        let next = prox_step(problem, point, step, theta);
        let change = distance2(&next, z) / norm2(z).max(1.0);

        if config.variant == SolverVariant::Accelerated {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            y = next
                .iter()
                .zip(z.iter())
                .map(|(a, b)| a + beta * (a - b))
                .collect();
            t = t_next;
        }
        *z = next;
        if let Some(h) = history.as_deref_mut() {
            h.push(objective_unchecked(problem, z, lambda));
        }
        if change < config.rel_tol {
            return (iter, true);
        }
    }
    (config.max_iters, false)
}

fn prox_step(problem: &LassoProblem, point: &[f64], step: f64, theta: f64) -> Vec<f64> {
    let residual: Vec<f64> = problem
        .a
        .mul_vec(point)
        .iter()
        .zip(&problem.b)
        .map(|(p, q)| p - q)
        .collect();
    let grad = problem.a.t_mul_vec(&residual);
    point
        .iter()
        .zip(&grad)
        .map(|(p, g)| shrink(p - step * g, theta))
        .collect()
}

/// Keep the `s` entries of largest magnitude; ties go to the lowest index.
pub fn project_top_s(z: &[f64], s: usize) -> Result<SparseVector> {
    if s == 0 || s > z.len() {
        return Err(Error::InvalidArgument(format!(
            "sparseness {s} outside 1..={}",
            z.len()
        )));
    }
    let mut support = top_indices(z, s);
    support.retain(|&i| z[i] != 0.0);
    support.sort_unstable();
    let mut out = vec![0.0; z.len()];
    for &i in &support {
        out[i] = z[i];
    }
    Ok(SparseVector { z: out, support })
}

/// Indices of the `k` largest `|scores|`, ordered by decreasing magnitude,
/// ties to the lowest index.
pub fn top_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .abs()
            .partial_cmp(&scores[i].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order.truncate(k);
    order
}
