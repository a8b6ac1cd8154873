//! Synthetic tasks, brute-force architecture ranking, and rank-correlation
//! experiments between search-time and retrained performance.

mod task;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use task::{make_task, Split, Task, TaskConfig, TaskKind};

use crate::error::{Error, Result};
use crate::measurement::{binomial, Combinations};
use crate::search::{
    darts_baseline_search_on, one_stage_search_on, train_architecture, two_stage_search_on,
    ModelConfig, OneStageConfig, TrainConfig, TwoStageConfig,
};
use crate::supernet::{Architecture, CellSpec, NodeChoice};

/// Enumeration budget of [`enumerate_architectures`].
pub const ENUMERATION_BUDGET: u128 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauMode {
    /// `(concordant − discordant) / C(N, 2)`; ties are an error.
    Strict,
    /// Tie-adjusted τ-b.
    TauB,
}

fn pair_counts(x: &[f64], y: &[f64]) -> Result<(i64, i64, i64, i64)> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "rankings of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("need at least two pairs".into()));
    }
    if let Some(i) = x.iter().chain(y).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i % x.len() });
    }
    let (mut conc, mut disc, mut tx, mut ty) = (0, 0, 0, 0);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let a = (x[i] - x[j]).signum() * f64::from(x[i] != x[j]);
            let b = (y[i] - y[j]).signum() * f64::from(y[i] != y[j]);
            match (a == 0.0, b == 0.0) {
                (true, true) => {
                    tx += 1;
                    ty += 1;
                }
                (true, false) => tx += 1,
                (false, true) => ty += 1,
                (false, false) => {
                    if a == b {
                        conc += 1
                    } else {
                        disc += 1
                    }
                }
            }
        }
    }
    Ok((conc, disc, tx, ty))
}

/// Kendall rank correlation without ties.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    let (c, d, tx, ty) = pair_counts(x, y)?;
    if tx > 0 || ty > 0 {
        return Err(Error::Ties);
    }
    let n = x.len() as i64;
    Ok((c - d) as f64 / (n * (n - 1) / 2) as f64)
}

/// Tie-adjusted Kendall τ-b. A ranking that is constant in either argument
/// carries no order information and yields 0.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    let (c, d, tx, ty) = pair_counts(x, y)?;
    let n = x.len() as i64;
    let n0 = n * (n - 1) / 2;
    let denom = (((n0 - tx) * (n0 - ty)) as f64).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((c - d) as f64 / denom)
}

pub fn kendall(x: &[f64], y: &[f64], mode: TauMode) -> Result<f64> {
    match mode {
        TauMode::Strict => kendall_tau(x, y),
        TauMode::TauB => kendall_tau_b(x, y),
    }
}

/// Every choice of supports for a single cell kind, coefficients set to 1,
/// in lexicographic order with the first node varying slowest.
pub fn enumerate_architectures(spec: &CellSpec) -> Result<Vec<Architecture>> {
    spec.validate()?;
    let mut count: u128 = 1;
    for j in 0..spec.intermediate() {
        count = count.saturating_mul(binomial(spec.candidates(j), spec.sparseness[j]));
    }
    if count > ENUMERATION_BUDGET {
        return Err(Error::BudgetExceeded {
            count,
            budget: ENUMERATION_BUDGET,
            hint: "reduce the cell size or sparseness",
        });
    }
    let mut out: Vec<Vec<NodeChoice>> = vec![Vec::new()];
    for j in 0..spec.intermediate() {
        let s = spec.sparseness[j];
        let supports: Vec<Vec<usize>> = Combinations::new(spec.candidates(j), s).collect();
        out = out
            .into_iter()
            .flat_map(|prefix| {
                supports.iter().map(move |sup| {
                    let mut p = prefix.clone();
                    p.push(NodeChoice {
                        support: sup.clone(),
                        coefficients: vec![1.0; s],
                    });
                    p
                })
            })
            .collect();
    }
    Ok(out
        .into_iter()
        .map(|nodes| Architecture { kinds: vec![nodes] })
        .collect())
}

/// Train every enumerated architecture from the same seed and rank by test
/// accuracy, best first; equal accuracies keep enumeration order.
pub fn oracle_rank(
    model: &ModelConfig,
    task: &Task,
    budget: &TrainConfig,
    seed: u64,
) -> Result<Vec<(Architecture, f64)>> {
    if model.num_kinds() != 1 {
        return Err(Error::InvalidArgument(
            "oracle ranking covers single-kind cells".into(),
        ));
    }
    let archs = enumerate_architectures(&model.cell)?;
    let accs: Vec<f64> = archs
        .par_iter()
        .map(|a| train_architecture(model, task, a, budget, seed).map(|(_, acc)| acc))
        .collect::<Result<_>>()?;
    let mut ranked: Vec<(Architecture, f64)> = archs.into_iter().zip(accs).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ranked)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Driver {
    IstaTwoStage,
    IstaOneStage,
    DartsBaseline,
}

impl Driver {
    pub fn tag(self) -> &'static str {
        match self {
            Driver::IstaTwoStage => "ista-two-stage",
            Driver::IstaOneStage => "ista-one-stage",
            Driver::DartsBaseline => "darts-baseline",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        [Driver::IstaTwoStage, Driver::IstaOneStage, Driver::DartsBaseline]
            .into_iter()
            .find(|d| d.tag() == tag)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationConfig {
    pub driver: Driver,
    pub seeds: Vec<u64>,
    pub two_stage: TwoStageConfig,
    pub one_stage: OneStageConfig,
    /// Retraining of each searched architecture.
    pub retrain: TrainConfig,
    pub mode: TauMode,
}

impl CorrelationConfig {
    /// Toy benchmark: a shorter two-stage budget on a smaller planted task,
    /// so that runs land on architectures of differing quality, and a
    /// retrain budget equal to the search budget.
    pub fn new(driver: Driver, seeds: Vec<u64>) -> Self {
        let mut two_stage = TwoStageConfig {
            epochs: 30,
            ..TwoStageConfig::default()
        };
        two_stage.task.samples = 1000;
        let one_stage = OneStageConfig::default();
        let epochs = match driver {
            Driver::IstaOneStage => one_stage.epochs,
            _ => two_stage.epochs,
        };
        let retrain = TrainConfig {
            epochs,
            batch_size: two_stage.batch_size,
            weights: two_stage.weights.clone(),
            cosine: true,
        };
        Self {
            driver,
            seeds,
            two_stage,
            one_stage,
            retrain,
            mode: TauMode::TauB,
        }
    }
}

/// One run of a correlation experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub search_metric: f64,
    pub eval_metric: f64,
    pub supports: Vec<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub driver: Driver,
    pub n_runs: usize,
    pub seeds: Vec<u64>,
    /// `(search metric, eval metric)` of each successful run, in seed order.
    pub pairs: Vec<(f64, f64)>,
    pub runs: Vec<RunResult>,
    pub tau: f64,
    pub tau_mode: TauMode,
    /// Seeds whose run failed; their pairs are excluded.
    pub failed_seeds: Vec<u64>,
}

impl CorrelationReport {
    /// Assemble a report from pairs, computing τ in the given mode.
    pub fn from_pairs(
        driver: Driver,
        runs: Vec<RunResult>,
        failed_seeds: Vec<u64>,
        mode: TauMode,
    ) -> Result<Self> {
        let pairs: Vec<(f64, f64)> = runs.iter().map(|r| (r.search_metric, r.eval_metric)).collect();
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let tau = kendall(&x, &y, mode)?;
        let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
        seeds.extend(&failed_seeds);
        seeds.sort_unstable();
        Ok(Self {
            driver,
            n_runs: seeds.len(),
            seeds,
            pairs,
            runs,
            tau,
            tau_mode: mode,
            failed_seeds,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,search_metric,eval_metric\n");
        for r in &self.runs {
            out.push_str(&format!(
                "{},{:.16e},{:.16e}\n",
                r.seed, r.search_metric, r.eval_metric
            ));
        }
        out
    }
}

fn run_once(config: &CorrelationConfig, task: &Task, seed: u64) -> Result<RunResult> {
    let noop = &mut |_: &crate::search::TraceRecord| Ok(());
    match config.driver {
        Driver::IstaTwoStage | Driver::DartsBaseline => {
            let cfg = TwoStageConfig {
                seed,
                ..config.two_stage.clone()
            };
            let out = if config.driver == Driver::IstaTwoStage {
                two_stage_search_on(&cfg, task, noop)?
            } else {
                darts_baseline_search_on(&cfg, task, noop)?
            };
            let arch = out.architecture.with_unit_coefficients();
            let (_, acc) = train_architecture(&cfg.model, task, &arch, &config.retrain, seed)?;
            Ok(RunResult {
                seed,
                search_metric: out.val_accuracy,
                eval_metric: acc,
                supports: arch.supports(),
            })
        }
        Driver::IstaOneStage => {
            let cfg = OneStageConfig {
                seed,
                ..config.one_stage.clone()
            };
            let out = one_stage_search_on(&cfg, task, noop)?;
            let (_, acc) = train_architecture(
                &cfg.model,
                task,
                &out.search_architecture,
                &config.retrain,
                seed,
            )?;
            Ok(RunResult {
                seed,
                search_metric: out.accuracy,
                eval_metric: acc,
                supports: out.architecture.supports(),
            })
        }
    }
}

/// Run the driver once per seed on the task of the driver's config, retrain
/// each found architecture, and correlate the two metrics.
pub fn correlation_experiment(config: &CorrelationConfig) -> Result<CorrelationReport> {
    if config.seeds.len() < 2 {
        return Err(Error::InvalidArgument("need at least two runs".into()));
    }
    let task_cfg = match config.driver {
        Driver::IstaOneStage => &config.one_stage.task,
        _ => &config.two_stage.task,
    };
    let task = make_task(task_cfg)?;
    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();
    let results: Vec<(u64, Result<RunResult>)> = seeds
        .par_iter()
        .map(|&s| (s, run_once(config, &task, s)))
        .collect();
    let mut runs = Vec::new();
    let mut failed = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(run) => runs.push(run),
            Err(e) => {
                log::warn!("run with seed {seed} failed: {e}");
                failed.push(seed);
            }
        }
    }
    if runs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "only {} of {} runs succeeded",
            runs.len(),
            seeds.len()
        )));
    }
    CorrelationReport::from_pairs(config.driver, runs, failed, config.mode)
}
