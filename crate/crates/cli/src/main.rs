use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ista_nas::eval_bench::{correlation_experiment, make_task, CorrelationConfig, Driver};
use ista_nas::io::architecture::{ArchitectureDocument, Provenance};
use ista_nas::io::checkpoint::{write_checkpoint, CheckpointHeader};
use ista_nas::io::config::{resolve, Resolved};
use ista_nas::io::lasso::{format_solution, read_problem, summary_line};
use ista_nas::io::matrix::{read_matrix, write_matrix};
use ista_nas::io::{to_dot, TraceWriter};
use ista_nas::measurement::{estimate_rip_constant, sample_matrix, RipMode};
use ista_nas::search::{
    darts_baseline_search_on, one_stage_search_on, two_stage_search_on, OneStageConfig,
    SearchOutcome, TwoStageConfig,
};
use ista_nas::sparse_coding::{ista_solve, Continuation, SolverConfig, SolverVariant};
use ista_nas::Error;

#[derive(Parser)]
#[command(name = "ista-nas", version, about = "Sparse-coding architecture search")]
struct Cli {
    /// Worker threads for parallel sections; 1 keeps runs bit-reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Ista,
    Accelerated,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a LASSO problem file and write the solution.
    LassoSolve {
        problem: PathBuf,
        /// Solution file; defaults to the problem path with `.solution` appended.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-6)]
        rel_tol: f64,
        #[arg(long, value_enum, default_value_t = Variant::Ista)]
        variant: Variant,
        /// Solve at the target λ directly instead of decaying towards it.
        #[arg(long)]
        no_continuation: bool,
    },
    /// Two-stage search: weights on one train half, architecture on the other.
    SearchTwoStage { config: PathBuf },
    /// One-stage search that also trains the final network.
    SearchOneStage { config: PathBuf },
    /// Softmax-relaxation baseline on the two-stage setup.
    SearchBaseline { config: PathBuf },
    /// Render an architecture document as a Graphviz digraph.
    ExportDot {
        architecture: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Restricted-isometry diagnostics of a seeded or stored matrix.
    RipCheck {
        /// Rows of a seeded Gaussian matrix.
        #[arg(long, required_unless_present = "matrix")]
        rows: Option<usize>,
        /// Columns of a seeded Gaussian matrix.
        #[arg(long, required_unless_present = "matrix")]
        cols: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Binary matrix file to check instead of a seeded one.
        #[arg(long, conflicts_with_all = ["rows", "cols"])]
        matrix: Option<PathBuf>,
        /// Sparsity s; supports of size 2s are scanned.
        #[arg(long, default_value_t = 2)]
        sparsity: usize,
        /// Scan this many random supports from the given seed.
        #[arg(long)]
        sampled: Option<u64>,
        /// Also write the checked matrix in binary form.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Correlation of search and retrain metrics over seeded runs.
    Corr { config: PathBuf },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    ista_nas::init_threads(cli.threads)?;
    match cli.command {
        Command::LassoSolve {
            problem,
            out,
            max_iters,
            rel_tol,
            variant,
            no_continuation,
        } => {
            let config = SolverConfig {
                max_iters,
                rel_tol,
                variant: match variant {
                    Variant::Ista => SolverVariant::Ista,
                    Variant::Accelerated => SolverVariant::Accelerated,
                },
                continuation: (!no_continuation).then(Continuation::default),
            };
            lasso_solve(&problem, out, &config)
        }
        Command::SearchTwoStage { config } => search(&config, Mode::TwoStage),
        Command::SearchBaseline { config } => search(&config, Mode::Baseline),
        Command::SearchOneStage { config } => search_one_stage(&config),
        Command::ExportDot { architecture, out } => {
            let text = read(&architecture)?;
            let doc = ArchitectureDocument::from_json(&text)
                .with_context(|| format!("invalid architecture document {}", architecture.display()))?;
            let dot = to_dot(&doc)?;
            match out {
                Some(p) => write(&p, dot),
                None => {
                    print!("{dot}");
                    Ok(())
                }
            }
        }
        Command::RipCheck {
            rows,
            cols,
            seed,
            matrix,
            sparsity,
            sampled,
            save,
        } => {
            let (a, seed) = match (matrix, rows, cols) {
                (Some(p), _, _) => read_matrix(&p)?,
                (None, Some(m), Some(n)) => (sample_matrix(m, n, seed)?.a().clone(), seed),
                _ => bail!("give --rows and --cols, or --matrix"),
            };
            if let Some(p) = save {
                write_matrix(&p, &a, seed)?;
            }
            let mode = sampled.map_or(RipMode::Exhaustive, |seed| RipMode::Sampled { seed });
            let d = match estimate_rip_constant(&a, sparsity, mode) {
                Err(e @ Error::BudgetExceeded { .. }) => {
                    bail!("{e} (pass --sampled <seed>)")
                }
                r => r?,
            };
            println!(
                "delta_hat={:.17e} coherence={:.17e} s={} supports={} bound={}",
                d.delta_hat,
                d.coherence,
                d.s,
                d.supports_checked,
                if d.lower_bound { "lower" } else { "exact" }
            );
            Ok(())
        }
        Command::Corr { config } => corr(&config),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn lasso_solve(problem: &Path, out: Option<PathBuf>, config: &SolverConfig) -> Result<()> {
    let p = read_problem(problem).with_context(|| format!("cannot load problem {}", problem.display()))?;
    let sol = ista_solve(&p, config, None)?;
    let out = out.unwrap_or_else(|| {
        let mut s = problem.as_os_str().to_owned();
        s.push(".solution");
        PathBuf::from(s)
    });
    write(&out, format_solution(&sol))?;
    println!("{}", summary_line(&sol));
    Ok(())
}

/// Resolve a config file and prepare its output directory with the echoed
/// canonical config.
fn load_config<T>(path: &Path, section: &str, defaults: &T) -> Result<Resolved<T>>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let text = read(path)?;
    let resolved =
        resolve(&text, section, defaults).with_context(|| format!("invalid config {}", path.display()))?;
    let dir = Path::new(&resolved.output_dir);
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write(&dir.join("resolved.conf"), &resolved.canonical)?;
    Ok(resolved)
}

#[derive(Clone, Copy)]
enum Mode {
    TwoStage,
    Baseline,
}

#[derive(Serialize)]
struct Summary {
    command: &'static str,
    architecture: Vec<Vec<Vec<usize>>>,
    accuracy: f64,
    terminated_at: Option<usize>,
    warning: bool,
    config_sha256: String,
}

fn finish(dir: &Path, doc: &ArchitectureDocument, summary: &Summary) -> Result<()> {
    write(&dir.join("architecture.json"), doc.to_json()?)?;
    let json = serde_json::to_string_pretty(summary)? + "\n";
    write(&dir.join("summary.json"), &json)?;
    println!(
        "{}: supports {:?} accuracy {:.4}{}",
        summary.command,
        summary.architecture,
        summary.accuracy,
        if summary.warning { " (termination not reached)" } else { "" }
    );
    Ok(())
}

fn search(path: &Path, mode: Mode) -> Result<()> {
    let r = load_config(path, "search", &TwoStageConfig::default())?;
    let cfg = &r.value;
    cfg.validate()?;
    let dir = PathBuf::from(&r.output_dir);
    let task = make_task(&cfg.task)?;
    let mut trace = TraceWriter::create(dir.join("trace.jsonl"))?;
    let mut observer = |rec: &_| trace.write(rec);
    let (command, out): (&'static str, SearchOutcome) = match mode {
        Mode::TwoStage => ("search-two-stage", two_stage_search_on(cfg, &task, &mut observer)?),
        Mode::Baseline => ("search-baseline", darts_baseline_search_on(cfg, &task, &mut observer)?),
    };
    let provenance = Provenance {
        command: command.into(),
        seed: cfg.seed,
        matrix_seeds: out.matrix_seeds.clone(),
        lambda: matches!(mode, Mode::TwoStage).then_some(cfg.lambda),
        epsilon: None,
        config_sha256: r.sha256.clone(),
    };
    let doc = ArchitectureDocument::new(&cfg.model.cell, &out.architecture, provenance)?;
    let summary = Summary {
        command,
        architecture: out.architecture.supports(),
        accuracy: out.val_accuracy,
        terminated_at: None,
        warning: false,
        config_sha256: r.sha256,
    };
    finish(&dir, &doc, &summary)
}

fn search_one_stage(path: &Path) -> Result<()> {
    let r = load_config(path, "search", &OneStageConfig::default())?;
    let cfg = &r.value;
    cfg.validate()?;
    let dir = PathBuf::from(&r.output_dir);
    let task = make_task(&cfg.task)?;
    let mut trace = TraceWriter::create(dir.join("trace.jsonl"))?;
    let out = one_stage_search_on(cfg, &task, &mut |rec| trace.write(rec))?;
    let provenance = Provenance {
        command: "search-one-stage".into(),
        seed: cfg.seed,
        matrix_seeds: out.matrix_seeds.clone(),
        lambda: Some(cfg.lambda),
        epsilon: Some(cfg.epsilon),
        config_sha256: r.sha256.clone(),
    };
    let doc = ArchitectureDocument::new(&cfg.model.cell, &out.architecture, provenance)?;
    let header = CheckpointHeader {
        network: out.network.config().clone(),
        architecture: out.architecture.clone(),
        config_sha256: r.sha256.clone(),
    };
    write_checkpoint(dir.join("checkpoint.bin"), &header, &out.network)?;
    let summary = Summary {
        command: "search-one-stage",
        architecture: out.architecture.supports(),
        accuracy: out.accuracy,
        terminated_at: out.terminated_at,
        warning: out.warning,
        config_sha256: r.sha256,
    };
    finish(&dir, &doc, &summary)
}

fn corr(path: &Path) -> Result<()> {
    let defaults = CorrelationConfig::new(Driver::IstaTwoStage, (0..8).collect());
    let r = load_config(path, "corr", &defaults)?;
    let dir = PathBuf::from(&r.output_dir);
    let report = correlation_experiment(&r.value)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    write(&dir.join("report.json"), json)?;
    write(&dir.join("pairs.csv"), report.to_csv())?;
    for seed in &report.failed_seeds {
        eprintln!("warning: run with seed {seed} failed and was excluded");
    }
    println!(
        "{}: tau={:.17e} over {} runs",
        report.driver.tag(),
        report.tau,
        report.pairs.len()
    );
    Ok(())
}
