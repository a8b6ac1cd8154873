use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ista_nas::eval_bench::{kendall, make_task, TauMode};
use ista_nas::io::architecture::ArchitectureDocument;
use ista_nas::io::checkpoint::read_checkpoint;
use ista_nas::io::lasso::parse_solution;
use ista_nas::io::matrix::write_matrix;
use ista_nas::io::read_trace;
use ista_nas::search::{OneStageConfig, Phase};
use ista_nas::supernet::NodeMixing;
use ista_nas::Matrix;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ista-nas"))
        .current_dir(dir)
        .args(args)
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn lasso_identity_problem_soft_thresholds_b() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("p.txt"),
        "# identity design\ndims 3 3\nlambda 0.5\nrow 1 0 0\nrow 0 1 0\nrow 0 0 1\nb 1.2 -0.3 -2\n",
    )
    .unwrap();
    let stdout = ok(dir.path(), &["lasso-solve", "p.txt", "--out", "z.txt"]);
    assert!(stdout.contains("converged=true"), "{stdout}");
    let sol = parse_solution(&fs::read_to_string(dir.path().join("z.txt")).unwrap()).unwrap();
    let want = [0.7, 0.0, -1.5];
    for (z, w) in sol.z.iter().zip(want) {
        assert!((z - w).abs() < 1e-12, "{:?}", sol.z);
    }
    assert_eq!(sol.support, vec![0, 2]);
}

#[test]
fn lasso_missing_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["lasso-solve", "nowhere.txt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.txt"));
}

#[test]
fn lasso_parse_errors_report_the_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.txt"), "dims 1 2\nlambda 0.1\nrow 1 oops\nb 1\n").unwrap();
    let out = run(dir.path(), &["lasso-solve", "p.txt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn lasso_single_iteration_is_not_converged() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("p.txt"),
        "dims 2 3\nlambda 0.01\nrow 1 0.5 -0.2\nrow 0.3 1 0.8\nb 1 2\n",
    )
    .unwrap();
    let stdout = ok(
        dir.path(),
        &["lasso-solve", "p.txt", "--max-iters", "1", "--no-continuation"],
    );
    assert!(stdout.contains("converged=false"), "{stdout}");
    let sol = parse_solution(&fs::read_to_string(dir.path().join("p.txt.solution")).unwrap()).unwrap();
    assert!(!sol.converged);
    assert_eq!(sol.iterations, 1);
}

fn two_stage_config(dir: &str) -> String {
    format!("run.output_dir = {dir}\nsearch.epochs = 4\nsearch.seed = 2\ntask.samples = 400\n")
}

#[test]
fn two_stage_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.conf"), two_stage_config("a")).unwrap();
    fs::write(dir.path().join("b.conf"), two_stage_config("b")).unwrap();
    ok(dir.path(), &["search-two-stage", "a.conf"]);
    ok(dir.path(), &["search-two-stage", "b.conf"]);
    let a = fs::read(dir.path().join("a/architecture.json")).unwrap();
    let b = fs::read(dir.path().join("b/architecture.json")).unwrap();
    assert_eq!(a, b);

    let doc = ArchitectureDocument::from_json(std::str::from_utf8(&a).unwrap()).unwrap();
    for node in &doc.nodes {
        assert_eq!(node.connections.len(), doc.cell.sparseness[node.node - doc.cell.num_input_nodes]);
    }
    assert_eq!(doc.provenance.command, "search-two-stage");
    assert_eq!(doc.provenance.seed, 2);
    assert_eq!(doc.provenance.lambda, Some(1e-5));
    assert_eq!(doc.provenance.config_sha256.len(), 64);

    let echoed = fs::read_to_string(dir.path().join("a/resolved.conf")).unwrap();
    assert!(echoed.contains("search.epochs = 4\n"));
    assert!(echoed.contains("solver.max_iters = 10000\n"));

    let trace = read_trace(dir.path().join("a/trace.jsonl")).unwrap();
    assert!(!trace.is_empty());
    assert!(trace.iter().all(|r| r.supports[0][0].len() == 2));
}

#[test]
fn invalid_config_lists_every_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.conf"),
        "search.epochs = -3\nsearch.bogus = 1\nweights.lr = fast\n",
    )
    .unwrap();
    let out = run(dir.path(), &["search-baseline", "bad.conf"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for key in ["search.epochs", "search.bogus", "weights.lr", "run.output_dir"] {
        assert!(err.contains(key), "{key} missing from: {err}");
    }
}

#[test]
fn one_stage_checkpoint_reproduces_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("one.conf"), "run.output_dir = out\nsearch.seed = 1\n").unwrap();
    ok(dir.path(), &["search-one-stage", "one.conf"]);
    let out = dir.path().join("out");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["warning"], false);
    let ck = read_checkpoint(out.join("checkpoint.bin")).unwrap();
    let doc = ArchitectureDocument::from_json(&fs::read_to_string(out.join("architecture.json")).unwrap()).unwrap();
    assert_eq!(doc.architecture().unwrap(), ck.header.architecture);
    assert_eq!(doc.provenance.epsilon, Some(1e-3));

    let task = make_task(&OneStageConfig::default().task).unwrap();
    let mixing = NodeMixing::from_architecture(&ck.header.architecture);
    let acc = ck.network.accuracy(&mixing, &task.test.x, &task.test.y).unwrap();
    let reported = summary["accuracy"].as_f64().unwrap();
    assert!((acc - reported).abs() <= 1e-6, "{acc} vs {reported}");

    let trace = read_trace(out.join("trace.jsonl")).unwrap();
    assert!(trace.iter().any(|r| r.phase == Phase::PostSearch));
}

#[test]
fn export_dot_is_stable_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.conf"), two_stage_config("a")).unwrap();
    ok(dir.path(), &["search-baseline", "a.conf"]);
    let first = ok(dir.path(), &["export-dot", "a/architecture.json"]);
    let second = ok(dir.path(), &["export-dot", "a/architecture.json"]);
    assert_eq!(first, second);
    assert_eq!(first.matches("-> \"k0_n2\"").count(), 2);

    let text = fs::read_to_string(dir.path().join("a/architecture.json")).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["nodes"][0]["connections"] = serde_json::json!([]);
    fs::write(dir.path().join("empty.json"), doc.to_string()).unwrap();
    let out = run(dir.path(), &["export-dot", "empty.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nodes[0].connections"));
}

#[test]
fn rip_check_orthonormal_matrix_is_isometric() {
    let dir = tempfile::tempdir().unwrap();
    write_matrix(dir.path().join("eye.bin"), &Matrix::identity(6), 0).unwrap();
    let stdout = ok(dir.path(), &["rip-check", "--matrix", "eye.bin", "--sparsity", "2"]);
    assert!(stdout.starts_with("delta_hat=0.00000000000000000e0 "), "{stdout}");
    assert!(stdout.contains("bound=exact"));
}

#[test]
fn rip_check_over_budget_suggests_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["rip-check", "--rows", "30", "--cols", "60", "--sparsity", "4"];
    let out = run(dir.path(), &args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--sampled"));
    let mut sampled = args.to_vec();
    sampled.extend(["--sampled", "7"]);
    assert!(ok(dir.path(), &sampled).contains("bound=lower"));
}

#[test]
fn corr_reports_every_requested_seed() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.conf"),
        "run.output_dir = c\ncorr.seeds = [5, 9]\ntwo_stage.epochs = 3\ntwo_stage.task.samples = 400\nretrain.epochs = 3\n",
    )
    .unwrap();
    ok(dir.path(), &["corr", "c.conf"]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("c/report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"], serde_json::json!([5, 9]));
    assert_eq!(report["n_runs"], 2);
    let pairs: Vec<(f64, f64)> = serde_json::from_value(report["pairs"].clone()).unwrap();
    assert_eq!(pairs.len(), 2);
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let tau = kendall(&x, &y, TauMode::TauB).unwrap();
    assert_eq!(report["tau"].as_f64().unwrap(), tau);
    let csv = fs::read_to_string(dir.path().join("c/pairs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
