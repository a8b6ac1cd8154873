//! Text formats for LASSO problems and their solutions.
//!
//! A problem file is a sequence of keyword lines; `#` starts a comment:
//!
//! ```text
//! dims 2 3          # m n
//! lambda 0.1
//! row 1 0 0         # m rows of n entries ...
//! row 0 1 0
//! b 0.5 -2          # ... and m entries of b
//! ```
//!
//! Instead of `row` lines, `matrix <path>` loads `A` from a binary matrix
//! file, resolved relative to the problem file.
//!
//! A solution file holds `objective`, `iterations`, `converged`, `support`
//! and `z` lines; reals are written with 17 significant digits.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::matrix::read_matrix;
use crate::linalg::Matrix;
use crate::sparse_coding::{LassoProblem, SparseSolution};

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn reals(line: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("`{f}` is not a finite number")))
        })
        .collect()
}

/// Parse a problem file; `base` resolves `matrix` paths.
pub fn parse_problem(text: &str, base: Option<&Path>) -> Result<LassoProblem> {
    let mut dims: Option<(usize, usize)> = None;
    let mut lambda = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut external: Option<Matrix> = None;
    let mut b = None;
    let mut last = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        last = line;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        let (head, rest) = (fields[0], &fields[1..]);
        let need_dims = || dims.ok_or_else(|| parse_err(line, "`dims` must come first"));
        match head {
            "dims" => {
                if dims.is_some() {
                    return Err(parse_err(line, "duplicate `dims`"));
                }
                let [m, n] = rest else {
                    return Err(parse_err(line, "`dims` takes m and n"));
                };
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .ok()
                        .filter(|&v| v > 0)
                        .ok_or_else(|| parse_err(line, format!("`{s}` is not a positive integer")))
                };
                dims = Some((parse(m)?, parse(n)?));
            }
            "lambda" => {
                if lambda.is_some() {
                    return Err(parse_err(line, "duplicate `lambda`"));
                }
                let [v] = reals(line, rest)?[..] else {
                    return Err(parse_err(line, "`lambda` takes one value"));
                };
                lambda = Some(v);
            }
            "row" => {
                let (m, n) = need_dims()?;
                if external.is_some() {
                    return Err(parse_err(line, "`row` after `matrix`"));
                }
                if rows.len() == m {
                    return Err(parse_err(line, format!("more than {m} rows")));
                }
                let r = reals(line, rest)?;
                if r.len() != n {
                    return Err(parse_err(line, format!("row has {} entries, expected {n}", r.len())));
                }
                rows.push(r);
            }
            "matrix" => {
                let (m, n) = need_dims()?;
                if external.is_some() || !rows.is_empty() {
                    return Err(parse_err(line, "matrix given twice"));
                }
                let [p] = rest else {
                    return Err(parse_err(line, "`matrix` takes one path"));
                };
                let path = base.map_or_else(|| Path::new(p).to_path_buf(), |d| d.join(p));
                let (a, _) = read_matrix(&path).map_err(|e| parse_err(line, e.to_string()))?;
                if a.shape() != (m, n) {
                    return Err(parse_err(
                        line,
                        format!("matrix is {}x{}, dims say {m}x{n}", a.rows(), a.cols()),
                    ));
                }
                external = Some(a);
            }
            "b" => {
                let (m, _) = need_dims()?;
                if b.is_some() {
                    return Err(parse_err(line, "duplicate `b`"));
                }
                let v = reals(line, rest)?;
                if v.len() != m {
                    return Err(parse_err(line, format!("b has {} entries, expected {m}", v.len())));
                }
                b = Some(v);
            }
            other => return Err(parse_err(line, format!("unknown keyword `{other}`"))),
        }
    }
    let end = last + 1;
    let (m, _) = dims.ok_or_else(|| parse_err(end, "missing `dims`"))?;
    let lambda = lambda.ok_or_else(|| parse_err(end, "missing `lambda`"))?;
    let b = b.ok_or_else(|| parse_err(end, "missing `b`"))?;
    let a = match external {
        Some(a) => a,
        None if rows.len() == m => Matrix::from_rows(&rows)?,
        None => return Err(parse_err(end, format!("{} of {m} rows given", rows.len()))),
    };
    LassoProblem::new(a, b, lambda).map_err(|e| parse_err(end, e.to_string()))
}

pub fn read_problem(path: impl AsRef<Path>) -> Result<LassoProblem> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_problem(&text, path.parent())
}

fn sci(v: f64) -> String {
    format!("{v:.16e}")
}

/// Render a problem in the text format, rows written out in full.
pub fn format_problem(problem: &LassoProblem) -> String {
    let a = problem.a();
    let mut out = format!("dims {} {}\nlambda {}\n", a.rows(), a.cols(), sci(problem.lambda()));
    for i in 0..a.rows() {
        let row: Vec<String> = a.row(i).iter().map(|&v| sci(v)).collect();
        out.push_str(&format!("row {}\n", row.join(" ")));
    }
    let b: Vec<String> = problem.b().iter().map(|&v| sci(v)).collect();
    out.push_str(&format!("b {}\n", b.join(" ")));
    out
}

pub fn format_solution(sol: &SparseSolution) -> String {
    let support: Vec<String> = sol.support.iter().map(|i| i.to_string()).collect();
    let z: Vec<String> = sol.z.iter().map(|&v| sci(v)).collect();
    format!(
        "objective {}\niterations {}\nconverged {}\nsupport {}\nz {}\n",
        sci(sol.objective),
        sol.iterations,
        sol.converged,
        support.join(" "),
        z.join(" ")
    )
}

pub fn parse_solution(text: &str) -> Result<SparseSolution> {
    let mut objective = None;
    let mut iterations = None;
    let mut converged = None;
    let mut support = None;
    let mut z = None;
    let mut last = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        last = line;
        let content = raw.trim();
        if content.is_empty() {
            continue;
        }
        let (head, rest) = content.split_once(' ').unwrap_or((content, ""));
        let fields: Vec<&str> = rest.split_whitespace().collect();
        match head {
            "objective" => objective = reals(line, &fields)?.first().copied(),
            "iterations" => {
                iterations = Some(rest.trim().parse().map_err(|_| parse_err(line, "bad iteration count"))?)
            }
            "converged" => {
                converged = Some(rest.trim().parse().map_err(|_| parse_err(line, "expected true or false"))?)
            }
            "support" => {
                support = Some(
                    fields
                        .iter()
                        .map(|f| f.parse().map_err(|_| parse_err(line, format!("bad index `{f}`"))))
                        .collect::<Result<Vec<usize>>>()?,
                )
            }
            "z" => z = Some(reals(line, &fields)?),
            other => return Err(parse_err(line, format!("unknown keyword `{other}`"))),
        }
    }
    let missing = |what: &str| parse_err(last + 1, format!("missing `{what}`"));
    Ok(SparseSolution {
        z: z.ok_or_else(|| missing("z"))?,
        objective: objective.ok_or_else(|| missing("objective"))?,
        iterations: iterations.ok_or_else(|| missing("iterations"))?,
        converged: converged.ok_or_else(|| missing("converged"))?,
        support: support.ok_or_else(|| missing("support"))?,
    })
}

/// One-line summary printed by the solver command.
pub fn summary_line(sol: &SparseSolution) -> String {
    format!(
        "objective={} iterations={} converged={} support={:?}",
        sci(sol.objective),
        sol.iterations,
        sol.converged,
        sol.support
    )
}
