//! Flat configuration grammar.
//!
//! One assignment per line, `section.key = value`, where the key path may
//! continue into nested blocks (`model.cell.width = 9`). `#` starts a comment.
//! Values are numbers, `true`/`false`, bare words (enum tags, paths), `none`
//! for an absent optional block, or bracketed lists `[a, b, c]`.
//!
//! A config file is resolved against the defaults of a typed document: every
//! key must name an existing field, each field may be assigned once, and all
//! problems are reported together. The resolved document is rendered back in
//! canonical form (sorted keys, every field explicit) and hashed with SHA-256
//! for provenance. Run-level keys such as the output directory are left out
//! of the hash.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Number, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Section holding the run-level keys that are not part of a driver config.
pub const RUN_SECTION: &str = "run";
/// Keys that every run config must assign explicitly.
pub const REQUIRED_KEYS: [&str; 1] = ["run.output_dir"];

/// One `key = value` line of a config file.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Split a config text into assignments; syntax errors are collected rather
/// than returned one at a time.
pub fn parse_assignments(text: &str) -> Result<Vec<Assignment>> {
    let mut out = Vec::new();
    let mut problems = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            problems.push(format!("line {line}: expected `section.key = value`"));
            continue;
        };
        let key = key.trim();
        let value = value.trim();
        if !key.contains('.') || key.split('.').any(|p| !valid_ident(p)) {
            problems.push(format!("line {line}: malformed key `{key}`"));
            continue;
        }
        if value.is_empty() {
            problems.push(format!("line {line}: `{key}` has no value"));
            continue;
        }
        out.push(Assignment {
            line,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Config(problems))
    }
}

fn valid_ident(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// A config file resolved against typed defaults.
#[derive(Clone, Debug)]
pub struct Resolved<T> {
    pub value: T,
    /// Directory receiving every artifact of the run.
    pub output_dir: String,
    /// Canonical rendering of the full resolved config.
    pub canonical: String,
    /// Hex SHA-256 of `canonical` without the `run` section, so that the
    /// hash identifies everything that affects results.
    pub sha256: String,
}

/// Resolve `text` against `defaults`, whose top-level scalar fields live in
/// `section` and whose nested blocks are sections of their own.
pub fn resolve<T>(text: &str, section: &str, defaults: &T) -> Result<Resolved<T>>
where
    T: Serialize + DeserializeOwned,
{
    let assignments = parse_assignments(text)?;
    let mut doc = Map::new();
    let mut run = Map::new();
    run.insert("output_dir".into(), Value::String(String::new()));
    doc.insert(RUN_SECTION.into(), Value::Object(run));
    let body = serde_json::to_value(defaults)?;
    let Value::Object(fields) = body else {
        return Err(Error::InvalidArgument("config root must be a struct".into()));
    };
    let mut scalars = Map::new();
    for (k, v) in fields {
        if v.is_object() {
            doc.insert(k, v);
        } else {
            scalars.insert(k, v);
        }
    }
    if doc.contains_key(section) {
        return Err(Error::InvalidArgument(format!(
            "section `{section}` collides with a nested block"
        )));
    }
    doc.insert(section.into(), Value::Object(scalars));

    let mut problems = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for a in &assignments {
        if let Some(first) = seen.insert(a.key.clone(), a.line) {
            problems.push(format!(
                "line {}: `{}` already assigned on line {first}",
                a.line, a.key
            ));
            continue;
        }
        let path: Vec<&str> = a.key.split('.').collect();
        match lookup_mut(&mut doc, &path) {
            None => problems.push(format!("line {}: unknown key `{}`", a.line, a.key)),
            Some(slot) => match parse_value(&a.value, slot) {
                Ok(v) => *slot = v,
                Err(msg) => problems.push(format!("line {}: `{}`: {msg}", a.line, a.key)),
            },
        }
    }
    for key in REQUIRED_KEYS {
        if !seen.contains_key(key) {
            problems.push(format!("missing required key `{key}`"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }

    let output_dir = doc[RUN_SECTION]["output_dir"]
        .as_str()
        .unwrap_or_default()
        .to_string();
    let canonical = render(&doc);
    let mut body = doc;
    body.remove(RUN_SECTION);
    let Some(Value::Object(scalars)) = body.remove(section) else {
        unreachable!("section inserted above");
    };
    body.extend(scalars);
    let value: T = serde_json::from_value(Value::Object(body))
        .map_err(|e| Error::Config(vec![e.to_string()]))?;
    let hashed: String = canonical
        .lines()
        .filter(|l| !l.starts_with(&format!("{RUN_SECTION}.")))
        .flat_map(|l| [l, "\n"])
        .collect();
    let sha256 = hex::encode(Sha256::digest(hashed.as_bytes()));
    Ok(Resolved {
        value,
        output_dir,
        canonical,
        sha256,
    })
}

fn lookup_mut<'a>(doc: &'a mut Map<String, Value>, path: &[&str]) -> Option<&'a mut Value> {
    let (first, rest) = path.split_first()?;
    let mut cur = doc.get_mut(*first)?;
    for p in rest {
        cur = cur.as_object_mut()?.get_mut(*p)?;
    }
    Some(cur)
}

/// Parse `raw` into a value shaped like the default currently in `slot`.
fn parse_value(raw: &str, slot: &Value) -> std::result::Result<Value, String> {
    if raw == "none" && (slot.is_object() || slot.is_null()) {
        return Ok(Value::Null);
    }
    match slot {
        Value::Object(_) => Err("names a block; assign its fields or `none`".into()),
        Value::Array(items) => {
            let inner = raw
                .strip_prefix('[')
                .and_then(|r| r.strip_suffix(']'))
                .ok_or("expected a bracketed list")?;
            let template = items.first().cloned().unwrap_or(Value::Null);
            inner
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_value(s, &template))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        Value::Bool(_) => match raw {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(format!("expected true or false, got `{raw}`")),
        },
        Value::Number(n) if n.is_u64() => raw
            .parse::<u64>()
            .map(|u| Value::Number(u.into()))
            .map_err(|_| format!("expected a nonnegative integer, got `{raw}`")),
        Value::Number(n) => parse_number(raw, n.is_f64()),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Null => {
            if let Ok(v) = parse_number(raw, raw.contains(['.', 'e', 'E'])) {
                Ok(v)
            } else {
                parse_value(raw, &Value::String(String::new()))
            }
        }
    }
}

fn parse_number(raw: &str, float: bool) -> std::result::Result<Value, String> {
    if !float {
        if let Ok(u) = raw.parse::<u64>() {
            return Ok(Value::Number(u.into()));
        }
        if let Ok(i) = raw.parse::<i64>() {
            return Ok(Value::Number(i.into()));
        }
    }
    let f: f64 = raw
        .parse()
        .map_err(|_| format!("expected a number, got `{raw}`"))?;
    Number::from_f64(f)
        .map(Value::Number)
        .ok_or_else(|| format!("non-finite number `{raw}`"))
}

/// Sorted `key = value` lines for every leaf of `doc`.
fn render(doc: &Map<String, Value>) -> String {
    let mut lines = Vec::new();
    for (k, v) in doc {
        flatten(k, v, &mut lines);
    }
    lines.sort();
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                flatten(&format!("{prefix}.{k}"), child, out);
            }
        }
        other => out.push(format!("{prefix} = {}", scalar(other))),
    }
}

fn scalar(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => format_f64(f),
            _ => n.to_string(),
        },
        Value::Array(items) => {
            format!("[{}]", items.iter().map(scalar).collect::<Vec<_>>().join(", "))
        }
        other => other.to_string(),
    }
}

/// Shortest decimal that parses back to the same `f64`, always marked as a
/// float so that integral values keep their type on re-reading.
pub fn format_f64(f: f64) -> String {
    let s = format!("{f:?}");
    if s.contains(['.', 'e', 'E']) || !f.is_finite() {
        s
    } else {
        format!("{s}.0")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    struct Leaf {
        x: f64,
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    struct Inner {
        lr: f64,
        steps: usize,
        tag: String,
        opt: Option<Leaf>,
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    struct Doc {
        epochs: usize,
        seeds: Vec<u64>,
        flag: bool,
        inner: Inner,
    }

    fn defaults() -> Doc {
        Doc {
            epochs: 3,
            seeds: vec![0, 1],
            flag: false,
            inner: Inner {
                lr: 0.5,
                steps: 2,
                tag: "a".into(),
                opt: Some(Leaf { x: 1.0 }),
            },
        }
    }

    #[test]
    fn assignments_override_defaults() {
        let text = "run.output_dir = out\n# comment\nmain.epochs = 7 # trailing\n\
                    main.seeds = [4, 5, 6]\ninner.lr = 1e-3\ninner.tag = xyz\ninner.opt = none\n";
        let r = resolve(text, "main", &defaults()).unwrap();
        assert_eq!(r.value.epochs, 7);
        assert_eq!(r.value.seeds, vec![4, 5, 6]);
        assert_eq!(r.value.inner.lr, 1e-3);
        assert_eq!(r.value.inner.tag, "xyz");
        assert_eq!(r.value.inner.opt, None);
        assert_eq!(r.output_dir, "out");
        assert!(r.canonical.contains("inner.lr = 0.001\n"));
        assert!(r.canonical.contains("main.flag = false\n"));
    }

    #[test]
    fn every_problem_is_listed() {
        let text = "main.epochs = 2\nmain.bogus = 1\ninner.lr = fast\nmain.epochs = 3\nnovalue\n";
        let Err(Error::Config(p)) = resolve(text, "main", &defaults()) else {
            panic!("expected config error");
        };
        assert_eq!(p.len(), 1, "syntax errors stop before key checks: {p:?}");
        let text = "main.epochs = -2\nmain.bogus = 1\ninner.lr = fast\nmain.epochs = 3\n";
        let Err(Error::Config(p)) = resolve(text, "main", &defaults()) else {
            panic!("expected config error");
        };
        let joined = p.join("\n");
        assert!(joined.contains("`main.epochs`: expected a nonnegative integer"), "{joined}");
        assert!(joined.contains("main.bogus"), "{joined}");
        assert!(joined.contains("inner.lr"), "{joined}");
        assert!(joined.contains("already assigned"), "{joined}");
        assert!(joined.contains("run.output_dir"), "{joined}");
        assert_eq!(p.len(), 5);
    }

    #[test]
    fn canonical_form_resolves_to_itself() {
        let text = "run.output_dir = o\ninner.lr = 0.1\nmain.epochs = 9\n";
        let r = resolve(text, "main", &defaults()).unwrap();
        let again = resolve(&r.canonical, "main", &defaults()).unwrap();
        assert_eq!(again.canonical, r.canonical);
        assert_eq!(again.sha256, r.sha256);
        assert_eq!(again.value, r.value);
        assert_eq!(r.sha256.len(), 64);
        let moved = resolve(&text.replace("= o", "= elsewhere"), "main", &defaults()).unwrap();
        assert_eq!(moved.sha256, r.sha256);
        assert_ne!(moved.canonical, r.canonical);
    }

    #[test]
    fn integral_floats_stay_floats() {
        assert_eq!(format_f64(1.0), "1.0");
        assert_eq!(format_f64(1e-5), "1e-5");
        let text = "run.output_dir = o\ninner.lr = 2\n";
        let r = resolve(text, "main", &defaults()).unwrap();
        assert!(r.canonical.contains("inner.lr = 2.0\n"));
    }
}
