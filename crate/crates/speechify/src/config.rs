//! Flat `key = value` configuration files.
//!
//! Keys name fields of the target structure. Nested fields are reached
//! with dots (`loss_hp.eta`) or, when unambiguous, by their bare name
//! (`eta`). Values are read as JSON when they parse (numbers, booleans,
//! lists) and as plain strings otherwise. `#` starts a comment.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{AppError, Result};
use crate::io;

/// Parsed `(line number, key, value)` entries.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(usize, String, Value)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| AppError::parse(path, i + 1, format!("expected key = value, got {line:?}")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(AppError::parse(path, i + 1, "empty key"));
        }
        let value = value.trim();
        let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        out.push((i + 1, key.to_string(), parsed));
    }
    Ok(out)
}

/// Every dotted path to a leaf or object in `value`.
fn paths(value: &Map<String, Value>, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in value {
        let p = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        if let Value::Object(inner) = v {
            paths(inner, &p, out);
        }
        out.push(p);
    }
}

fn resolve(root: &Map<String, Value>, key: &str) -> std::result::Result<String, String> {
    let mut all = Vec::new();
    paths(root, "", &mut all);
    if all.iter().any(|p| p == key) {
        return Ok(key.to_string());
    }
    let suffix = format!(".{key}");
    let hits: Vec<&String> = all.iter().filter(|p| p.ends_with(&suffix)).collect();
    match hits.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(format!("unknown key {key:?}")),
        many => Err(format!(
            "ambiguous key {key:?}; use one of {}",
            many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )),
    }
}

fn set_path(root: &mut Map<String, Value>, path: &str, value: Value) {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().unwrap_or(path);
    let mut node = root;
    for p in parts {
        node = match node.get_mut(p) {
            Some(Value::Object(m)) => m,
            _ => return,
        };
    }
    node.insert(last.to_string(), value);
}

/// Apply `key = value` entries on top of `base`.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, pairs: &[(usize, String, Value)], path: &Path) -> Result<T> {
    let Value::Object(mut root) = serde_json::to_value(base)? else {
        return Err(AppError::Usage("configuration target is not a structure".into()));
    };
    for (line, key, value) in pairs {
        let full = resolve(&root, key).map_err(|msg| AppError::parse(path, *line, msg))?;
        let mut value = value.clone();
        if let Some(Value::Array(_)) = lookup(&root, &full) {
            value = match value {
                Value::Array(v) => Value::Array(v),
                Value::String(s) => Value::Array(
                    s.split(',')
                        .map(|x| {
                            let x = x.trim();
                            serde_json::from_str(x).unwrap_or_else(|_| Value::String(x.to_string()))
                        })
                        .collect(),
                ),
                single => Value::Array(vec![single]),
            };
        }
        set_path(&mut root, &full, value);
        serde_json::from_value::<T>(Value::Object(root.clone()))
            .map_err(|e| AppError::parse(path, *line, format!("{key}: {e}")))?;
    }
    Ok(serde_json::from_value(Value::Object(root))?)
}

fn lookup<'a>(root: &'a Map<String, Value>, path: &str) -> Option<&'a Value> {
    let mut parts = path.split('.');
    let mut node = root.get(parts.next()?)?;
    for p in parts {
        node = node.get(p)?;
    }
    Some(node)
}

/// Read a config file and apply it on top of `base`.
pub fn load_overlay<T: Serialize + DeserializeOwned>(base: &T, path: &Path) -> Result<T> {
    let text = io::read_text(path)?;
    let pairs = parse_pairs(&text, path)?;
    overlay(base, &pairs, path)
}
