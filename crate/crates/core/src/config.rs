//! Flat `section.key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique;
//! a repeated key is an error rather than a silent override.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses configuration text into `(key, value)` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k}", no + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Renders pairs as configuration text, one per line.
pub fn render_pairs(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub(crate) fn value<V: FromStr>(key: &str, v: &str) -> Result<V>
where
    V::Err: Display,
{
    v.parse().map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

pub(crate) fn list<V: FromStr>(key: &str, v: &str) -> Result<Vec<V>>
where
    V::Err: Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|item| value(key, item.trim())).collect()
}

pub(crate) fn join<V: Display>(items: &[V]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}
