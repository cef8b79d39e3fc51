//! Plain-text `key=value` files: one pair per line, `#` starts a comment.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type KvMap = BTreeMap<String, String>;

pub fn parse(text: &str) -> Result<KvMap> {
    let mut map = KvMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value", n + 1)))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Format(format!("line {}: empty key", n + 1)));
        }
        if map.insert(key.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Format(format!("line {}: duplicate key '{key}'", n + 1)));
        }
    }
    Ok(map)
}

/// Sorted by key, so equal maps always serialize to equal bytes.
pub fn format(map: &KvMap) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn get<T: FromStr>(map: &KvMap, key: &str) -> Result<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::Format(format!("missing key '{key}'")))?;
    raw.parse()
        .map_err(|_| Error::Format(format!("bad value for '{key}': '{raw}'")))
}

pub fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn split<T: FromStr>(raw: &str) -> Result<Vec<T>> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad list element '{s}'")))
        })
        .collect()
}
