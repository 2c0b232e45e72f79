//! The `key = value` text format used by config files and checkpoint headers.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    /// 1-based source line, 0 for entries not read from text.
    pub line: usize,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// Parses one entry per line. Blank lines and lines starting with `#` are
/// skipped; duplicate keys are an error.
pub fn parse_kv(text: &str) -> Result<Vec<KvEntry>> {
    let mut out: Vec<KvEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let Some((k, v)) = s.split_once('=') else {
            return Err(Error::Config(format!("line {line}: expected key=value, got {s:?}")));
        };
        let (key, value) = (k.trim(), v.trim());
        if !valid_key(key) {
            return Err(Error::Config(format!("line {line}: invalid key {key:?}")));
        }
        if value.is_empty() {
            return Err(Error::Config(format!("line {line}: empty value for {key}")));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config(format!(
                "line {line}: duplicate key {key} (first set on line {})",
                prev.line
            )));
        }
        out.push(KvEntry {
            key: key.to_string(),
            value: value.to_string(),
            line,
        });
    }
    Ok(out)
}

/// Splits a `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<KvEntry> {
    let Some((k, v)) = s.split_once('=') else {
        return Err(Error::Config(format!("override {s:?} is not key=value")));
    };
    let (key, value) = (k.trim(), v.trim());
    if !valid_key(key) || value.is_empty() {
        return Err(Error::Config(format!("malformed override {s:?}")));
    }
    Ok(KvEntry {
        key: key.to_string(),
        value: value.to_string(),
        line: 0,
    })
}

pub fn format_kv<K: Display, V: Display>(entries: impl IntoIterator<Item = (K, V)>) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(&format!("{k}={v}\n"));
    }
    s
}

/// Parses `value` as a `T`, naming the key on failure.
pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {value:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_comments_and_spaces() {
        let e = parse_kv("# run\n\n d_model = 64 \nlr=1e-4\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].key.as_str(), e[0].value.as_str(), e[0].line), ("d_model", "64", 3));
        assert_eq!(e[1].value, "1e-4");
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(parse_kv("novalue\n").is_err());
        assert!(parse_kv("a=1\na=2\n").is_err());
        assert!(parse_kv("bad key=1\n").is_err());
        assert!(parse_kv("k=\n").is_err());
    }

    #[test]
    fn overrides() {
        assert_eq!(parse_override("epochs=1").unwrap().value, "1");
        assert!(parse_override("epochs").is_err());
    }

    #[test]
    fn value_errors_name_the_key() {
        let err = parse_value::<usize>("epochs", "ten").unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
        assert!(parse_bool("x", "maybe").is_err());
    }
}
