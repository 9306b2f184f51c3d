//! Flat `key = value` text used for config files and checkpoint headers.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may not repeat.

use std::collections::HashSet;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!(
                "line {}: expected `key = value`, got `{line}`",
                n + 1
            ))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", n + 1)));
        }
        if !seen.insert(k.to_string()) {
            return Err(Error::config(format!(
                "line {}: duplicate key `{k}`",
                n + 1
            )));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn write_kv<K: AsRef<str>, V: Display>(pairs: &[(K, V)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{} = {v}\n", k.as_ref()))
        .collect()
}

/// Parse `value` for `key`, naming both in the error.
pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("invalid value `{value}` for `{key}`: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let text = "# c\nlayers = 2\n\nheads=4\n";
        let kv = parse_kv(text).unwrap();
        assert_eq!(
            kv,
            vec![("layers".into(), "2".into()), ("heads".into(), "4".into())]
        );
        assert_eq!(parse_kv(&write_kv(&kv)).unwrap(), kv);
        assert!(parse_kv("a = 1\na = 2").is_err());
        assert!(parse_kv("novalue")
            .unwrap_err()
            .to_string()
            .contains("line 1"));
        assert!(parse_value::<usize>("layers", "x").is_err());
    }
}
