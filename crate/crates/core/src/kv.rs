//! Flat `key = value` text, used for run configs and checkpoint config snapshots.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Sorted key-value map; serialization is byte-stable.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines. `#` starts a comment line; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, message: format!("expected `key = value`, got {line:?}") })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Parse { line: i + 1, message: "empty key".into() });
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Parse { line: i + 1, message: format!("duplicate key {k:?}") });
            }
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    /// Typed lookup; a present but malformed value is an error.
    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::validation(format!("bad value for {key}: {v:?} ({e})"))))
            .transpose()
    }

    /// Typed lookup that fails when the key is absent.
    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.parsed(key)?.ok_or_else(|| Error::validation(format!("missing key {key}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_typed_access() {
        let m = KvMap::parse("# comment\n b = 2\na=hello world \n\nc = 0.5\n").unwrap();
        assert_eq!(m.to_text(), "a = hello world\nb = 2\nc = 0.5\n");
        assert_eq!(KvMap::parse(&m.to_text()).unwrap(), m);
        assert_eq!(m.require::<u32>("b").unwrap(), 2);
        assert_eq!(m.parsed::<f64>("c").unwrap(), Some(0.5));
        assert_eq!(m.parsed::<f64>("zz").unwrap(), None);
        assert!(m.parsed::<u32>("a").is_err());
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        assert!(matches!(KvMap::parse("a = 1\nnonsense\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(KvMap::parse("a = 1\na = 2\n"), Err(Error::Parse { line: 2, .. })));
    }
}
