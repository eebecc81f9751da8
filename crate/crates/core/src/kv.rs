//! Flat `key=value` text files, used for configs and manifests.
//!
//! One pair per line. Blank lines and lines starting with `#` are skipped.
//! The key ends at the first `=`; surrounding whitespace is trimmed from
//! both sides. Keys are unique.

use std::fmt::Write as _;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: IndexMap<String, String>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = IndexMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected key=value, got {line:?}"),
                });
            };
            let key = key.trim();
            if !valid_key(key) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("invalid key {key:?}"),
                });
            }
            if entries
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(Self { entries })
    }

    /// Inserts or replaces, keeping the original position of replaced keys.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        assert!(valid_key(key), "invalid key {key:?}");
        let value = value.to_string();
        assert!(
            !value.contains('\n') && value.trim() == value,
            "value for {key} would not round-trip"
        );
        self.entries.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("bad value for {key}: {raw:?}")))
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.parse_value(key),
        }
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

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_comments_blanks_and_equals_in_values() {
        let m = KvMap::parse("# run\n\nregime = dann\npath=a=b\n").unwrap();
        assert_eq!(m.get("regime"), Some("dann"));
        assert_eq!(m.get("path"), Some("a=b"));
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn rejects_duplicates_and_missing_separator() {
        assert!(matches!(
            KvMap::parse("a=1\na=2"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(KvMap::parse("a"), Err(Error::Parse { line: 1, .. })));
        assert!(KvMap::parse("bad key=1").is_err());
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(pairs in proptest::collection::btree_map(
            "[a-z][a-z0-9_.]{0,8}", "[!-~]([ -~]{0,10}[!-~])?", 0..8)) {
            let mut m = KvMap::new();
            for (k, v) in &pairs {
                m.set(k, v);
            }
            let back = KvMap::parse(&m.render()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
