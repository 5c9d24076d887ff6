//! Plain-text `key = value` documents.
//!
//! Run configs, the roof cluster model, run manifests, and synthetic ground
//! truth all use this format: one `key = value` per line, `#` comments, keys
//! kept in insertion order on write so re-serialization is byte-stable.
//! Floats are written with Rust's shortest round-trip formatting, so a
//! written model reloads bit-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("line {0}: expected 'key = value', got {1:?}")]
    Malformed(usize, String),
    #[error("duplicate key {0:?} on line {1}")]
    DuplicateKey(String, usize),
    #[error("missing required key {0:?}")]
    MissingKey(String),
    #[error("key {key:?}: cannot parse {value:?} as {ty}")]
    BadValue {
        key: String,
        value: String,
        ty: &'static str,
    },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// An ordered key-value document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    entries: Vec<(String, String)>,
    index: BTreeMap<String, usize>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut doc = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(KvError::Malformed(i + 1, raw.to_string()));
            };
            let key = k.trim().to_string();
            if doc.index.contains_key(&key) {
                return Err(KvError::DuplicateKey(key, i + 1));
            }
            doc.set(key, v.trim().to_string());
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self, KvError> {
        let text = std::fs::read_to_string(path).map_err(|source| KvError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.index.get(&key) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(key.clone(), self.entries.len());
                self.entries.push((key, value));
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.index.get(key).map(|&i| self.entries[i].1.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, KvError> {
        self.get(key).ok_or_else(|| KvError::MissingKey(key.to_string()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str, ty: &'static str) -> Result<T, KvError> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| KvError::BadValue {
            key: key.to_string(),
            value: raw.to_string(),
            ty,
        })
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, KvError> {
        self.parse_value(key, "f64")
    }

    pub fn get_u64(&self, key: &str) -> Result<u64, KvError> {
        self.parse_value(key, "u64")
    }

    pub fn get_usize(&self, key: &str) -> Result<usize, KvError> {
        self.parse_value(key, "usize")
    }

    pub fn get_bool(&self, key: &str) -> Result<bool, KvError> {
        let raw = self.require(key)?;
        match raw {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(KvError::BadValue {
                key: key.to_string(),
                value: raw.to_string(),
                ty: "bool",
            }),
        }
    }

    /// Optional lookups: absent key is None, present-but-bad is an error.
    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>, KvError> {
        self.get(key).is_some().then(|| self.get_f64(key)).transpose()
    }

    pub fn opt_u64(&self, key: &str) -> Result<Option<u64>, KvError> {
        self.get(key).is_some().then(|| self.get_u64(key)).transpose()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), KvError> {
        std::fs::write(path, self.to_text()).map_err(|source| KvError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_order_and_floats() {
        let mut doc = KvDoc::new();
        doc.set("zeta", 0.1f64 + 0.2f64);
        doc.set("alpha", "hello world");
        doc.set("n", 42u64);
        let text = doc.to_text();
        let back = KvDoc::parse(&text).unwrap();
        assert_eq!(back.get_f64("zeta").unwrap(), 0.1 + 0.2);
        assert_eq!(back.get("alpha"), Some("hello world"));
        assert_eq!(back.get_u64("n").unwrap(), 42);
        assert_eq!(back.to_text(), text);
        assert_eq!(doc.keys().collect::<Vec<_>>(), vec!["zeta", "alpha", "n"]);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let doc = KvDoc::parse("# header\n\n a = 1 \n# trailing\n").unwrap();
        assert_eq!(doc.get("a"), Some("1"));
    }

    #[test]
    fn errors_are_specific() {
        assert!(matches!(KvDoc::parse("nonsense"), Err(KvError::Malformed(1, _))));
        assert!(matches!(
            KvDoc::parse("a = 1\na = 2"),
            Err(KvError::DuplicateKey(_, 2))
        ));
        let doc = KvDoc::parse("a = x").unwrap();
        assert!(matches!(doc.get_f64("a"), Err(KvError::BadValue { .. })));
        assert!(matches!(doc.get_f64("b"), Err(KvError::MissingKey(_))));
    }
}
