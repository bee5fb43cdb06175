//! Plain-text `key = value` configuration files.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Some
//! keys (scene primitives, cameras, sweeps) may repeat; scalar keys may not.

use std::collections::BTreeSet;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

impl Entry {
    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::Config {
            line: self.line,
            key: self.key.clone(),
            message: message.into(),
        }
    }

    pub fn parse<T: FromStr>(&self) -> Result<T> {
        self.value
            .parse()
            .map_err(|_| self.error(format!("cannot parse `{}`", self.value)))
    }

    /// Whitespace-separated fields.
    pub fn fields(&self) -> Vec<&str> {
        self.value.split_whitespace().collect()
    }

    /// Exactly `n` whitespace-separated numbers.
    pub fn numbers(&self, n: usize) -> Result<Vec<f64>> {
        let f = self.fields();
        if f.len() != n {
            return Err(self.error(format!("expected {n} numbers, found {} fields", f.len())));
        }
        f.iter()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| self.error(format!("`{s}` is not a finite number")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: Vec<Entry>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: i + 1,
                    key: line.to_string(),
                    message: "expected `key = value`".into(),
                });
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config {
                    line: i + 1,
                    key: String::new(),
                    message: "empty key".into(),
                });
            }
            entries.push(Entry {
                line: i + 1,
                key: key.to_string(),
                value: v.trim().to_string(),
            });
        }
        Ok(KvConfig { entries })
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// All entries for a repeatable key, in file order.
    pub fn all(&self, key: &str) -> Vec<&Entry> {
        self.entries.iter().filter(|e| e.key == key).collect()
    }

    /// The single entry for a scalar key.
    pub fn get(&self, key: &str) -> Result<Option<&Entry>> {
        let mut found = self.entries.iter().filter(|e| e.key == key);
        let first = found.next();
        if let Some(dup) = found.next() {
            return Err(dup.error("duplicate key"));
        }
        Ok(first)
    }

    pub fn require(&self, key: &str) -> Result<&Entry> {
        self.get(key)?.ok_or_else(|| Error::Config {
            line: 0,
            key: key.to_string(),
            message: "missing required key".into(),
        })
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key)? {
            Some(e) => e.parse(),
            None => Ok(default),
        }
    }

    /// Rejects keys outside `known`, naming the first offending line.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        let known: BTreeSet<&str> = known.iter().copied().collect();
        match self.entries.iter().find(|e| !known.contains(e.key.as_str())) {
            Some(e) => Err(e.error("unknown key")),
            None => Ok(()),
        }
    }
}
