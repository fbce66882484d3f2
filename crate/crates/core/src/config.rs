//! Line-oriented `key=value` configuration: `#` starts a comment, blank
//! lines are skipped, later assignments override earlier ones.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            kv.set_assignment(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KeyValues::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies one `key=value` assignment.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("empty key in {assignment:?}")));
        }
        self.entries.insert(k.to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses `key` into `T` when present.
    pub fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| Error::Config(format!("{key}={v}: {e}")))
            })
            .transpose()
    }

    /// Overwrites `slot` when `key` is present.
    pub fn update<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.value(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|e| Error::Config(format!("{key}={v}: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Errors on any key outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        let unknown: Vec<&str> = self.keys().filter(|k| !known.contains(k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown configuration keys: {}",
                unknown.join(", ")
            )))
        }
    }

    /// Restricts to keys starting with `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> KeyValues {
        let p = format!("{prefix}.");
        KeyValues {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

/// Joins values with commas, the list syntax of [`KeyValues::list`].
pub fn join_list<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}
