//! `key = value` text files used for configs and manifests.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key-value document. Keys are written back in sorted order so that
/// identical contents always serialize to identical bytes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvDoc {
    origin: String,
    entries: BTreeMap<String, String>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                origin: origin.to_string(),
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    origin: origin.to_string(),
                    line: i + 1,
                    msg: "empty key".into(),
                });
            }
            entries.insert(key.to_string(), v.trim().to_string());
        }
        Ok(Self {
            origin: origin.to_string(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: Display,
    {
        self.entries
            .get(key)
            .map(|raw| {
                raw.parse::<V>().map_err(|e| {
                    Error::Config(format!("{}: `{key}` = `{raw}`: {e}", self.origin))
                })
            })
            .transpose()
    }

    pub fn require<V: FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("{}: missing key `{key}`", self.origin)))
    }

    /// Overwrites `*slot` when `key` is present.
    pub fn update<V: FromStr>(&self, key: &str, slot: &mut V) -> Result<()>
    where
        V::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list of values.
    pub fn get_list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>>
    where
        V::Err: Display,
    {
        let Some(raw) = self.entries.get(key) else {
            return Ok(None);
        };
        raw.split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<V>().map_err(|e| {
                    Error::Config(format!("{}: `{key}` item `{s}`: {e}", self.origin))
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

impl Display for KvDoc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Formats a list as comma-separated text.
pub fn join<V: Display>(items: &[V]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}
