//! Flat `key = value` text used by spec and config files.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key/value lines. Every key must be consumed with [`KeyValues::take`]
/// or friends; [`KeyValues::finish`] reports leftovers as errors.
#[derive(Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
    errors: Vec<String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                kv.errors.push(format!("line {}: expected key = value, got `{line}`", lineno + 1));
                continue;
            };
            let key = k.trim().to_string();
            if kv.entries.insert(key.clone(), (v.trim().to_string(), lineno + 1)).is_some() {
                kv.errors.push(format!("line {}: duplicate key `{key}`", lineno + 1));
            }
        }
        Ok(kv)
    }

    /// Insert or replace `key`.
    pub fn set(&mut self, key: &str, value: &str) {
        let line = self.entries.get(key).map_or(0, |(_, l)| *l);
        self.entries.insert(key.to_string(), (value.to_string(), line));
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    /// Parse and remove `key`, recording a parse failure.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Option<T> {
        let (raw, line) = self.entries.remove(key)?;
        match raw.parse() {
            Ok(v) => Some(v),
            Err(_) => {
                self.errors.push(format!("line {line}: cannot parse `{raw}` for `{key}`"));
                None
            }
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> T {
        self.take(key).unwrap_or(default)
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Option<Vec<T>> {
        let (raw, line) = self.entries.remove(key)?;
        let parsed: std::result::Result<Vec<T>, _> = raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect();
        match parsed {
            Ok(v) => Some(v),
            Err(_) => {
                self.errors.push(format!("line {line}: cannot parse list `{raw}` for `{key}`"));
                None
            }
        }
    }

    /// Record a semantic error found by the caller.
    pub fn error(&mut self, msg: impl Into<String>) {
        self.errors.push(msg.into());
    }

    /// Unknown keys are errors.
    pub fn finish(mut self) -> Result<()> {
        for (key, (_, line)) in &self.entries {
            self.errors.push(format!("line {line}: unknown key `{key}`"));
        }
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(self.errors))
        }
    }
}

/// Parse a `HxW` pair.
pub fn parse_grid(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X'])?;
    Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
}
