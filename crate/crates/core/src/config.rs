//! Flat `key=value` configuration text.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Every consumer claims the keys it understands; [`KvConfig::finish`]
//! rejects whatever is left so typos surface as errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, (String, usize)>,
    claimed: std::collections::BTreeSet<String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(key.clone(), (v.trim().to_string(), n + 1)).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        Ok(Self {
            entries,
            claimed: Default::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parse `key` if present, marking it as consumed.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let Some((v, line)) = self.entries.get(key) else {
            return Ok(None);
        };
        self.claimed.insert(key.to_string());
        v.parse()
            .map(Some)
            .map_err(|e| Error::Config(format!("line {line}: bad value for {key}: {e}")))
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(raw) = self.take::<String>(key)? else {
            return Ok(None);
        };
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| Error::Config(format!("bad list entry `{s}` for {key}: {e}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Error on any key nobody claimed.
    pub fn finish(self) -> Result<()> {
        let unknown: Vec<String> = self
            .entries
            .iter()
            .filter(|(k, _)| !self.claimed.contains(*k))
            .map(|(k, (_, line))| format!("{k} (line {line})"))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

pub(crate) fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_flags_unknown_keys() {
        let mut kv = KvConfig::parse("# c\nlr = 0.001\nwidths=8, 16\n\nbogus=1\n").unwrap();
        assert_eq!(kv.take::<f64>("lr").unwrap(), Some(0.001));
        assert_eq!(kv.take_list::<usize>("widths").unwrap(), Some(vec![8, 16]));
        assert_eq!(kv.take_or("missing", 3usize).unwrap(), 3);
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KvConfig::parse("novalue\n").is_err());
        assert!(KvConfig::parse("a=1\na=2\n").is_err());
        let mut kv = KvConfig::parse("k=abc").unwrap();
        assert!(kv.take::<u32>("k").is_err());
    }
}
