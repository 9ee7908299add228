//! Flat `key = value` text files used for experiment configs and bundle
//! metadata. Blank lines and `#` comments are ignored; keys are unique.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                return Err(Error::Config(format!("line {}: bad key `{k}`", lineno + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
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

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`"))))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    /// Comma-separated list, e.g. `seeds = 0, 1, 2`.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`"))))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// `lo..hi`, inclusive on both ends.
    pub fn get_range(&self, key: &str) -> Result<Option<(usize, usize)>> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        let bad = || Error::Config(format!("`{key}`: expected `lo..hi`, got `{v}`"));
        let (lo, hi) = v.split_once("..").ok_or_else(bad)?;
        Ok(Some((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?)))
    }

    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

impl fmt::Display for FlatConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_lists_and_ranges() {
        let c = FlatConfig::parse("# header\nepochs = 3 # trailing\n\nseeds = 0, 1,2\nband = 25..32\n").unwrap();
        assert_eq!(c.require::<usize>("epochs").unwrap(), 3);
        assert_eq!(c.get_list::<u64>("seeds").unwrap().unwrap(), vec![0, 1, 2]);
        assert_eq!(c.get_range("band").unwrap(), Some((25, 32)));
        assert_eq!(c.get_or("missing", 7usize).unwrap(), 7);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(FlatConfig::parse("no equals sign").is_err());
        assert!(FlatConfig::parse("a = 1\na = 2").is_err());
        assert!(FlatConfig::parse("bad key = 1").is_err());
        let c = FlatConfig::parse("epochs = many").unwrap();
        assert!(matches!(c.get::<usize>("epochs"), Err(Error::Config(_))));
        assert!(matches!(c.reject_unknown(&["seed"]), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_through_text() {
        let mut c = FlatConfig::new();
        c.set("lambda", 0.1);
        c.set("form", "implementation");
        assert_eq!(FlatConfig::parse(&c.to_string()).unwrap(), c);
    }
}
