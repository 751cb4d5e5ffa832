//! Line-oriented `section.key = value` run configuration.
//!
//! A command starts from its defaults, then applies a config file, then
//! `--set` overrides. Keys not among the defaults are rejected. The resolved
//! config is written next to every run's outputs and re-running from it
//! reproduces the run.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn with_defaults(defaults: &[(&str, &str)]) -> Self {
        RunConfig { entries: defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }

    /// `section.key = value` lines; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {}: expected key = value", i + 1)))?;
            let k = k.trim();
            if !k.contains('.') {
                return Err(Error::Format(format!("config line {}: key {k:?} needs a section", i + 1)));
            }
            out.push((k.to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn add_default(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.entries.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Usage(format!("unknown config key {key}"))),
        }
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in Self::parse(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        self.apply_text(&text)
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Usage(format!("--set expects key=value, got {kv:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn str(&self, key: &str) -> &str {
        self.entries.get(key).map(String::as_str).unwrap_or_else(|| panic!("no default for {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.str(key);
        v.parse().map_err(|_| Error::Usage(format!("bad value {v:?} for {key}")))
    }

    /// Non-empty value of a required path-like key.
    pub fn required(&self, key: &str) -> Result<&str> {
        match self.str(key) {
            "" => Err(Error::Usage(format!("{key} is required"))),
            v => Ok(v),
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of the resolved text without
    /// `io.out`, so the same computation hashes alike wherever it is written.
    pub fn hash(&self) -> String {
        let text: String =
            self.entries.iter().filter(|(k, _)| *k != "io.out").map(|(k, v)| format!("{k} = {v}\n")).collect();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }
}
