//! Run reports: a JSON document and a plain-text summary, both derived only
//! from the resolved config and the run's results so they regenerate
//! byte-identically.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::runconfig::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// `"<"`, `"<="`, `">"` or `">="`.
    pub relation: String,
    pub pass: bool,
}

impl Check {
    pub fn new(name: &str, value: f64, relation: &str, threshold: f64) -> Self {
        let pass = match relation {
            "<" => value < threshold,
            "<=" => value <= threshold,
            ">" => value > threshold,
            ">=" => value >= threshold,
            _ => false,
        };
        Check { name: name.into(), value, threshold, relation: relation.into(), pass }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub command: String,
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    pub results: Value,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn new(command: &str, config: &RunConfig, results: Value, checks: Vec<Check>) -> Self {
        Report {
            command: command.into(),
            config_hash: config.hash(),
            config: config.entries().clone(),
            results,
            checks,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} (config {})\n", self.command, self.config_hash);
        if let Some(seed) = self.config.iter().find(|(k, _)| k.ends_with(".seed")) {
            s.push_str(&format!("seed {} = {}\n", seed.0, seed.1));
        }
        if let Value::Object(map) = &self.results {
            for (k, v) in map {
                if !v.is_array() && !v.is_object() {
                    s.push_str(&format!("  {k}: {v}\n"));
                }
            }
        }
        for c in &self.checks {
            let verdict = if c.pass { "PASS" } else { "FAIL" };
            s.push_str(&format!("  {verdict} {}: {} {} {}\n", c.name, c.value, c.relation, c.threshold));
        }
        s
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let put = |name: &str, text: &str| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("report.json", &self.to_json())?;
        put("summary.txt", &self.summary())
    }
}
