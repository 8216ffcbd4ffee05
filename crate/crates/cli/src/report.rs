//! Report output: `<name>.json`, `<name>.csv` and the invariant checks that
//! decide the exit code.

use std::path::Path;

use anyhow::{Context, Result};
use serde_json::{json, Value};

#[derive(Debug, Default)]
pub struct Violations {
    pub messages: Vec<String>,
}

impl Violations {
    pub fn check(&mut self, ok: bool, msg: impl Into<String>) {
        if !ok {
            self.messages.push(msg.into());
        }
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

pub struct Report {
    pub name: &'static str,
    pub body: Value,
    pub csv: String,
    pub violations: Violations,
}

impl Report {
    pub fn new(name: &'static str, body: Value, csv: String, violations: Violations) -> Self {
        Report { name, body, csv, violations }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let doc = json!({
            "report": self.body,
            "invariants_ok": self.violations.is_empty(),
            "violations": self.violations.messages,
        });
        let jp = dir.join(format!("{}.json", self.name));
        std::fs::write(&jp, serde_json::to_string_pretty(&doc)?).with_context(|| jp.display().to_string())?;
        let cp = dir.join(format!("{}.csv", self.name));
        std::fs::write(&cp, &self.csv).with_context(|| cp.display().to_string())?;
        Ok(())
    }
}
