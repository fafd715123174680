//! Report envelope and rendering.
//!
//! JSON output is byte-stable for a given command, config, and seed: struct
//! fields serialize in declaration order, maps are `BTreeMap`s, and floats
//! only appear in fields documented as non-deterministic (bench wall-clock
//! timing). Table output is for people and carries no stability promise.

use anyhow::{Context, Result};
use serde::Serialize;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Table,
    Json,
}

impl FromStr for OutputFormat {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(OutputFormat::Table),
            "json" => Ok(OutputFormat::Json),
            other => anyhow::bail!("unknown format {other:?}; expected table or json"),
        }
    }
}

/// Envelope every command wraps its body in. `rng` names the generator so
/// a report is reproducible from its own header.
#[derive(Debug, Serialize)]
pub struct Report<T: Serialize> {
    pub command: &'static str,
    pub rng: &'static str,
    pub seed: u64,
    pub body: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(command: &'static str, seed: u64, body: T) -> Self {
        Self { command, rng: "chacha8", seed, body }
    }

    pub fn to_json(&self) -> String {
        let mut text =
            serde_json::to_string_pretty(self).expect("report serialization cannot fail");
        text.push('\n');
        text
    }
}

/// Write to `--out PATH`, or stdout when no path was given.
pub fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing report {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Group digits in threes, the way the published table prints volumes.
pub fn commas(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}
