//! Line-oriented `key = value` configuration files.
//!
//! `#` starts a comment, blank lines are skipped, repeated keys form lists.
//! Keys map one-to-one onto the command's long flags; unknown keys are
//! errors. Values from the command line take precedence for single-valued
//! flags (they are injected after the file's values).

use anyhow::{bail, Context, Result};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse(text: &str) -> Result<Vec<ConfigEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected 'key = value', got '{raw}'", i + 1);
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        out.push(ConfigEntry {
            key: key.to_string(),
            value: value.to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<ConfigEntry>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Turn config entries into `--key value` tokens, verifying each key
/// against the known long flags of the subcommand.
pub fn to_args(entries: &[ConfigEntry], known_flags: &[String]) -> Result<Vec<String>> {
    let mut args = Vec::new();
    for e in entries {
        let flag = e.key.replace('_', "-");
        if !known_flags.contains(&flag) {
            bail!(
                "config line {}: unknown key '{}' (known: {})",
                e.line,
                e.key,
                known_flags.join(", ")
            );
        }
        args.push(format!("--{flag}"));
        args.push(e.value.clone());
    }
    Ok(args)
}
