//! Experiment configuration files and command-line overrides.
//!
//! A configuration is a TOML document whose tables mirror
//! [`ExperimentConfig`]. Every key is optional; anything missing takes the
//! library default. Unknown keys are rejected. `--set a.b.c=value` edits the
//! document before it is interpreted, so overrides go through exactly the
//! same validation as the file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use cadis::engine::ExperimentConfig;
use toml::{Table, Value};

/// Parse the right-hand side of an override as a TOML value, falling back to
/// a bare string so `--set algorithm=fed-avg` needs no quoting.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Apply one `dotted.key=value` override to `doc`.
pub fn apply_override(doc: &mut Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not of the form key=value");
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty component");
    }
    let (last, parents) = path.split_last().expect("split yields at least one part");
    let mut table = doc;
    for part in parents {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => bail!("override `{key}`: `{part}` is not a table"),
        };
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Build a validated configuration from an optional file plus overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<Table>()
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    if let Some(seed) = seed {
        let seed = i64::try_from(seed).context("seed must fit in a signed 64-bit integer")?;
        doc.insert("seed".into(), Value::Integer(seed));
    }
    let config: ExperimentConfig = Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| anyhow::anyhow!("invalid configuration: {}", e.message()))?;
    config.validate().context("invalid configuration")?;
    Ok(config)
}

/// Fully expanded configuration, suitable for writing next to run outputs.
pub fn render_config(config: &ExperimentConfig) -> Result<String> {
    toml::to_string(config).context("serialising configuration")
}
