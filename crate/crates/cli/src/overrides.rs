//! `--set key=value` edits applied to a scenario config.
//!
//! Keys are dotted paths into the config table (`safeguard.mu`, `constraints.0.ks0`); `*` in an
//! array position applies to every element. A few shorthands map onto common paths. The edited
//! table is deserialized again, so misspelled keys are rejected by the config's own schema.

use anyhow::{anyhow, bail, Context, Result};
use safeguard_core::simkit::ScenarioConfig;
use toml::{Table, Value};

/// Shorthand keys and the paths they stand for.
const SHORTHANDS: &[(&str, &str)] = &[
    ("Ks", "constraints.*.ks0"),
    ("ks", "constraints.*.ks0"),
    ("fc", "control_frequency"),
    ("T", "horizon"),
    ("mu", "safeguard.mu"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

impl std::str::FromStr for Override {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{s}` is not of the form key=value"))?;
        let key = key.trim();
        if key.is_empty() {
            bail!("override `{s}` has an empty key");
        }
        Ok(Override {
            key: key.to_string(),
            value: parse_value(raw.trim()),
        })
    }
}

/// A TOML literal when it parses as one, otherwise a bare string (`fault=biased-sinusoid`).
pub fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn expand(key: &str) -> &str {
    SHORTHANDS.iter().find(|(k, _)| *k == key).map_or(key, |(_, path)| path)
}

pub fn apply(cfg: &ScenarioConfig, overrides: &[Override]) -> Result<ScenarioConfig> {
    if overrides.is_empty() {
        return Ok(cfg.clone());
    }
    let mut root = Value::try_from(cfg).context("serializing scenario config")?;
    for o in overrides {
        let path: Vec<&str> = expand(&o.key).split('.').collect();
        set(&mut root, &path, &o.value).with_context(|| format!("invalid override key `{}`", o.key))?;
    }
    root.try_into()
        .map_err(|e: toml::de::Error| anyhow!("override rejected: {}", e.message()))
}

fn set(node: &mut Value, path: &[&str], value: &Value) -> Result<()> {
    let (head, rest) = path.split_first().ok_or_else(|| anyhow!("empty path"))?;
    match node {
        Value::Table(table) => {
            if rest.is_empty() {
                table.insert(head.to_string(), value.clone());
                return Ok(());
            }
            let child = table.get_mut(*head).ok_or_else(|| anyhow!("no field `{head}`"))?;
            set(child, rest, value)
        }
        Value::Array(items) => {
            if *head == "*" {
                if items.is_empty() {
                    bail!("`*` matches nothing");
                }
                return items.iter_mut().try_for_each(|item| assign(item, rest, value));
            }
            let index: usize = head.parse().map_err(|_| anyhow!("`{head}` is not an array index"))?;
            let len = items.len();
            let item = items
                .get_mut(index)
                .ok_or_else(|| anyhow!("index {index} out of range for {len} elements"))?;
            assign(item, rest, value)
        }
        _ => bail!("`{head}` descends into a scalar"),
    }
}

fn assign(node: &mut Value, rest: &[&str], value: &Value) -> Result<()> {
    if rest.is_empty() {
        *node = value.clone();
        Ok(())
    } else {
        set(node, rest, value)
    }
}
