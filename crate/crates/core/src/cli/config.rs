//! Config files plus `--set key=value` overrides.
//!
//! The file (or the type's defaults when there is none) is read into a TOML
//! table, overrides are written into it by dotted path, and the result is
//! deserialized into the target type. Unknown keys are rejected there, since
//! every config type denies unknown fields.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::curate::CurationConfig;
use crate::degrade::PipelineConfig;
use crate::error::{Error, Result};
use crate::lbo::LboTrainConfig;
use crate::rescale::{ExportConfig, RescaleConfig};
use crate::train::TrainConfig;

use super::{BenchConfig, EvalConfig, InferConfig, ServeConfig};

/// A configuration a subcommand is driven by.
pub trait CommandConfig: Serialize + DeserializeOwned + Default {
    /// Keys that have no value by default, with what leaving them unset means.
    const UNSET: &'static [(&'static str, &'static str)] = &[];

    fn check(&self) -> Result<()> {
        Ok(())
    }
}

impl CommandConfig for PipelineConfig {
    const UNSET: &'static [(&'static str, &'static str)] = &[(
        "backend.binary",
        "with backend = \"ffmpeg\": $CELSR_FFMPEG, then ffmpeg on PATH",
    )];

    fn check(&self) -> Result<()> {
        self.validate()
    }
}

impl CommandConfig for TrainConfig {
    const UNSET: &'static [(&'static str, &'static str)] = &[("learning_rate", "2e-4 in stage 1, 1e-4 in stage 2")];

    fn check(&self) -> Result<()> {
        self.validate()
    }
}

impl CommandConfig for LboTrainConfig {
    fn check(&self) -> Result<()> {
        self.validate()
    }
}

impl CommandConfig for CurationConfig {
    const UNSET: &'static [(&'static str, &'static str)] = &[
        ("quality_plugin", "built-in gradient sharpness; a table with id, program, args"),
        ("motion_plugin", "built-in block-matching motion; a table with id, program, args"),
    ];

    fn check(&self) -> Result<()> {
        self.validate()
    }
}

impl CommandConfig for RescaleConfig {
    const UNSET: &'static [(&'static str, &'static str)] = &[("reference_frame", "the middle frame")];
}

impl CommandConfig for ExportConfig {}
impl CommandConfig for InferConfig {
    fn check(&self) -> Result<()> {
        if !(self.input_scale > 0.0 && self.input_scale <= 1.0) {
            return Err(Error::Config(format!("input_scale must be in (0, 1], got {}", self.input_scale)));
        }
        Ok(())
    }
}

impl CommandConfig for ServeConfig {
    const UNSET: &'static [(&'static str, &'static str)] = RescaleConfig::UNSET;
}

impl CommandConfig for EvalConfig {
    fn check(&self) -> Result<()> {
        if !self.niqe && self.plugins.is_empty() {
            return Err(Error::Config("evaluation needs at least one scorer".into()));
        }
        Ok(())
    }
}

impl CommandConfig for BenchConfig {
    fn check(&self) -> Result<()> {
        if self.height % 4 != 0 || self.width % 4 != 0 || self.trials < 5 {
            return Err(Error::Config(format!(
                "benchmark needs sizes divisible by 4 and at least 5 trials, got {}x{} x{}",
                self.height, self.width, self.trials
            )));
        }
        Ok(())
    }
}

fn to_table<T: Serialize>(v: &T) -> Table {
    Table::try_from(v).expect("config types serialize to a TOML table")
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = root;
    for p in path {
        let next = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match next {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{key}`: `{p}` is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn set_override(root: &mut Table, key: &str, value: Value) -> Result<()> {
    // Arrays of tables (`stage.6.crf`) need index steps, which the
    // plain table walk cannot express, so split at the first numeric part.
    let parts: Vec<&str> = key.split('.').collect();
    if let Some(pos) = parts.iter().position(|p| p.parse::<usize>().is_ok()) {
        if pos == 0 {
            return Err(Error::Config(format!("override `{key}` starts with an index")));
        }
        let idx: usize = parts[pos].parse().expect("checked numeric");
        let mut cur = &mut *root;
        for p in &parts[..pos - 1] {
            cur = match cur.get_mut(*p) {
                Some(Value::Table(t)) => t,
                _ => return Err(Error::Config(format!("override `{key}`: no table `{p}`"))),
            };
        }
        let arr = match cur.get_mut(parts[pos - 1]) {
            Some(Value::Array(a)) => a,
            _ => return Err(Error::Config(format!("override `{key}`: `{}` is not an array", parts[pos - 1]))),
        };
        let len = arr.len();
        let elem = arr
            .get_mut(idx)
            .ok_or_else(|| Error::Config(format!("override `{key}`: index {idx} out of {len}")))?;
        let rest = parts[pos + 1..].join(".");
        if rest.is_empty() {
            *elem = value;
            return Ok(());
        }
        return match elem {
            Value::Table(t) => set_override(t, &rest, value),
            _ => Err(Error::Config(format!("override `{key}`: element {idx} is not a table"))),
        };
    }
    set_path(root, key, value)
}

/// Reads `file` (or the defaults), applies `overrides` and validates.
pub fn resolve<T: CommandConfig>(file: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            toml::from_str::<Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => to_table(&T::default()),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        set_override(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let cfg: T = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
    cfg.check()?;
    Ok(cfg)
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::Array(a) if a.iter().any(Value::is_table) => {
            for (i, v) in a.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), v, out);
            }
        }
        v => out.push(format!("  {prefix} = {v}")),
    }
}

/// Every config key with its default, for `--help`.
pub fn describe_keys<T: CommandConfig>() -> String {
    let mut lines = Vec::new();
    flatten("", &Value::Table(to_table(&T::default())), &mut lines);
    for (k, meaning) in T::UNSET {
        lines.push(format!("  {k} = <unset: {meaning}>"));
    }
    format!(
        "Config keys (TOML via --config, or --set key=value) and defaults:\n{}",
        lines.join("\n")
    )
}
