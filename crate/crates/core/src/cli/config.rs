use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::harness::{BaselineKind, Grid, LabConfig};

/// Starting point that a config file and flags are layered onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Quick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub method: BaselineKind,
    pub grid: Grid,
    pub jobs: usize,
    /// Images per `generate` call.
    pub images: usize,
    pub prompt: String,
    pub lab: LabConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        Self {
            preset,
            seed: 0,
            method: BaselineKind::Gcns,
            grid: Grid::All,
            jobs: 1,
            images: 4,
            prompt: "a photo of gray".into(),
            lab: match preset {
                Preset::Desk => LabConfig::desk(),
                Preset::Quick => LabConfig::quick(),
            },
        }
    }

    /// `default` with `overlay` merged in key by key. Keys the default does
    /// not have are rejected at every depth.
    pub fn from_overlay(overlay: &Value, fallback: Preset) -> Result<Self> {
        let preset = match overlay.get("preset") {
            Some(p) => serde_json::from_value(p.clone())
                .map_err(|e| Error::Config(format!("preset: {e}")))?,
            None => fallback,
        };
        let mut base = serde_json::to_value(Self::preset(preset))?;
        merge(&mut base, overlay, "")?;
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, fallback: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_overlay(&v, fallback)
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.images == 0 {
            return Err(Error::Config("images must be at least 1".into()));
        }
        self.lab.validate()
    }
}

fn merge(base: &mut Value, overlay: &Value, path: &str) -> Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => return Err(Error::Config(format!("unknown config key `{here}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// `key = default` lines for every leaf of the preset, in field order.
pub fn describe_keys(preset: Preset) -> String {
    let v = serde_json::to_value(RunConfig::preset(preset)).expect("config serializes");
    let mut out = String::new();
    walk(&v, "", &mut out);
    out
}

fn walk(v: &Value, path: &str, out: &mut String) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                walk(child, &here, out);
            }
        }
        leaf => {
            out.push_str(&format!("  {path} = {leaf}\n"));
        }
    }
}
