//! Run configuration: a preset, overlaid by a TOML (or JSON) file, overlaid
//! by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use zubov::pipeline::RunConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Module defaults at full scale.
    #[default]
    Full,
    /// Reduced settings that fit a single CPU core.
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Pgd,
    Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CliConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    pub preset: Preset,
    pub output_dir: Option<PathBuf>,
    /// Empirical schemes run by `certify` and `run`.
    pub schemes: Vec<SchemeName>,
    pub pgd_restarts: usize,
    pub trajectories: usize,
    /// Horizon of trajectory verification in seconds.
    pub trajectory_horizon: f64,
    pub volume_samples: usize,
}

impl CliConfig {
    pub fn preset(preset: Preset, system: &str, seed: u64) -> Self {
        let run = match preset {
            Preset::Full => RunConfig {
                system: system.into(),
                seed,
                ..RunConfig::default()
            },
            Preset::Desk => RunConfig::desk(system, seed),
        };
        Self {
            run,
            preset,
            output_dir: None,
            schemes: vec![SchemeName::Pgd, SchemeName::Trajectory],
            pgd_restarts: 10_000,
            trajectories: 100_000,
            trajectory_horizon: 30.0,
            volume_samples: 1_000_000,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.run.validate()?;
        if self.trajectories == 0 || self.pgd_restarts == 0 || self.volume_samples == 0 {
            return Err(CliError::Config("sample counts must be positive".into()));
        }
        if !(self.trajectory_horizon > 0.0) {
            return Err(CliError::Config("trajectory_horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Parse a config file into a JSON tree. TOML first; `.json` files or
/// TOML failures fall back to JSON.
pub fn read_tree(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Config(format!("config file {} not found", path.display())),
        _ => CliError::Io(e),
    })?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if !is_json {
        match toml::from_str::<toml::Table>(&text) {
            Ok(t) => return serde_json::to_value(t).map_err(CliError::from),
            Err(e) if path.extension().is_some_and(|e| e == "toml") => {
                return Err(CliError::Config(format!("{}: {e}", path.display())))
            }
            Err(_) => {}
        }
    }
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub system: Option<String>,
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    pub output_dir: Option<PathBuf>,
}

/// Resolve the effective configuration. The preset comes from the flag, else
/// the file, else `full`; the system and seed likewise.
pub fn resolve(file: Option<&Path>, ov: &Overrides) -> CliResult<CliConfig> {
    let tree = match file {
        Some(p) => read_tree(p)?,
        None => Value::Object(Default::default()),
    };
    let pick = |key: &str| tree.get(key).cloned();
    let preset = match ov.preset {
        Some(p) => p,
        None => match pick("preset") {
            Some(v) => serde_json::from_value(v).map_err(|e| CliError::Config(format!("preset: {e}")))?,
            None => Preset::Full,
        },
    };
    let system = match &ov.system {
        Some(s) => s.clone(),
        None => pick("system").and_then(|v| v.as_str().map(String::from)).unwrap_or_else(|| "van_der_pol".into()),
    };
    let seed = match ov.seed {
        Some(s) => s,
        None => pick("seed").and_then(|v| v.as_u64()).unwrap_or(0),
    };
    let mut base = serde_json::to_value(CliConfig::preset(preset, &system, seed))?;
    merge(&mut base, &tree);
    let mut cfg: CliConfig = serde_json::from_value(base).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.preset = preset;
    cfg.run.system = system;
    cfg.run.seed = seed;
    if ov.output_dir.is_some() {
        cfg.output_dir = ov.output_dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}
