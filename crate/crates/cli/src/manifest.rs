use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use zubov::checkpoint::sha256_hex;

use crate::error::{CliError, CliResult};

pub const MANIFEST_SCHEMA: &str = "zubov.manifest.v1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Path relative to the run directory.
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub config: Value,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    pub timings: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, Value>,
}

impl RunManifest {
    pub fn new(config: Value) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.into(),
            config,
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let p = Self::path(dir);
        let text = std::fs::read_to_string(&p).map_err(|_| CliError::Missing(p.clone()))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(CliError::Integrity(format!("manifest schema `{}`", m.schema)));
        }
        Ok(m)
    }

    pub fn load_or_new(dir: &Path, config: Value) -> CliResult<Self> {
        if Self::path(dir).exists() {
            let mut m = Self::load(dir)?;
            m.config = config;
            Ok(m)
        } else {
            Ok(Self::new(config))
        }
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        std::fs::write(Self::path(dir), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Hash `file` (relative to `dir`) and record it under `name`.
    pub fn record(&mut self, dir: &Path, name: &str, file: &str) -> CliResult<()> {
        let bytes = std::fs::read(dir.join(file))?;
        self.artifacts.insert(
            name.into(),
            ArtifactEntry {
                file: file.into(),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    pub fn metric(&mut self, key: &str, v: impl Serialize) -> CliResult<()> {
        self.metrics.insert(key.into(), serde_json::to_value(v)?);
        Ok(())
    }

    /// Path of a recorded artifact after confirming its hash.
    pub fn verified_path(&self, dir: &Path, name: &str) -> CliResult<PathBuf> {
        let e = self
            .artifacts
            .get(name)
            .ok_or_else(|| CliError::Missing(dir.join(format!("<{name}>"))))?;
        let p = dir.join(&e.file);
        let bytes = std::fs::read(&p).map_err(|_| CliError::Missing(p.clone()))?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(CliError::Integrity(format!("{} does not match its manifest hash", p.display())));
        }
        Ok(p)
    }

    /// Check every recorded artifact.
    pub fn verify_all(&self, dir: &Path) -> CliResult<()> {
        for name in self.artifacts.keys() {
            self.verified_path(dir, name)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tampering_is_detected() {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("a.txt"), "hello").unwrap();
        let mut m = RunManifest::new(Value::Null);
        m.record(d.path(), "a", "a.txt").unwrap();
        m.save(d.path()).unwrap();
        let m = RunManifest::load(d.path()).unwrap();
        m.verify_all(d.path()).unwrap();
        std::fs::write(d.path().join("a.txt"), "hellO").unwrap();
        assert!(matches!(m.verify_all(d.path()), Err(CliError::Integrity(_))));
        std::fs::remove_file(d.path().join("a.txt")).unwrap();
        assert!(matches!(m.verify_all(d.path()), Err(CliError::Missing(_))));
    }
}
