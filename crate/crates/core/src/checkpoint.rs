//! Versioned JSON persistence for trained networks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::BoxDomain;
use crate::error::{Error, Result};
use crate::nn::{Controller, LyapunovNet};

pub const CHECKPOINT_SCHEMA: &str = "zubov.checkpoint.v1";

/// Layer sizes and activations, kept alongside the weights for readers that
/// only want the shape of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub sizes: Vec<usize>,
    pub activations: Vec<String>,
}

impl Arch {
    fn of(net: &crate::nn::Mlp) -> Self {
        let mut sizes = vec![net.input_dim()];
        let mut activations = vec![];
        for l in net.layers() {
            sizes.push(l.output_dim());
            activations.push(format!("{:?}", l.activation).to_lowercase());
        }
        Self { sizes, activations }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub system: String,
    pub lyapunov_arch: Arch,
    pub controller_arch: Arch,
    pub lyapunov: LyapunovNet,
    pub controller: Controller,
    /// Training domain at the time of the snapshot.
    pub domain: BoxDomain,
}

impl Checkpoint {
    pub fn new(system: &str, lyapunov: LyapunovNet, controller: Controller, domain: BoxDomain) -> Self {
        Self {
            schema: CHECKPOINT_SCHEMA.into(),
            system: system.into(),
            lyapunov_arch: Arch::of(lyapunov.net()),
            controller_arch: Arch::of(&controller.net),
            lyapunov,
            controller,
            domain,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Schema {
                expected: CHECKPOINT_SCHEMA.into(),
                found: c.schema,
            });
        }
        c.controller.validate()?;
        if c.lyapunov.state_dim() != c.controller.state_dim() || c.domain.dim() != c.controller.state_dim() {
            return Err(Error::InvalidNetwork("checkpoint dimensions disagree".into()));
        }
        if c.lyapunov_arch != Arch::of(c.lyapunov.net()) || c.controller_arch != Arch::of(&c.controller.net) {
            return Err(Error::InvalidNetwork("architecture record does not match weights".into()));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical serialization.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
