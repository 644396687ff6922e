//! Versioned JSON checkpoints holding every trained tensor with its shape.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Discriminator, Encoder, Generator, ModelConfig, TrainConfig};
use crate::error::{KinoError, Result};

pub const CHECKPOINT_VERSION: u32 = 3;

/// Models for one system together with the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    pub system: String,
    pub model: ModelConfig,
    pub generator_training: Option<TrainConfig>,
    pub discriminator_training: Option<TrainConfig>,
    /// SHA-256 over the system name and the configurations above.
    pub config_hash: String,
    pub encoder: Option<Encoder>,
    pub generator: Option<Generator>,
    pub discriminator: Option<Discriminator>,
}

impl ModelBundle {
    pub fn new(system: &str, model: ModelConfig) -> Self {
        let mut b = ModelBundle {
            version: CHECKPOINT_VERSION,
            system: system.to_string(),
            model,
            generator_training: None,
            discriminator_training: None,
            config_hash: String::new(),
            encoder: None,
            generator: None,
            discriminator: None,
        };
        b.config_hash = b.compute_hash();
        b
    }

    pub fn with_generator(mut self, encoder: Encoder, generator: Generator, cfg: TrainConfig) -> Self {
        self.encoder = Some(encoder);
        self.generator = Some(generator);
        self.generator_training = Some(cfg);
        self.config_hash = self.compute_hash();
        self
    }

    pub fn with_discriminator(mut self, disc: Discriminator, cfg: TrainConfig) -> Self {
        self.discriminator = Some(disc);
        self.discriminator_training = Some(cfg);
        self.config_hash = self.compute_hash();
        self
    }

    pub fn compute_hash(&self) -> String {
        let payload = serde_json::to_string(&(
            &self.system,
            &self.model,
            &self.generator_training,
            &self.discriminator_training,
        ))
        .expect("config serializes");
        Sha256::digest(payload.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: ModelBundle = serde_json::from_str(text)?;
        let fail = |reason: String| Err(KinoError::Format {
            what: "checkpoint",
            reason,
        });
        if b.version != CHECKPOINT_VERSION {
            return fail(format!("unsupported version {}", b.version));
        }
        if b.compute_hash() != b.config_hash {
            return fail("config hash does not match stored configuration".into());
        }
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| KinoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KinoError::io(path, e))?;
        Self::from_json(&text)
    }
}
