use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Architecture, ModelParams};
use super::optim::OptimizerState;

pub const CHECKPOINT_SCHEMA: &str = "partialmine.checkpoint/v1";

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Word position, decimal string (u128).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub schema: String,
    pub architecture: Architecture,
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
}

impl ModelCheckpoint {
    pub fn new(params: ModelParams, optimizer: Option<OptimizerState>, rng: Option<RngState>) -> Self {
        Self {
            schema: CHECKPOINT_SCHEMA.into(),
            architecture: params.arch.clone(),
            params,
            optimizer,
            rng,
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let ck: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unsupported checkpoint schema {:?}", ck.schema),
            ));
        }
        Ok(ck)
    }
}
