//! The frozen part of the agent together with its shape configuration.

use serde::{Deserialize, Serialize};

use crate::encoder::{init_projectors, BackboneSet, EncoderConfig};
use crate::env::ObsConfig;
use crate::policy::{init_policy, GreedyPolicy};
use crate::tensor::{ParamStore, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub obs: ObsConfig,
    pub encoder: EncoderConfig,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            obs: ObsConfig::default(),
            encoder: EncoderConfig::default(),
            hidden: 64,
        }
    }
}

/// Backbones are derived from the master seed alone, so every strategy and
/// stage of a run shares them.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbones: BackboneSet,
}

impl Model {
    pub fn new(cfg: ModelConfig, master_seed: u64) -> Self {
        let backbones = BackboneSet::new(master_seed, &cfg.obs, &cfg.encoder);
        Self { cfg, backbones }
    }

    /// Fresh trainable parameters: encoder projectors and decoder.
    pub fn init_params(&self, master_seed: u64) -> Result<ParamStore, TensorError> {
        let mut store = ParamStore::new();
        init_projectors(&mut store, &self.cfg.encoder, master_seed)?;
        init_policy(&mut store, self.cfg.encoder.feature_dim(), self.cfg.hidden, master_seed)?;
        Ok(store)
    }

    pub fn greedy<'m>(&'m self, store: &'m ParamStore) -> Result<GreedyPolicy<'m>, TensorError> {
        GreedyPolicy::new(&self.backbones, store)
    }
}
