//! Continual training: losses, the replay buffer, batch mixing, and the
//! stage-by-stage loop shared by every strategy.

mod buffer;
mod loss;
mod schedule;
mod stage;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{BackboneEmbedding, BackboneSet, EncoderError};
use crate::env::{CategoryId, NavAction, Trajectory, TrajectoryRecord};
use crate::selection::{LofConfig, SelectionMethod};
use crate::tensor::{OptimConfig, TensorError};

pub use buffer::{buffer_paths, load_buffer, save_buffer, BufferSummary, FeatureEntry, ReplayBuffer, BUFFER_VERSION};
pub use loss::{
    batch_loss_and_grad, inflection_weights, loss_current, loss_fr, loss_kd, BatchItem, CurrentItem, LossComponents,
    LossSetup,
};
pub use schedule::{replay_slots, Batch, BatchScheduler};
pub use stage::{finish_stage, run_stage, train_stage, StageOutcome, StagePlan, TrainState, TranscriptRow};

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("stage {0} has no training trajectories")]
    EmptyStage(usize),
    #[error("replay buffer: {0}")]
    Buffer(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyId {
    Finetune,
    Lwf,
    Merge,
    DataReplay,
    CnavUniform,
    Cnav,
}

impl StrategyId {
    pub const ALL: [StrategyId; 6] = [
        StrategyId::Finetune,
        StrategyId::Lwf,
        StrategyId::Merge,
        StrategyId::DataReplay,
        StrategyId::CnavUniform,
        StrategyId::Cnav,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyId::Finetune => "finetune",
            StrategyId::Lwf => "lwf",
            StrategyId::Merge => "merge",
            StrategyId::DataReplay => "data_replay",
            StrategyId::CnavUniform => "cnav_uniform",
            StrategyId::Cnav => "cnav",
        }
    }

    /// Stores encoder features and trains on them with the replay loss.
    pub fn replays_features(self) -> bool {
        matches!(self, StrategyId::Cnav | StrategyId::CnavUniform)
    }

    pub fn distills_features(self) -> bool {
        self.replays_features()
    }

    pub fn replays_raw(self) -> bool {
        self == StrategyId::DataReplay
    }

    /// Frame selection used when filling the buffer, before any override.
    pub fn default_selection(self) -> Option<SelectionMethod> {
        match self {
            StrategyId::Cnav => Some(SelectionMethod::Lof),
            StrategyId::CnavUniform => Some(SelectionMethod::Uniform),
            _ => None,
        }
    }
}

impl std::fmt::Display for StrategyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        StrategyId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = StrategyId::ALL.iter().map(|i| i.name()).collect();
                format!("unknown strategy '{s}' (expected one of {})", known.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Extra weight on steps whose action differs from the previous one.
    pub gamma: f64,
    pub lambda_kd: f64,
    pub lambda_fr: f64,
    /// 1 for the plain distance, 2 for its square.
    pub kd_exponent: u32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 3.48,
            lambda_kd: 5.0,
            lambda_fr: 5.0,
            kd_exponent: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of each batch drawn from the replay buffer once it is non-empty.
    pub mix_ratio: f64,
    /// Trajectories kept per category after each stage.
    pub replay_per_category: usize,
    pub weights: LossWeights,
    pub lwf_coefficient: f64,
    /// Weight of the freshly trained parameters when merging.
    pub merge_alpha: f64,
    pub lof: LofConfig,
    /// Retention ratio of the uniform and clustering samplers.
    pub sample_ratio: f64,
    /// Replaces the strategy's own frame selection (ablations).
    #[serde(default)]
    pub selection_override: Option<SelectionMethod>,
    /// `total_steps` is ignored: each stage schedules over its own step count.
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            mix_ratio: 0.25,
            replay_per_category: 80,
            weights: LossWeights::default(),
            lwf_coefficient: 0.2,
            merge_alpha: 0.7,
            lof: LofConfig::default(),
            sample_ratio: 0.5,
            selection_override: None,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |m: &str| Err(TrainerError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return bad("mix_ratio must lie in [0, 1]");
        }
        let w = &self.weights;
        if !(w.gamma >= 0.0 && w.lambda_kd >= 0.0 && w.lambda_fr >= 0.0 && self.lwf_coefficient >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !matches!(w.kd_exponent, 1 | 2) {
            return bad("kd_exponent must be 1 or 2");
        }
        if !(0.0..=1.0).contains(&self.merge_alpha) {
            return bad("merge_alpha must lie in [0, 1]");
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return bad("sample_ratio must lie in (0, 1]");
        }
        self.lof.validate().map_err(TrainerError::Config)?;
        let mut probe = self.optim.clone();
        probe.total_steps = probe.total_steps.max(probe.warmup_steps);
        probe.validate()?;
        Ok(())
    }

    pub fn selection_for(&self, strategy: StrategyId) -> Option<SelectionMethod> {
        strategy.default_selection().map(|m| self.selection_override.unwrap_or(m))
    }
}

/// A training trajectory with its frozen backbone embeddings precomputed.
#[derive(Debug, Clone)]
pub struct Demo {
    pub task: usize,
    pub record: TrajectoryRecord,
    pub embeddings: Vec<BackboneEmbedding>,
    pub actions: Vec<NavAction>,
}

impl Demo {
    pub fn new(backbones: &BackboneSet, traj: &Trajectory, task: usize) -> Result<Self, EncoderError> {
        Ok(Self {
            task,
            record: TrajectoryRecord::from(traj),
            embeddings: backbones.embed_trajectory(traj)?,
            actions: traj.actions.clone(),
        })
    }

    pub fn id(&self) -> u64 {
        self.record.episode.id
    }

    pub fn category(&self) -> CategoryId {
        self.record.episode.goal
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}
