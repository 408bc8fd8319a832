//! Benchmark staging: disjoint category stages, training scenes and expert
//! demonstrations per stage, and held-out evaluation scenes.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderError;
use crate::env::{
    generate_scene, plan_expert, sample_episode, CategoryId, EnvError, Episode, EpisodeConfig, ObsConfig, Scene,
    SceneConfig, Trajectory,
};
use crate::eval::EvalSuite;
use crate::model::Model;
use crate::rng::{derive_seed, substream};
use crate::trainer::{Demo, StagePlan};

/// Evaluation scene ids start here, so they never collide with training ids.
pub const EVAL_SCENE_BASE: u64 = 1_000_000;
const EVAL_EPISODE_OFFSET: u64 = 10_000_000;
const EPISODES_PER_CATEGORY_ID: u64 = 100_000;
const EVAL_STREAM_OFFSET: u64 = 1_000;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid benchmark config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    /// Category set of each stage, in training order.
    pub stages: Vec<Vec<CategoryId>>,
    pub scene: SceneConfig,
    pub episode: EpisodeConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Expert demonstrations per category.
    pub train_per_category: usize,
    /// Evaluation episodes per category.
    pub eval_per_category: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            stages: vec![vec![0, 1, 2], vec![3], vec![4], vec![5]],
            scene: SceneConfig {
                width: 10,
                height: 10,
                room_count: 1,
                categories_present: (0..6).collect(),
                instances_per_category: 1,
            },
            episode: EpisodeConfig {
                max_steps: 100,
                min_geodesic: 2,
                max_geodesic: None,
            },
            train_scenes: 300,
            eval_scenes: 12,
            train_per_category: 300,
            eval_per_category: 100,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self, obs: &ObsConfig) -> Result<(), BenchError> {
        if self.stages.is_empty() {
            return Err(BenchError::Config("at least one stage is required".into()));
        }
        let mut seen = BTreeSet::new();
        let mut repeated = BTreeSet::new();
        for (k, cats) in self.stages.iter().enumerate() {
            if cats.is_empty() {
                return Err(BenchError::Config(format!("stage {} has no categories", k + 1)));
            }
            for &c in cats {
                if !seen.insert(c) {
                    repeated.insert(c);
                }
            }
        }
        if !repeated.is_empty() {
            return Err(BenchError::Config(format!(
                "stages must have disjoint categories; repeated: {repeated:?}"
            )));
        }
        let present: BTreeSet<_> = self.scene.categories_present.iter().copied().collect();
        for &c in &seen {
            if c as usize >= obs.num_categories {
                return Err(BenchError::Config(format!(
                    "category {c} is outside the {}-category vocabulary",
                    obs.num_categories
                )));
            }
            if !present.contains(&c) {
                return Err(BenchError::Config(format!("category {c} is not placed in any scene")));
            }
        }
        for (name, v) in [
            ("train_scenes", self.train_scenes),
            ("eval_scenes", self.eval_scenes),
            ("train_per_category", self.train_per_category),
            ("eval_per_category", self.eval_per_category),
        ] {
            if v == 0 {
                return Err(BenchError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Keeps only the first `k` stages.
    pub fn truncated(&self, k: usize) -> Self {
        let mut c = self.clone();
        c.stages.truncate(k.max(1));
        c
    }

    pub fn categories(&self) -> Vec<CategoryId> {
        self.stages.iter().flatten().copied().collect()
    }
}

/// Everything `gen` produces.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train_scenes: BTreeMap<u64, Scene>,
    pub eval_scenes: BTreeMap<u64, Scene>,
    /// Expert demonstrations of each stage, grouped by category then index.
    pub stage_trajectories: Vec<Vec<Trajectory>>,
    pub eval_episodes: BTreeMap<CategoryId, Vec<Episode>>,
    pub stages: Vec<Vec<CategoryId>>,
}

fn scene_set(master: u64, ids: impl Iterator<Item = u64>, cfg: &SceneConfig) -> Result<BTreeMap<u64, Scene>, EnvError> {
    let ids: Vec<u64> = ids.collect();
    ids.par_iter()
        .map(|&id| generate_scene(id, derive_seed(master, "scene-gen", id), cfg).map(|s| (id, s)))
        .collect()
}

/// Episodes for `category`, cycling through `scenes` in id order.
fn episodes_for(
    scenes: &BTreeMap<u64, Scene>,
    category: CategoryId,
    count: usize,
    id_base: u64,
    cfg: &EpisodeConfig,
    rng: &mut impl rand::Rng,
) -> Result<Vec<Episode>, EnvError> {
    let order: Vec<&Scene> = scenes.values().collect();
    (0..count)
        .map(|i| {
            let scene = order[i % order.len()];
            sample_episode(scene, id_base + category as u64 * EPISODES_PER_CATEGORY_ID + i as u64, category, cfg, rng)
        })
        .collect()
}

/// Generates scenes, expert demonstrations and evaluation episodes. Every
/// piece draws from its own named sub-stream of `master_seed`.
pub fn generate_dataset(cfg: &BenchmarkConfig, obs: &ObsConfig, master_seed: u64) -> Result<Dataset, BenchError> {
    cfg.validate(obs)?;
    let train_scenes = scene_set(master_seed, 0..cfg.train_scenes as u64, &cfg.scene)?;
    let eval_scenes = scene_set(
        master_seed,
        (0..cfg.eval_scenes as u64).map(|i| EVAL_SCENE_BASE + i),
        &cfg.scene,
    )?;
    let mut stage_trajectories = Vec::with_capacity(cfg.stages.len());
    for cats in &cfg.stages {
        let mut trajs = Vec::new();
        for &c in cats {
            let mut rng = substream(master_seed, "episode-gen", c as u64);
            let eps = episodes_for(&train_scenes, c, cfg.train_per_category, 0, &cfg.episode, &mut rng)?;
            let planned: Vec<Trajectory> = eps
                .par_iter()
                .map(|e| plan_expert(&train_scenes[&e.scene_id], e, obs))
                .collect::<Result<_, _>>()?;
            trajs.extend(planned);
        }
        stage_trajectories.push(trajs);
    }
    let mut eval_episodes = BTreeMap::new();
    for c in cfg.categories() {
        let mut rng = substream(master_seed, "episode-gen", EVAL_STREAM_OFFSET + c as u64);
        let eps = episodes_for(&eval_scenes, c, cfg.eval_per_category, EVAL_EPISODE_OFFSET, &cfg.episode, &mut rng)?;
        eval_episodes.insert(c, eps);
    }
    Ok(Dataset {
        train_scenes,
        eval_scenes,
        stage_trajectories,
        eval_episodes,
        stages: cfg.stages.clone(),
    })
}

impl Dataset {
    pub fn eval_suite(&self, obs: &ObsConfig) -> EvalSuite {
        EvalSuite {
            scenes: self.eval_scenes.clone(),
            episodes: self.eval_episodes.clone(),
            stages: self.stages.clone(),
            obs: obs.clone(),
        }
    }

    /// Embeds the stage's demonstrations with the frozen backbones.
    pub fn stage_plan(&self, model: &Model, stage: usize) -> Result<StagePlan, BenchError> {
        let trajs = self
            .stage_trajectories
            .get(stage)
            .ok_or_else(|| BenchError::Config(format!("no stage {}", stage + 1)))?;
        let demos = trajs
            .par_iter()
            .map(|t| Demo::new(&model.backbones, t, stage))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(StagePlan {
            stage,
            categories: self.stages[stage].clone(),
            demos,
        })
    }

    pub fn stage_counts(&self) -> Vec<usize> {
        self.stage_trajectories.iter().map(|t| t.len()).collect()
    }
}
