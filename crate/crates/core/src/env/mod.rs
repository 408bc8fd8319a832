//! Procedurally generated indoor gridworlds for object-goal navigation.
//!
//! A [`Scene`] is a walled grid split into rooms; object instances sit
//! against walls and block movement. The agent occupies a free cell, faces
//! one of four headings and has a three-valued camera pitch that only
//! changes what the egocentric patch shows.

mod io;
mod observe;
mod planner;
mod rollout;
mod scene;

pub use io::{read_jsonl, write_jsonl, EpisodeRecord, SceneRecord, TrajectoryRecord};
pub use observe::{observe, ObsConfig, Observation, PoseDelta, PATCH_FREE, PATCH_OBJECT_BASE, PATCH_UNKNOWN, PATCH_WALL};
pub use planner::{geodesic_distance, plan_expert, sample_episode, EpisodeConfig};
pub use rollout::{replay_observations, rollout, ExpertPolicy, Policy, RolloutResult};
pub use scene::{generate_scene, Room, SceneConfig};

use serde::{Deserialize, Serialize};

pub type CategoryId = u32;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("category {0} cannot be placed: no free wall-adjacent cell keeps the scene connected")]
    Unplaceable(CategoryId),
    #[error("goal category {category} is unreachable from ({row}, {col})")]
    Unreachable { category: CategoryId, row: usize, col: usize },
    #[error("expert plan needs {needed} actions but the episode allows {max_steps}")]
    PlanTooLong { needed: usize, max_steps: usize },
    #[error("category {0} is not present in the scene")]
    CategoryAbsent(CategoryId),
    #[error("invalid pose ({row}, {col})")]
    InvalidPose { row: usize, col: usize },
    #[error("could not sample an episode after {0} attempts")]
    EpisodeSampling(usize),
    #[error("record mismatch: {0}")]
    Record(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cell {
    Free,
    Wall,
    Object { category: CategoryId, instance: u32 },
}

impl Cell {
    pub fn is_free(self) -> bool {
        matches!(self, Cell::Free)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    pub fn left(self) -> Self {
        Self::from_index(self.index() + 3)
    }

    pub fn right(self) -> Self {
        Self::from_index(self.index() + 1)
    }

    /// Unit step `(d_row, d_col)` in the facing direction.
    pub fn forward(self) -> (i64, i64) {
        match self {
            Heading::N => (-1, 0),
            Heading::E => (0, 1),
            Heading::S => (1, 0),
            Heading::W => (0, -1),
        }
    }

    /// Unit step to the agent's right.
    pub fn right_vec(self) -> (i64, i64) {
        self.right().forward()
    }

    /// World offset of an egocentric `(forward, right)` offset.
    pub fn ego_to_world(self, forward: i64, right: i64) -> (i64, i64) {
        let (fr, fc) = self.forward();
        let (rr, rc) = self.right_vec();
        (forward * fr + right * rr, forward * fc + right * rc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pose {
    pub row: usize,
    pub col: usize,
    pub heading: Heading,
    /// -1 looks down, 0 level, +1 up.
    pub pitch: i8,
}

/// Discrete action space; the integer codes are part of every file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NavAction {
    MoveForward = 0,
    TurnLeft = 1,
    TurnRight = 2,
    LookUp = 3,
    LookDown = 4,
    Stop = 5,
}

impl NavAction {
    pub const COUNT: usize = 6;
    pub const ALL: [NavAction; 6] = [
        NavAction::MoveForward,
        NavAction::TurnLeft,
        NavAction::TurnRight,
        NavAction::LookUp,
        NavAction::LookDown,
        NavAction::Stop,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

/// Immutable world model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub id: u64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub cells: Vec<Cell>,
    pub rooms: Vec<Room>,
    pub doors: Vec<(usize, usize)>,
}

impl Scene {
    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.width + col]
    }

    /// Cell at signed coordinates; out of bounds reads as wall.
    pub fn cell_at(&self, row: i64, col: i64) -> Cell {
        if row < 0 || col < 0 || row as usize >= self.height || col as usize >= self.width {
            Cell::Wall
        } else {
            self.cell(row as usize, col as usize)
        }
    }

    pub fn in_bounds(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width
    }

    pub fn is_free(&self, row: usize, col: usize) -> bool {
        row < self.height && col < self.width && self.cell(row, col).is_free()
    }

    /// Categories with at least one instance, ascending.
    pub fn categories(&self) -> Vec<CategoryId> {
        let mut cats: Vec<CategoryId> = self
            .cells
            .iter()
            .filter_map(|c| match c {
                Cell::Object { category, .. } => Some(*category),
                _ => None,
            })
            .collect();
        cats.sort_unstable();
        cats.dedup();
        cats
    }

    /// Cells holding instances of `category`.
    pub fn instances(&self, category: CategoryId) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&(r, c)| matches!(self.cell(r, c), Cell::Object { category: k, .. } if k == category))
            .collect()
    }

    /// A free cell within Chebyshev distance 1 of an instance of `category`.
    pub fn in_success_region(&self, row: usize, col: usize, category: CategoryId) -> bool {
        if !self.is_free(row, col) {
            return false;
        }
        for dr in -1..=1i64 {
            for dc in -1..=1i64 {
                if let Cell::Object { category: k, .. } = self.cell_at(row as i64 + dr, col as i64 + dc) {
                    if k == category {
                        return true;
                    }
                }
            }
        }
        false
    }

    pub fn validate_pose(&self, pose: &Pose) -> Result<(), EnvError> {
        if !self.is_free(pose.row, pose.col) || !(-1..=1).contains(&pose.pitch) {
            return Err(EnvError::InvalidPose {
                row: pose.row,
                col: pose.col,
            });
        }
        Ok(())
    }
}

/// Applies one action. Blocked forward moves leave the pose unchanged.
pub fn step(scene: &Scene, pose: Pose, action: NavAction) -> Pose {
    match action {
        NavAction::MoveForward => {
            let (dr, dc) = pose.heading.forward();
            let (nr, nc) = (pose.row as i64 + dr, pose.col as i64 + dc);
            if scene.cell_at(nr, nc).is_free() {
                Pose {
                    row: nr as usize,
                    col: nc as usize,
                    ..pose
                }
            } else {
                pose
            }
        }
        NavAction::TurnLeft => Pose {
            heading: pose.heading.left(),
            ..pose
        },
        NavAction::TurnRight => Pose {
            heading: pose.heading.right(),
            ..pose
        },
        NavAction::LookUp => Pose {
            pitch: (pose.pitch + 1).min(1),
            ..pose
        },
        NavAction::LookDown => Pose {
            pitch: (pose.pitch - 1).max(-1),
            ..pose
        },
        NavAction::Stop => pose,
    }
}

/// A single navigation task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u64,
    pub scene_id: u64,
    pub start: Pose,
    pub goal: CategoryId,
    /// Geodesic distance in cells from the start to the goal's success region.
    pub p_star: usize,
    pub max_steps: usize,
}

/// Expert demonstration: `observations[t]` was seen when `actions[t]` was taken.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub episode: Episode,
    pub observations: Vec<Observation>,
    pub actions: Vec<NavAction>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}
