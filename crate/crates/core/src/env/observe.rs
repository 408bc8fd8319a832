use serde::{Deserialize, Serialize};

use super::{CategoryId, Cell, Heading, NavAction, Pose, Scene};

pub const PATCH_UNKNOWN: u8 = 0;
pub const PATCH_FREE: u8 = 1;
pub const PATCH_WALL: u8 = 2;
/// Object of category `c` is coded `PATCH_OBJECT_BASE + c`.
pub const PATCH_OBJECT_BASE: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsConfig {
    /// Side of the egocentric semantic patch; odd.
    pub patch_size: usize,
    /// Number of depth rays fanned from the agent's left to its right.
    pub depth_rays: usize,
    /// Size of the global category vocabulary.
    pub num_categories: usize,
}

impl Default for ObsConfig {
    fn default() -> Self {
        Self {
            patch_size: 9,
            depth_rays: 5,
            num_categories: 6,
        }
    }
}

impl ObsConfig {
    pub fn half(&self) -> i64 {
        (self.patch_size / 2) as i64
    }

    /// Number of distinct patch codes.
    pub fn num_codes(&self) -> usize {
        PATCH_OBJECT_BASE as usize + self.num_categories
    }

    /// Egocentric `(forward, right)` unit steps of each depth ray, spread
    /// evenly from -90 to +90 degrees and snapped to the 8-neighbourhood.
    pub fn ray_directions(&self) -> Vec<(i64, i64)> {
        let n = self.depth_rays;
        (0..n)
            .map(|j| {
                let angle = if n == 1 {
                    0.0
                } else {
                    -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * j as f64 / (n - 1) as f64
                };
                (angle.cos().round() as i64, angle.sin().round() as i64)
            })
            .collect()
    }
}

/// Position change since the episode start, in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseDelta {
    pub d_row: i64,
    pub d_col: i64,
    pub heading: Heading,
    pub pitch: i8,
}

/// Per-step multimodal input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// `patch_size^2` codes, row-major, row 0 farthest ahead, agent at the centre.
    pub semantic_patch: Vec<u8>,
    /// Normalised free distance along each ray, in `[0, 1]`.
    pub depth_rays: Vec<f64>,
    pub pose_delta: PoseDelta,
    /// `None` on the first step of an episode.
    pub prev_action: Option<NavAction>,
    pub goal: CategoryId,
}

impl Observation {
    pub fn prev_action_one_hot(&self) -> [f64; NavAction::COUNT] {
        let mut v = [0.0; NavAction::COUNT];
        if let Some(a) = self.prev_action {
            v[a.code() as usize] = 1.0;
        }
        v
    }

    pub fn goal_one_hot(&self, num_categories: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_categories];
        v[self.goal as usize] = 1.0;
        v
    }
}

fn code_of(cell: Cell) -> u8 {
    match cell {
        Cell::Free => PATCH_FREE,
        Cell::Wall => PATCH_WALL,
        Cell::Object { category, .. } => PATCH_OBJECT_BASE + category as u8,
    }
}

/// Cells strictly between the agent and an egocentric offset, using the
/// sampled-segment rule: `n - 1` interior samples at `t = i / n`
/// (`n` = Chebyshev length), each rounded half away from zero.
fn between(forward: i64, right: i64) -> Vec<(i64, i64)> {
    let n = forward.abs().max(right.abs());
    let mut out = Vec::new();
    for i in 1..n {
        let f = ((forward as f64) * (i as f64) / (n as f64)).round() as i64;
        let r = ((right as f64) * (i as f64) / (n as f64)).round() as i64;
        if (f, r) != (forward, right) && !out.contains(&(f, r)) {
            out.push((f, r));
        }
    }
    out
}

/// Whether the pitch mask shows a cell at Chebyshev ring `ring`.
/// Looking down shows the near field, level shows everything, looking up
/// shows the far field plus the agent's own cell.
fn pitch_visible(pitch: i8, ring: i64) -> bool {
    match pitch {
        p if p < 0 => ring <= 2,
        0 => true,
        _ => ring == 0 || ring >= 2,
    }
}

/// Observation at `pose` for an episode that started at `start`.
pub fn observe(
    scene: &Scene,
    pose: &Pose,
    start: &Pose,
    prev_action: Option<NavAction>,
    goal: CategoryId,
    cfg: &ObsConfig,
) -> Observation {
    let half = cfg.half();
    let v = cfg.patch_size;
    let mut patch = vec![PATCH_UNKNOWN; v * v];
    let (ar, ac) = (pose.row as i64, pose.col as i64);
    for pr in 0..v {
        for pc in 0..v {
            let forward = half - pr as i64;
            let right = pc as i64 - half;
            if !pitch_visible(pose.pitch, forward.abs().max(right.abs())) {
                continue;
            }
            let (dr, dc) = pose.heading.ego_to_world(forward, right);
            if !scene.in_bounds(ar + dr, ac + dc) {
                continue;
            }
            let blocked = between(forward, right).into_iter().any(|(f, r)| {
                let (wr, wc) = pose.heading.ego_to_world(f, r);
                !scene.cell_at(ar + wr, ac + wc).is_free()
            });
            if !blocked {
                patch[pr * v + pc] = code_of(scene.cell_at(ar + dr, ac + dc));
            }
        }
    }

    let range = half.max(1);
    let depth_rays = cfg
        .ray_directions()
        .into_iter()
        .map(|(f, r)| {
            let (dr, dc) = pose.heading.ego_to_world(f, r);
            let mut free = 0;
            while free < range && scene.cell_at(ar + dr * (free + 1), ac + dc * (free + 1)).is_free() {
                free += 1;
            }
            free as f64 / range as f64
        })
        .collect();

    Observation {
        semantic_patch: patch,
        depth_rays,
        pose_delta: PoseDelta {
            d_row: ar - start.row as i64,
            d_col: ac - start.col as i64,
            heading: pose.heading,
            pitch: pose.pitch,
        },
        prev_action,
        goal,
    }
}
