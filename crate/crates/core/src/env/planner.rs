use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{observe, step, CategoryId, EnvError, Episode, Heading, NavAction, ObsConfig, Pose, Scene, Trajectory};

/// BFS distance in cells from `(row, col)` to the nearest success-region cell
/// of `category`.
pub fn geodesic_distance(scene: &Scene, row: usize, col: usize, category: CategoryId) -> Result<usize, EnvError> {
    if scene.instances(category).is_empty() {
        return Err(EnvError::CategoryAbsent(category));
    }
    let w = scene.width;
    let mut dist = vec![usize::MAX; scene.cells.len()];
    let mut queue = VecDeque::new();
    dist[row * w + col] = 0;
    queue.push_back((row, col));
    while let Some((r, c)) = queue.pop_front() {
        let d = dist[r * w + c];
        if scene.in_success_region(r, c, category) {
            return Ok(d);
        }
        for h in Heading::ALL {
            let (dr, dc) = h.forward();
            let (nr, nc) = ((r as i64 + dr) as usize, (c as i64 + dc) as usize);
            if scene.is_free(nr, nc) && dist[nr * w + nc] == usize::MAX {
                dist[nr * w + nc] = d + 1;
                queue.push_back((nr, nc));
            }
        }
    }
    Err(EnvError::Unreachable { category, row, col })
}

/// Turn count large enough that one extra move always outweighs any number
/// of turns in the lexicographic (moves, turns) cost.
const MOVE_COST: u64 = 1 << 32;

/// Action sequence from `start` into the success region: fewest forward
/// moves first, fewest turns among those, then `Stop`.
fn plan_actions(scene: &Scene, start: Pose, category: CategoryId) -> Result<Vec<NavAction>, EnvError> {
    if scene.instances(category).is_empty() {
        return Err(EnvError::CategoryAbsent(category));
    }
    let w = scene.width;
    let state = |r: usize, c: usize, h: Heading| (r * w + c) * 4 + h.index();
    let n_states = scene.cells.len() * 4;
    let mut cost = vec![u64::MAX; n_states];
    let mut prev: Vec<Option<(usize, NavAction)>> = vec![None; n_states];
    let mut heap = BinaryHeap::new();

    let s0 = state(start.row, start.col, start.heading);
    cost[s0] = 0;
    heap.push(Reverse((0u64, s0)));
    let mut goal_state = None;
    while let Some(Reverse((c, s))) = heap.pop() {
        if c > cost[s] {
            continue;
        }
        let cell = s / 4;
        let (r, col) = (cell / w, cell % w);
        let heading = Heading::from_index(s % 4);
        if scene.in_success_region(r, col, category) {
            goal_state = Some(s);
            break;
        }
        let here = Pose {
            row: r,
            col,
            heading,
            pitch: start.pitch,
        };
        for (action, delta) in [
            (NavAction::MoveForward, MOVE_COST),
            (NavAction::TurnLeft, 1),
            (NavAction::TurnRight, 1),
        ] {
            let next = step(scene, here, action);
            if next == here {
                continue;
            }
            let ns = state(next.row, next.col, next.heading);
            let nc = c + delta;
            if nc < cost[ns] {
                cost[ns] = nc;
                prev[ns] = Some((s, action));
                heap.push(Reverse((nc, ns)));
            }
        }
    }
    let Some(mut s) = goal_state else {
        return Err(EnvError::Unreachable {
            category,
            row: start.row,
            col: start.col,
        });
    };
    let mut actions = vec![NavAction::Stop];
    while let Some((p, a)) = prev[s] {
        actions.push(a);
        s = p;
    }
    actions.reverse();
    Ok(actions)
}

/// Shortest-path expert demonstration for `episode`, with observations
/// regenerated along the way.
pub fn plan_expert(scene: &Scene, episode: &Episode, obs_cfg: &ObsConfig) -> Result<Trajectory, EnvError> {
    scene.validate_pose(&episode.start)?;
    let actions = plan_actions(scene, episode.start, episode.goal)?;
    if actions.len() > episode.max_steps {
        return Err(EnvError::PlanTooLong {
            needed: actions.len(),
            max_steps: episode.max_steps,
        });
    }
    let mut observations = Vec::with_capacity(actions.len());
    let mut pose = episode.start;
    let mut prev = None;
    for &a in &actions {
        observations.push(observe(scene, &pose, &episode.start, prev, episode.goal, obs_cfg));
        pose = step(scene, pose, a);
        prev = Some(a);
    }
    Ok(Trajectory {
        episode: episode.clone(),
        observations,
        actions,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub max_steps: usize,
    /// Smallest accepted geodesic start-to-goal distance.
    pub min_geodesic: usize,
    /// Largest accepted geodesic distance; `None` for unbounded.
    #[serde(default)]
    pub max_geodesic: Option<usize>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_steps: 100,
            min_geodesic: 1,
            max_geodesic: None,
        }
    }
}

/// Draws a start pose for `goal` satisfying the distance bounds and whose
/// expert plan fits in `max_steps`.
pub fn sample_episode(
    scene: &Scene,
    id: u64,
    goal: CategoryId,
    cfg: &EpisodeConfig,
    rng: &mut impl Rng,
) -> Result<Episode, EnvError> {
    if scene.instances(goal).is_empty() {
        return Err(EnvError::CategoryAbsent(goal));
    }
    let free: Vec<(usize, usize)> = (0..scene.height)
        .flat_map(|r| (0..scene.width).map(move |c| (r, c)))
        .filter(|&(r, c)| scene.is_free(r, c))
        .collect();
    const ATTEMPTS: usize = 200;
    for _ in 0..ATTEMPTS {
        let (row, col) = free[rng.random_range(0..free.len())];
        let heading = Heading::from_index(rng.random_range(0..4));
        let Ok(p_star) = geodesic_distance(scene, row, col, goal) else {
            continue;
        };
        if p_star < cfg.min_geodesic || cfg.max_geodesic.is_some_and(|m| p_star > m) {
            continue;
        }
        let start = Pose {
            row,
            col,
            heading,
            pitch: 0,
        };
        let plan = plan_actions(scene, start, goal)?;
        if plan.len() > cfg.max_steps {
            continue;
        }
        return Ok(Episode {
            id,
            scene_id: scene.id,
            start,
            goal,
            p_star,
            max_steps: cfg.max_steps,
        });
    }
    Err(EnvError::EpisodeSampling(ATTEMPTS))
}
