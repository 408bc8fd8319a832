use super::{observe, plan_expert, step, EnvError, Episode, NavAction, ObsConfig, Observation, Scene, Trajectory};

/// Anything that chooses actions from the observation stream of one episode.
pub trait Policy {
    /// Called once before the first observation of every episode.
    fn reset(&mut self, episode: &Episode);
    fn act(&mut self, obs: &Observation) -> NavAction;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub trajectory: Trajectory,
    pub success: bool,
    /// Number of forward moves that changed the agent's cell.
    pub path_len: f64,
}

/// Runs `policy` for at most `episode.max_steps` actions. Success requires a
/// `Stop` issued inside the goal's success region.
pub fn rollout(scene: &Scene, episode: &Episode, policy: &mut dyn Policy, obs_cfg: &ObsConfig) -> RolloutResult {
    policy.reset(episode);
    let mut pose = episode.start;
    let mut prev = None;
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    let mut path_len = 0usize;
    let mut success = false;
    for _ in 0..episode.max_steps {
        let obs = observe(scene, &pose, &episode.start, prev, episode.goal, obs_cfg);
        let action = policy.act(&obs);
        observations.push(obs);
        actions.push(action);
        if action == NavAction::Stop {
            success = scene.in_success_region(pose.row, pose.col, episode.goal);
            break;
        }
        let next = step(scene, pose, action);
        if action == NavAction::MoveForward && (next.row, next.col) != (pose.row, pose.col) {
            path_len += 1;
        }
        pose = next;
        prev = Some(action);
    }
    RolloutResult {
        trajectory: Trajectory {
            episode: episode.clone(),
            observations,
            actions,
        },
        success,
        path_len: path_len as f64,
    }
}

/// Regenerates the observations of an action sequence from its episode header.
pub fn replay_observations(
    scene: &Scene,
    episode: &Episode,
    actions: &[NavAction],
    obs_cfg: &ObsConfig,
) -> Result<Vec<Observation>, EnvError> {
    scene.validate_pose(&episode.start)?;
    let mut pose = episode.start;
    let mut prev = None;
    let mut out = Vec::with_capacity(actions.len());
    for &a in actions {
        out.push(observe(scene, &pose, &episode.start, prev, episode.goal, obs_cfg));
        pose = step(scene, pose, a);
        prev = Some(a);
    }
    Ok(out)
}

/// Follows the shortest-path plan of whichever episode it is reset for.
pub struct ExpertPolicy<'s> {
    scene: &'s Scene,
    obs_cfg: ObsConfig,
    plan: Vec<NavAction>,
    cursor: usize,
}

impl<'s> ExpertPolicy<'s> {
    pub fn new(scene: &'s Scene, obs_cfg: ObsConfig) -> Self {
        Self {
            scene,
            obs_cfg,
            plan: Vec::new(),
            cursor: 0,
        }
    }
}

impl Policy for ExpertPolicy<'_> {
    fn reset(&mut self, episode: &Episode) {
        self.plan = plan_expert(self.scene, episode, &self.obs_cfg)
            .map(|t| t.actions)
            .unwrap_or_else(|_| vec![NavAction::Stop]);
        self.cursor = 0;
    }

    fn act(&mut self, _obs: &Observation) -> NavAction {
        let a = self.plan.get(self.cursor).copied().unwrap_or(NavAction::Stop);
        self.cursor += 1;
        a
    }
}
