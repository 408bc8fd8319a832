use cnav_core::env::{
    generate_scene, observe, plan_expert, rollout, sample_episode, step, Cell, Episode, EpisodeConfig, ExpertPolicy,
    Heading, NavAction, ObsConfig, Observation, Policy, Pose, Scene, SceneConfig, PATCH_FREE, PATCH_OBJECT_BASE,
    PATCH_UNKNOWN, PATCH_WALL,
};
use cnav_core::rng::substream;
use cnav_oracles::{flood_fill_count, geodesic_bfs, line_of_sight, OracleCell};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn oracle_grid(scene: &Scene) -> Vec<Vec<OracleCell>> {
    (0..scene.height)
        .map(|r| {
            (0..scene.width)
                .map(|c| match scene.cell(r, c) {
                    Cell::Free => OracleCell::Free,
                    Cell::Wall => OracleCell::Wall,
                    Cell::Object { category, .. } => OracleCell::Object(category),
                })
                .collect()
        })
        .collect()
}

fn scene_cfg(seed: u64) -> SceneConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SceneConfig {
        width: rng.random_range(8..16),
        height: rng.random_range(8..16),
        room_count: rng.random_range(1..4),
        categories_present: vec![0, 1, 2, 3],
        instances_per_category: 1,
    }
}

#[test]
fn generated_scenes_are_connected() {
    for seed in 0..100 {
        let scene = match generate_scene(seed, seed, &scene_cfg(seed)) {
            Ok(s) => s,
            // Small random configs may not fit every room; they must say so.
            Err(cnav_core::env::EnvError::InvalidConfig(_)) => {
                let cfg = SceneConfig {
                    room_count: 1,
                    ..scene_cfg(seed)
                };
                generate_scene(seed, seed, &cfg).unwrap()
            }
            Err(e) => panic!("seed {seed}: {e}"),
        };
        let grid = oracle_grid(&scene);
        let free: Vec<(usize, usize)> = (0..scene.height)
            .flat_map(|r| (0..scene.width).map(move |c| (r, c)))
            .filter(|&(r, c)| scene.is_free(r, c))
            .collect();
        assert_eq!(flood_fill_count(&grid, free[0]), free.len(), "seed {seed} disconnected");
        for cat in scene.categories() {
            assert!(geodesic_bfs(&grid, free[0], cat).is_some(), "seed {seed} category {cat} unreachable");
        }
    }
}

#[test]
fn patch_matches_line_of_sight_oracle() {
    let obs_cfg = ObsConfig::default();
    let v = obs_cfg.patch_size as i64;
    let half = v / 2;
    for seed in 0..40 {
        let cfg = SceneConfig {
            room_count: 1 + (seed as usize % 3),
            width: 13,
            height: 13,
            ..scene_cfg(seed)
        };
        let scene = generate_scene(seed, seed, &cfg).unwrap();
        let grid = oracle_grid(&scene);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        for _ in 0..10 {
            let (row, col) = loop {
                let r = rng.random_range(0..scene.height);
                let c = rng.random_range(0..scene.width);
                if scene.is_free(r, c) {
                    break (r, c);
                }
            };
            let pose = Pose {
                row,
                col,
                heading: Heading::from_index(rng.random_range(0..4)),
                pitch: 0,
            };
            let obs = observe(&scene, &pose, &pose, None, 0, &obs_cfg);
            for pr in 0..v {
                for pc in 0..v {
                    let (f, s) = (half - pr, pc - half);
                    // World offset computed independently of the heading helpers.
                    let (dr, dc) = match pose.heading {
                        Heading::N => (-f, s),
                        Heading::E => (s, f),
                        Heading::S => (f, -s),
                        Heading::W => (-s, -f),
                    };
                    let (wr, wc) = (row as i64 + dr, col as i64 + dc);
                    let inside = wr >= 0 && wc >= 0 && (wr as usize) < scene.height && (wc as usize) < scene.width;
                    let expected = if !inside || !line_of_sight(&grid, (row as i64, col as i64), (wr, wc)) {
                        PATCH_UNKNOWN
                    } else {
                        match grid[wr as usize][wc as usize] {
                            OracleCell::Free => PATCH_FREE,
                            OracleCell::Wall => PATCH_WALL,
                            OracleCell::Object(c) => PATCH_OBJECT_BASE + c as u8,
                        }
                    };
                    assert_eq!(
                        obs.semantic_patch[(pr * v + pc) as usize],
                        expected,
                        "seed {seed} pose {pose:?} patch ({pr}, {pc})"
                    );
                }
            }
        }
    }
}

#[test]
fn expert_forward_moves_equal_bfs_distance() {
    let obs_cfg = ObsConfig::default();
    let ep_cfg = EpisodeConfig::default();
    let mut checked = 0;
    for seed in 0..60 {
        let cfg = SceneConfig {
            width: 12,
            height: 12,
            room_count: 2,
            categories_present: vec![0, 1, 2, 3, 4, 5],
            instances_per_category: 1,
        };
        let scene = generate_scene(seed, seed, &cfg).unwrap();
        let grid = oracle_grid(&scene);
        let mut rng = substream(seed, "episodes", 0);
        for goal in 0..6 {
            let ep = sample_episode(&scene, goal as u64, goal, &ep_cfg, &mut rng).unwrap();
            let traj = plan_expert(&scene, &ep, &obs_cfg).unwrap();
            let bfs = geodesic_bfs(&grid, (ep.start.row, ep.start.col), goal).unwrap();
            let forwards = traj.actions.iter().filter(|&&a| a == NavAction::MoveForward).count();
            assert_eq!(forwards, bfs, "seed {seed} goal {goal}");
            assert_eq!(ep.p_star, bfs);
            assert_eq!(*traj.actions.last().unwrap(), NavAction::Stop);
            assert!(traj.len() <= ep.max_steps);

            // Replaying the actions reproduces every stored observation.
            let mut pose = ep.start;
            let mut prev = None;
            for (t, &a) in traj.actions.iter().enumerate() {
                assert_eq!(traj.observations[t], observe(&scene, &pose, &ep.start, prev, goal, &obs_cfg));
                pose = step(&scene, pose, a);
                prev = Some(a);
            }
            assert!(scene.in_success_region(pose.row, pose.col, goal));
            checked += 1;
        }
    }
    assert_eq!(checked, 360);
}

struct RandomPolicy(ChaCha8Rng);

impl Policy for RandomPolicy {
    fn reset(&mut self, _: &Episode) {}
    fn act(&mut self, _: &Observation) -> NavAction {
        NavAction::ALL[self.0.random_range(0..6)]
    }
}

#[test]
fn random_policy_is_below_expert() {
    let obs_cfg = ObsConfig::default();
    let ep_cfg = EpisodeConfig {
        min_geodesic: 2,
        ..EpisodeConfig::default()
    };
    let cfg = SceneConfig {
        width: 12,
        height: 12,
        room_count: 2,
        categories_present: vec![0, 1, 2],
        instances_per_category: 1,
    };
    let mut random = RandomPolicy(ChaCha8Rng::seed_from_u64(0));
    let (mut random_wins, mut expert_wins) = (0, 0);
    for i in 0..200u64 {
        let scene = generate_scene(i, i, &cfg).unwrap();
        let ep = sample_episode(&scene, i, (i % 3) as u32, &ep_cfg, &mut substream(i, "ep", 0)).unwrap();
        if rollout(&scene, &ep, &mut random, &obs_cfg).success {
            random_wins += 1;
        }
        let mut expert = ExpertPolicy::new(&scene, obs_cfg.clone());
        if rollout(&scene, &ep, &mut expert, &obs_cfg).success {
            expert_wins += 1;
        }
    }
    assert_eq!(expert_wins, 200);
    assert!(random_wins < 200, "random policy won {random_wins}/200");
}
