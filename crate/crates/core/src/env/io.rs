//! JSONL records for scenes and trajectories. Trajectories store the episode
//! header and action codes only; observations are regenerated on load.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{replay_observations, Cell, EnvError, Episode, NavAction, ObsConfig, Room, Scene, Trajectory};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub row: usize,
    pub col: usize,
    pub category: u32,
    pub instance: u32,
}

/// One scene per line. `grid` rows use `.` for free, `#` for wall and `o`
/// for an object listed in `objects`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: u64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub grid: Vec<String>,
    pub objects: Vec<ObjectRecord>,
    pub rooms: Vec<Room>,
    pub doors: Vec<(usize, usize)>,
}

impl From<&Scene> for SceneRecord {
    fn from(s: &Scene) -> Self {
        let mut objects = Vec::new();
        let grid = (0..s.height)
            .map(|r| {
                (0..s.width)
                    .map(|c| match s.cell(r, c) {
                        Cell::Free => '.',
                        Cell::Wall => '#',
                        Cell::Object { category, instance } => {
                            objects.push(ObjectRecord {
                                row: r,
                                col: c,
                                category,
                                instance,
                            });
                            'o'
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            id: s.id,
            seed: s.seed,
            width: s.width,
            height: s.height,
            grid,
            objects,
            rooms: s.rooms.clone(),
            doors: s.doors.clone(),
        }
    }
}

impl TryFrom<&SceneRecord> for Scene {
    type Error = EnvError;

    fn try_from(rec: &SceneRecord) -> Result<Self, EnvError> {
        if rec.grid.len() != rec.height || rec.grid.iter().any(|row| row.chars().count() != rec.width) {
            return Err(EnvError::Record(format!("scene {}: grid does not match its dimensions", rec.id)));
        }
        let mut cells = Vec::with_capacity(rec.width * rec.height);
        for row in &rec.grid {
            for ch in row.chars() {
                cells.push(match ch {
                    '.' => Cell::Free,
                    '#' | 'o' => Cell::Wall,
                    other => return Err(EnvError::Record(format!("scene {}: unknown cell '{other}'", rec.id))),
                });
            }
        }
        for o in &rec.objects {
            let idx = o.row * rec.width + o.col;
            if rec.grid[o.row].as_bytes().get(o.col) != Some(&b'o') {
                return Err(EnvError::Record(format!("scene {}: object at ({}, {}) not marked", rec.id, o.row, o.col)));
            }
            cells[idx] = Cell::Object {
                category: o.category,
                instance: o.instance,
            };
        }
        Ok(Scene {
            id: rec.id,
            seed: rec.seed,
            width: rec.width,
            height: rec.height,
            cells,
            rooms: rec.rooms.clone(),
            doors: rec.doors.clone(),
        })
    }
}

pub type EpisodeRecord = Episode;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode: Episode,
    pub actions: Vec<u8>,
}

impl From<&Trajectory> for TrajectoryRecord {
    fn from(t: &Trajectory) -> Self {
        Self {
            episode: t.episode.clone(),
            actions: t.actions.iter().map(|a| a.code()).collect(),
        }
    }
}

impl TrajectoryRecord {
    /// Rebuilds the full trajectory by replaying the actions in `scene`.
    pub fn restore(&self, scene: &Scene, obs_cfg: &ObsConfig) -> Result<Trajectory, EnvError> {
        if scene.id != self.episode.scene_id {
            return Err(EnvError::Record(format!(
                "trajectory for scene {} restored against scene {}",
                self.episode.scene_id, scene.id
            )));
        }
        let actions = self
            .actions
            .iter()
            .map(|&c| NavAction::from_code(c).ok_or_else(|| EnvError::Record(format!("bad action code {c}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let observations = replay_observations(scene, &self.episode, &actions, obs_cfg)?;
        Ok(Trajectory {
            episode: self.episode.clone(),
            observations,
            actions,
        })
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), EnvError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, EnvError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut items = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line)?);
    }
    Ok(items)
}
