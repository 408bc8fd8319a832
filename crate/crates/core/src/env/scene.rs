use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CategoryId, Cell, EnvError, Scene};
use crate::rng::substream;

/// Inclusive interior bounds of a room.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Room {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Room {
    fn rows(&self) -> usize {
        self.bottom - self.top + 1
    }

    fn cols(&self) -> usize {
        self.right - self.left + 1
    }

    fn area(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..=self.bottom).contains(&row) && (self.left..=self.right).contains(&col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub room_count: usize,
    pub categories_present: Vec<CategoryId>,
    #[serde(default = "one")]
    pub instances_per_category: usize,
}

fn one() -> usize {
    1
}

/// Smallest room side produced by a split.
const MIN_ROOM: usize = 3;

/// Builds a scene by binary space partitioning: the interior is split into
/// `room_count` rectangles separated by one-cell walls, each split wall gets
/// one door, and objects are placed against walls without breaking
/// connectivity.
pub fn generate_scene(id: u64, seed: u64, cfg: &SceneConfig) -> Result<Scene, EnvError> {
    if cfg.width < 8 || cfg.height < 8 {
        return Err(EnvError::InvalidConfig(format!(
            "scene must be at least 8x8, got {}x{}",
            cfg.height, cfg.width
        )));
    }
    if cfg.room_count == 0 {
        return Err(EnvError::InvalidConfig("room_count must be at least 1".into()));
    }
    let mut rng = substream(seed, "scene-gen", 0);
    let (h, w) = (cfg.height, cfg.width);
    let mut cells = vec![Cell::Wall; h * w];
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            cells[r * w + c] = Cell::Free;
        }
    }

    let mut rooms = vec![Room {
        top: 1,
        left: 1,
        bottom: h - 2,
        right: w - 2,
    }];
    let mut doors: Vec<(usize, usize)> = Vec::new();

    let near_door = |doors: &[(usize, usize)], r: usize, c: usize| {
        doors.iter().any(|&(dr, dc)| dr.abs_diff(r) + dc.abs_diff(c) <= 1)
    };

    while rooms.len() < cfg.room_count {
        let mut order: Vec<usize> = (0..rooms.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(rooms[i].area()));
        let mut split = None;
        'rooms: for &ri in &order {
            let room = rooms[ri];
            let horizontal_first = match room.rows().cmp(&room.cols()) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => rng.random_bool(0.5),
            };
            for horizontal in [horizontal_first, !horizontal_first] {
                // Wall line candidates leave at least MIN_ROOM cells on each side
                // and never touch an existing door.
                let candidates: Vec<usize> = if horizontal {
                    (room.top + MIN_ROOM..=room.bottom.saturating_sub(MIN_ROOM))
                        .filter(|&s| (room.left..=room.right).all(|c| !near_door(&doors, s, c)))
                        .collect()
                } else {
                    (room.left + MIN_ROOM..=room.right.saturating_sub(MIN_ROOM))
                        .filter(|&s| (room.top..=room.bottom).all(|r| !near_door(&doors, r, s)))
                        .collect()
                };
                if let Some(&line) = candidates.choose(&mut rng) {
                    split = Some((ri, horizontal, line));
                    break 'rooms;
                }
            }
        }
        let Some((ri, horizontal, line)) = split else {
            return Err(EnvError::InvalidConfig(format!(
                "{} rooms do not fit in a {}x{} scene",
                cfg.room_count, h, w
            )));
        };
        let room = rooms[ri];
        let (a, b, door) = if horizontal {
            for c in room.left..=room.right {
                cells[line * w + c] = Cell::Wall;
            }
            let dc = rng.random_range(room.left..=room.right);
            (
                Room { bottom: line - 1, ..room },
                Room { top: line + 1, ..room },
                (line, dc),
            )
        } else {
            for r in room.top..=room.bottom {
                cells[r * w + line] = Cell::Wall;
            }
            let dr = rng.random_range(room.top..=room.bottom);
            (
                Room { right: line - 1, ..room },
                Room { left: line + 1, ..room },
                (dr, line),
            )
        };
        cells[door.0 * w + door.1] = Cell::Free;
        doors.push(door);
        rooms[ri] = a;
        rooms.push(b);
    }

    let mut scene = Scene {
        id,
        seed,
        width: w,
        height: h,
        cells,
        rooms,
        doors,
    };
    place_objects(&mut scene, cfg, &mut rng)?;
    Ok(scene)
}

fn place_objects(scene: &mut Scene, cfg: &SceneConfig, rng: &mut impl Rng) -> Result<(), EnvError> {
    let (h, w) = (scene.height, scene.width);
    for &category in &cfg.categories_present {
        for instance in 0..cfg.instances_per_category {
            let mut candidates: Vec<(usize, usize)> = (1..h - 1)
                .flat_map(|r| (1..w - 1).map(move |c| (r, c)))
                .filter(|&(r, c)| {
                    scene.cell(r, c).is_free()
                        && scene.rooms.iter().any(|room| room.contains(r, c))
                        && touches_wall(scene, r, c)
                        && !scene.doors.iter().any(|&(dr, dc)| dr.abs_diff(r) <= 1 && dc.abs_diff(c) <= 1)
                        && !near_object(scene, r, c)
                })
                .collect();
            candidates.shuffle(rng);
            let mut placed = false;
            for (r, c) in candidates {
                scene.cells[r * w + c] = Cell::Object {
                    category,
                    instance: instance as u32,
                };
                if free_space_connected(scene) {
                    placed = true;
                    break;
                }
                scene.cells[r * w + c] = Cell::Free;
            }
            if !placed {
                return Err(EnvError::Unplaceable(category));
            }
        }
    }
    Ok(())
}

fn touches_wall(scene: &Scene, r: usize, c: usize) -> bool {
    [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)]
        .iter()
        .any(|&(dr, dc)| scene.cell_at(r as i64 + dr, c as i64 + dc) == Cell::Wall)
}

fn near_object(scene: &Scene, r: usize, c: usize) -> bool {
    (-1..=1i64).any(|dr| {
        (-1..=1i64).any(|dc| matches!(scene.cell_at(r as i64 + dr, c as i64 + dc), Cell::Object { .. }))
    })
}

/// True when every free cell is 4-connected to every other.
pub(crate) fn free_space_connected(scene: &Scene) -> bool {
    let total = scene.cells.iter().filter(|c| c.is_free()).count();
    let Some(start) = scene.cells.iter().position(|c| c.is_free()) else {
        return false;
    };
    let w = scene.width;
    let mut seen = vec![false; scene.cells.len()];
    let mut stack = vec![start];
    seen[start] = true;
    let mut count = 0;
    while let Some(i) = stack.pop() {
        count += 1;
        let (r, c) = (i / w, i % w);
        for (nr, nc) in [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)] {
            let j = nr * w + nc;
            if !seen[j] && scene.cells[j].is_free() {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    count == total
}
