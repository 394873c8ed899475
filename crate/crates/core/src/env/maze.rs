use std::collections::VecDeque;
use std::path::PathBuf;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_cells, Action, EnvConfig, EnvState, Pos, StepInfo, StepResult, Terrain};
use crate::error::{Error, Result};

/// The shipped 13×13 maze: `#` wall, `.` dirty floor, `A`/`B` agent spawns.
pub const DEFAULT_MAZE: &str = include_str!("../../data/maze13.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MazeConfig {
    pub n_agents: usize,
    /// Spawn agents on random floor cells instead of the marked spawns.
    pub random_spawn: bool,
    pub max_steps: usize,
    pub view_radius: usize,
    /// Alternative map file; the built-in maze is used when absent.
    pub map_path: Option<PathBuf>,
}

impl Default for MazeConfig {
    fn default() -> Self {
        MazeConfig {
            n_agents: 2,
            random_spawn: false,
            max_steps: 200,
            view_radius: 3,
            map_path: None,
        }
    }
}

impl MazeConfig {
    pub fn load_map(&self) -> Result<MazeMap> {
        match &self.map_path {
            None => MazeMap::parse(DEFAULT_MAZE),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                MazeMap::parse(&text)
            }
        }
    }
}

/// Parsed maze layout. Connectivity of all floor cells is checked on parse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MazeMap {
    pub height: usize,
    pub width: usize,
    pub walls: Vec<bool>,
    /// Spawn cells in agent order (`A`, `B`, ...).
    pub spawns: Vec<Pos>,
}

impl MazeMap {
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if height == 0 || width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::Config("maze map must be a non-empty rectangle".into()));
        }
        let mut walls = Vec::with_capacity(height * width);
        let mut spawns: Vec<(u8, Pos)> = Vec::new();
        for (r, row) in rows.iter().enumerate() {
            for (c, ch) in row.bytes().enumerate() {
                match ch {
                    b'#' => walls.push(true),
                    b'.' => walls.push(false),
                    b'A'..=b'Z' => {
                        walls.push(false);
                        spawns.push((ch, (r, c)));
                    }
                    other => {
                        return Err(Error::Config(format!(
                            "unexpected maze character {:?} at ({r}, {c})",
                            other as char
                        )))
                    }
                }
            }
        }
        spawns.sort_unstable();
        if spawns.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Config("duplicate spawn marker in maze".into()));
        }
        let map = MazeMap {
            height,
            width,
            walls,
            spawns: spawns.into_iter().map(|(_, p)| p).collect(),
        };
        map.check_connected()?;
        Ok(map)
    }

    pub fn is_wall(&self, (r, c): Pos) -> bool {
        self.walls[r * self.width + c]
    }

    pub fn floor_cells(&self) -> Vec<Pos> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&p| !self.is_wall(p))
            .collect()
    }

    fn check_connected(&self) -> Result<()> {
        let floor = self.floor_cells();
        let Some(&start) = floor.first() else {
            return Err(Error::Config("maze has no floor".into()));
        };
        let mut seen = vec![false; self.walls.len()];
        seen[start.0 * self.width + start.1] = true;
        let mut queue = VecDeque::from([start]);
        let mut reached = 1;
        while let Some((r, c)) = queue.pop_front() {
            let next = [
                (r.wrapping_sub(1), c),
                (r + 1, c),
                (r, c.wrapping_sub(1)),
                (r, c + 1),
            ];
            for (nr, nc) in next {
                if nr < self.height && nc < self.width && !self.is_wall((nr, nc)) && !seen[nr * self.width + nc] {
                    seen[nr * self.width + nc] = true;
                    reached += 1;
                    queue.push_back((nr, nc));
                }
            }
        }
        if reached != floor.len() {
            return Err(Error::Config(format!(
                "maze floor is disconnected: {reached} of {} cells reachable",
                floor.len()
            )));
        }
        Ok(())
    }
}

pub(super) fn reset(cfg: &MazeConfig, mut rng: ChaCha8Rng) -> Result<EnvState> {
    let map = cfg.load_map()?;
    if cfg.max_steps == 0 {
        return Err(Error::Config("max_steps must be positive".into()));
    }
    let side = 2 * cfg.view_radius + 1;
    if side > map.height.min(map.width) {
        return Err(Error::Config(format!("{side}x{side} view does not fit the maze")));
    }
    let agents = if cfg.random_spawn {
        let mut floor = map.floor_cells();
        sample_cells(&mut rng, &mut floor, cfg.n_agents)?
    } else {
        if map.spawns.len() < cfg.n_agents {
            return Err(Error::Config(format!(
                "maze has {} spawn markers for {} agents",
                map.spawns.len(),
                cfg.n_agents
            )));
        }
        map.spawns[..cfg.n_agents].to_vec()
    };
    let mut terrain: Vec<Terrain> = map
        .walls
        .iter()
        .map(|&w| if w { Terrain::Wall } else { Terrain::Dirty })
        .collect();
    for &(r, c) in &agents {
        terrain[r * map.width + c] = Terrain::Clean;
    }
    Ok(EnvState {
        config: EnvConfig::MazeCleaners(cfg.clone()),
        height: map.height,
        width: map.width,
        terrain,
        agents,
        ghosts: Vec::new(),
        step: 0,
        rng,
    })
}

pub(crate) fn dirty_cells(state: &EnvState) -> usize {
    state.terrain.iter().filter(|&&t| t == Terrain::Dirty).count()
}

/// Agents move in index order; every dirty cell entered becomes clean and
/// pays +1 to the whole team.
pub fn mazecleaners_step(state: &mut EnvState, actions: &[Action]) -> Result<StepResult> {
    let EnvConfig::MazeCleaners(cfg) = &state.config else {
        return Err(Error::Config("mazecleaners_step on a non-MazeCleaners state".into()));
    };
    let max_steps = cfg.max_steps;
    let entered = state.move_agents(actions)?;
    let mut cleaned = 0;
    for pos in entered.into_iter().flatten() {
        if state.terrain_at(pos) == Terrain::Dirty {
            state.set_terrain(pos, Terrain::Clean);
            cleaned += 1;
        }
    }
    state.step += 1;
    Ok(StepResult {
        observations: state.observations(),
        reward: cleaned as f64,
        done: dirty_cells(state) == 0 || state.step >= max_steps,
        truncated: dirty_cells(state) > 0 && state.step >= max_steps,
        info: StepInfo {
            ghosts_visible: vec![0; state.agents.len()],
            cells_cleaned: cleaned,
        },
    })
}
