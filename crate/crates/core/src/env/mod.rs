//! Cooperative gridworlds with partial RGB views.
//!
//! Both tasks share one [`EnvState`]: static terrain plus agent and ghost
//! positions. Agents act simultaneously but are resolved in index order;
//! a move into anything other than a free cell is a no-op.

mod ghostrun;
mod maze;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ghostrun::{ghostrun_step, GhostRunConfig};
pub use maze::{mazecleaners_step, MazeConfig, MazeMap, DEFAULT_MAZE};

use crate::error::{Error, Result};
use crate::image::{Image, Rgb};

pub const GHOST_RGB: Rgb = [255, 0, 0];
pub const TREE_RGB: Rgb = [0, 128, 0];
pub const BLOCK_RGB: Rgb = [0, 0, 0];
pub const AGENT_RGB: Rgb = [0, 0, 255];
pub const EMPTY_RGB: Rgb = [255, 255, 255];
pub const DIRTY_RGB: Rgb = [0, 255, 0];
/// Cells outside the grid.
pub const BORDER_RGB: Rgb = [128, 128, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    #[serde(alias = "GhostRun")]
    Ghostrun,
    #[serde(alias = "MazeCleaners")]
    Mazecleaners,
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvKind::Ghostrun => "ghostrun",
            EnvKind::Mazecleaners => "mazecleaners",
        })
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ghostrun" => Ok(EnvKind::Ghostrun),
            "mazecleaners" => Ok(EnvKind::Mazecleaners),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EnvConfig {
    GhostRun(GhostRunConfig),
    MazeCleaners(MazeConfig),
}

impl EnvConfig {
    pub fn kind(&self) -> EnvKind {
        match self {
            EnvConfig::GhostRun(_) => EnvKind::Ghostrun,
            EnvConfig::MazeCleaners(_) => EnvKind::Mazecleaners,
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            EnvConfig::GhostRun(c) => c.n_agents,
            EnvConfig::MazeCleaners(c) => c.n_agents,
        }
    }

    pub fn view_radius(&self) -> usize {
        match self {
            EnvConfig::GhostRun(c) => c.view_radius,
            EnvConfig::MazeCleaners(c) => c.view_radius,
        }
    }

    /// Side length of each agent's square view.
    pub fn view_size(&self) -> usize {
        2 * self.view_radius() + 1
    }

    pub fn max_steps(&self) -> usize {
        match self {
            EnvConfig::GhostRun(c) => c.max_steps,
            EnvConfig::MazeCleaners(c) => c.max_steps,
        }
    }

    pub fn n_ghosts(&self) -> Option<usize> {
        match self {
            EnvConfig::GhostRun(c) => Some(c.n_ghosts),
            EnvConfig::MazeCleaners(_) => None,
        }
    }
}

/// Static contents of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Terrain {
    Empty,
    Tree,
    Obstacle,
    Wall,
    Dirty,
    Clean,
}

impl Terrain {
    fn passable(self) -> bool {
        matches!(self, Terrain::Empty | Terrain::Dirty | Terrain::Clean)
    }
}

/// What occupies a cell, with moving entities taking precedence over terrain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    Empty,
    Agent(usize),
    Ghost,
    Tree,
    Obstacle,
    Wall,
    Dirty,
    Clean,
}

impl Cell {
    pub fn color(self) -> Rgb {
        match self {
            Cell::Empty | Cell::Clean => EMPTY_RGB,
            Cell::Agent(_) => AGENT_RGB,
            Cell::Ghost => GHOST_RGB,
            Cell::Tree => TREE_RGB,
            Cell::Obstacle | Cell::Wall => BLOCK_RGB,
            Cell::Dirty => DIRTY_RGB,
        }
    }
}

pub type Pos = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub config: EnvConfig,
    pub height: usize,
    pub width: usize,
    pub terrain: Vec<Terrain>,
    pub agents: Vec<Pos>,
    pub ghosts: Vec<Pos>,
    pub step: usize,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepInfo {
    /// Ghosts inside each agent's view after the move.
    pub ghosts_visible: Vec<usize>,
    pub cells_cleaned: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observations: Vec<Image>,
    /// Team reward, identical for every agent.
    pub reward: f64,
    pub done: bool,
    /// The episode ended only because the step limit was reached.
    pub truncated: bool,
    pub info: StepInfo,
}

impl EnvState {
    pub fn kind(&self) -> EnvKind {
        self.config.kind()
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn terrain_at(&self, (r, c): Pos) -> Terrain {
        self.terrain[r * self.width + c]
    }

    pub(crate) fn set_terrain(&mut self, (r, c): Pos, t: Terrain) {
        self.terrain[r * self.width + c] = t;
    }

    pub fn cell(&self, pos: Pos) -> Cell {
        if let Some(i) = self.agents.iter().position(|&a| a == pos) {
            return Cell::Agent(i);
        }
        if self.ghosts.contains(&pos) {
            return Cell::Ghost;
        }
        match self.terrain_at(pos) {
            Terrain::Empty => Cell::Empty,
            Terrain::Tree => Cell::Tree,
            Terrain::Obstacle => Cell::Obstacle,
            Terrain::Wall => Cell::Wall,
            Terrain::Dirty => Cell::Dirty,
            Terrain::Clean => Cell::Clean,
        }
    }

    /// In bounds, passable terrain, and no agent or ghost on it.
    pub fn is_free(&self, pos: Pos) -> bool {
        pos.0 < self.height
            && pos.1 < self.width
            && self.terrain_at(pos).passable()
            && !self.agents.contains(&pos)
            && !self.ghosts.contains(&pos)
    }

    fn offset(&self, (r, c): Pos, a: Action) -> Option<Pos> {
        let (dr, dc) = a.delta();
        let r = r.checked_add_signed(dr)?;
        let c = c.checked_add_signed(dc)?;
        (r < self.height && c < self.width).then_some((r, c))
    }

    /// Moves agents in index order; returns the cells each agent entered.
    fn move_agents(&mut self, actions: &[Action]) -> Result<Vec<Option<Pos>>> {
        if actions.len() != self.agents.len() {
            return Err(Error::Config(format!(
                "expected {} actions, got {}",
                self.agents.len(),
                actions.len()
            )));
        }
        let mut entered = Vec::with_capacity(actions.len());
        for (i, &a) in actions.iter().enumerate() {
            match self.offset(self.agents[i], a) {
                Some(target) if self.is_free(target) => {
                    self.agents[i] = target;
                    entered.push(Some(target));
                }
                _ => entered.push(None),
            }
        }
        Ok(entered)
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        match self.kind() {
            EnvKind::Ghostrun => ghostrun_step(self, actions),
            EnvKind::Mazecleaners => mazecleaners_step(self, actions),
        }
    }

    pub fn observations(&self) -> Vec<Image> {
        (0..self.agents.len()).map(|i| extract_view(self, i)).collect()
    }

    /// `true` if `target` lies inside the square view of `agent`.
    pub fn in_view(&self, agent: usize, target: Pos) -> bool {
        let r = self.config.view_radius();
        let (ar, ac) = self.agents[agent];
        ar.abs_diff(target.0) <= r && ac.abs_diff(target.1) <= r
    }
}

/// Render the `(2r+1) × (2r+1)` window centred on `agent`.
pub fn extract_view(state: &EnvState, agent: usize) -> Image {
    let r = state.config.view_radius() as isize;
    let side = (2 * r + 1) as usize;
    let (ar, ac) = state.agents[agent];
    let mut img = Image::filled(side, side, BORDER_RGB);
    for dr in -r..=r {
        for dc in -r..=r {
            let (gr, gc) = (ar as isize + dr, ac as isize + dc);
            if gr < 0 || gc < 0 || gr >= state.height as isize || gc >= state.width as isize {
                continue;
            }
            let color = state.cell((gr as usize, gc as usize)).color();
            img.set((dr + r) as usize, (dc + r) as usize, color);
        }
    }
    img
}

/// Start a new episode. Randomness for this episode comes from `seed` only.
pub fn env_reset(config: &EnvConfig, seed: u64) -> Result<(EnvState, Vec<Image>)> {
    let rng = ChaCha8Rng::seed_from_u64(seed);
    let state = match config {
        EnvConfig::GhostRun(c) => ghostrun::reset(c, rng)?,
        EnvConfig::MazeCleaners(c) => maze::reset(c, rng)?,
    };
    let obs = state.observations();
    Ok((state, obs))
}

/// Episodes per extra ghost in the continual-difficulty protocol.
pub const CONTINUAL_PERIOD: usize = 50;

/// Adds one ghost for every [`CONTINUAL_PERIOD`] episodes elapsed.
pub fn continual_schedule(base: &GhostRunConfig, episode_index: usize) -> GhostRunConfig {
    GhostRunConfig {
        n_ghosts: base.n_ghosts + episode_index / CONTINUAL_PERIOD,
        ..base.clone()
    }
}

/// Extra ghosts in the GhostRun distribution-shift variant.
pub const OOD_EXTRA_GHOSTS: usize = 2;
/// Offset applied to the GhostRun layout seed in the shifted variant.
pub const OOD_LAYOUT_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// Shifted test configuration: random spawns for MazeCleaners; more ghosts
/// and a different tree/obstacle layout for GhostRun.
pub fn ood_variant(base: &EnvConfig) -> EnvConfig {
    match base {
        EnvConfig::MazeCleaners(c) => EnvConfig::MazeCleaners(MazeConfig {
            random_spawn: true,
            ..c.clone()
        }),
        EnvConfig::GhostRun(c) => EnvConfig::GhostRun(GhostRunConfig {
            n_ghosts: c.n_ghosts + OOD_EXTRA_GHOSTS,
            layout_seed: c.layout_seed.wrapping_add(OOD_LAYOUT_OFFSET),
            ..c.clone()
        }),
    }
}

/// Pick `count` distinct cells uniformly from `free` (consumed in place).
pub(crate) fn sample_cells(rng: &mut ChaCha8Rng, free: &mut Vec<Pos>, count: usize) -> Result<Vec<Pos>> {
    use rand::Rng;
    if count > free.len() {
        return Err(Error::Config(format!(
            "cannot place {count} entities on {} free cells",
            free.len()
        )));
    }
    Ok((0..count)
        .map(|_| {
            let i = rng.gen_range(0..free.len());
            free.swap_remove(i)
        })
        .collect())
}
