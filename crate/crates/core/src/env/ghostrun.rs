use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_cells, Action, EnvConfig, EnvState, Pos, StepInfo, StepResult, Terrain};
use crate::error::{Error, Result};

/// GhostRun: agents try to keep ghosts out of their views.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GhostRunConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_agents: usize,
    pub n_ghosts: usize,
    pub n_trees: usize,
    pub n_obstacles: usize,
    pub view_radius: usize,
    pub max_steps: usize,
    /// Seeds the tree/obstacle layout, which stays fixed across episodes.
    pub layout_seed: u64,
    /// Count each visible ghost once for the team instead of once per
    /// observing agent.
    pub count_unique_ghosts: bool,
}

impl Default for GhostRunConfig {
    fn default() -> Self {
        GhostRunConfig {
            grid_h: 20,
            grid_w: 20,
            n_agents: 3,
            n_ghosts: 3,
            n_trees: 5,
            n_obstacles: 5,
            view_radius: 3,
            max_steps: 100,
            layout_seed: 0,
            count_unique_ghosts: false,
        }
    }
}

impl GhostRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::Config("GhostRun needs at least one agent".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        let side = 2 * self.view_radius + 1;
        if side > self.grid_h.min(self.grid_w) {
            return Err(Error::Config(format!(
                "{side}x{side} view does not fit a {}x{} grid",
                self.grid_h, self.grid_w
            )));
        }
        let entities = self.n_agents + self.n_ghosts + self.n_trees + self.n_obstacles;
        if entities > self.grid_h * self.grid_w {
            return Err(Error::Config(format!(
                "{entities} entities do not fit a {}x{} grid",
                self.grid_h, self.grid_w
            )));
        }
        Ok(())
    }
}

pub(super) fn reset(cfg: &GhostRunConfig, mut rng: ChaCha8Rng) -> Result<EnvState> {
    cfg.validate()?;
    let (h, w) = (cfg.grid_h, cfg.grid_w);
    let mut terrain = vec![Terrain::Empty; h * w];
    let mut free: Vec<Pos> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();

    let mut layout_rng = ChaCha8Rng::seed_from_u64(cfg.layout_seed);
    for (kind, count) in [(Terrain::Tree, cfg.n_trees), (Terrain::Obstacle, cfg.n_obstacles)] {
        for (r, c) in sample_cells(&mut layout_rng, &mut free, count)? {
            terrain[r * w + c] = kind;
        }
    }
    // Restore a canonical order so spawn draws do not depend on layout history.
    free.sort_unstable();
    let agents = sample_cells(&mut rng, &mut free, cfg.n_agents)?;
    let ghosts = sample_cells(&mut rng, &mut free, cfg.n_ghosts)?;
    Ok(EnvState {
        config: EnvConfig::GhostRun(cfg.clone()),
        height: h,
        width: w,
        terrain,
        agents,
        ghosts,
        step: 0,
        rng,
    })
}

/// Per-agent count of ghosts inside that agent's view.
pub(crate) fn visible_ghosts(state: &EnvState) -> Vec<usize> {
    (0..state.agents.len())
        .map(|a| state.ghosts.iter().filter(|&&g| state.in_view(a, g)).count())
        .collect()
}

/// Agents move first, then every ghost takes one uniformly random step.
/// Reward is `-(visible ghosts summed over agents) - 1` for every agent.
pub fn ghostrun_step(state: &mut EnvState, actions: &[Action]) -> Result<StepResult> {
    let EnvConfig::GhostRun(cfg) = &state.config else {
        return Err(Error::Config("ghostrun_step on a non-GhostRun state".into()));
    };
    let (max_steps, unique) = (cfg.max_steps, cfg.count_unique_ghosts);
    state.move_agents(actions)?;
    for gi in 0..state.ghosts.len() {
        let dir = Action::ALL[state.rng.gen_range(0..4)];
        if let Some(target) = state.offset(state.ghosts[gi], dir) {
            if state.is_free(target) {
                state.ghosts[gi] = target;
            }
        }
    }
    state.step += 1;

    let per_agent = visible_ghosts(state);
    let seen = if unique {
        state
            .ghosts
            .iter()
            .filter(|&&g| (0..state.agents.len()).any(|a| state.in_view(a, g)))
            .count()
    } else {
        per_agent.iter().sum()
    };
    Ok(StepResult {
        observations: state.observations(),
        reward: -(seen as f64) - 1.0,
        done: state.step >= max_steps,
        truncated: state.step >= max_steps,
        info: StepInfo {
            ghosts_visible: per_agent,
            cells_cleaned: 0,
        },
    })
}
