//! Experiment runs: training per seed, IID/OOD evaluation, metrics files,
//! checkpoints and cross-run comparison.
//!
//! A run directory holds `experiment.json` (the resolved configuration) and
//! one `seed_<s>/` directory per seed with `metrics.csv`, `run.json` and a
//! checkpoint.

pub mod checkpoint;
pub mod metrics;
pub mod report;
mod svg;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{Architecture, NetConfig, Team};
use crate::env::{continual_schedule, ood_variant, EnvConfig, EnvKind, GhostRunConfig, MazeConfig};
use crate::error::{Error, Result};
use crate::training::{play_episode, PpoConfig, Trainer};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use metrics::{load_metrics, save_metrics, MetricsRecord, Phase};
pub use report::{aggregate_and_emit, ComparisonRow, Emit};

pub const EXPERIMENT_FILE: &str = "experiment.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RUN_FILE: &str = "run.json";

fn default_episodes() -> usize {
    1000
}

fn default_eval_window() -> usize {
    100
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: EnvKind,
    pub hypothesis: Architecture,
    #[serde(default)]
    pub ghostrun: GhostRunConfig,
    #[serde(default)]
    pub mazecleaners: MazeConfig,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    /// Test episodes per evaluation mode.
    #[serde(default = "default_eval_window")]
    pub eval_window: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Add a ghost every 50 training episodes (GhostRun only).
    #[serde(default)]
    pub continual: bool,
    /// One network for the whole team instead of one per agent.
    #[serde(default = "default_true")]
    pub share_parameters: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(task: EnvKind, hypothesis: Architecture) -> Self {
        ExperimentConfig {
            task,
            hypothesis,
            ghostrun: GhostRunConfig::default(),
            mazecleaners: MazeConfig::default(),
            net: NetConfig::default(),
            ppo: PpoConfig::default(),
            episodes: default_episodes(),
            eval_window: default_eval_window(),
            seeds: default_seeds(),
            continual: false,
            share_parameters: true,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.eval_window > self.episodes {
            return Err(Error::Config(format!(
                "eval_window {} exceeds episodes {}",
                self.eval_window, self.episodes
            )));
        }
        if self.continual && self.task != EnvKind::Ghostrun {
            return Err(Error::Config("the continual protocol only applies to GhostRun".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        self.ppo.validate()?;
        match self.base_env() {
            EnvConfig::GhostRun(c) => c.validate()?,
            EnvConfig::MazeCleaners(c) => {
                c.load_map()?;
            }
        }
        self.net.patch_layout(self.base_env().view_size())?;
        Ok(())
    }

    pub fn base_env(&self) -> EnvConfig {
        match self.task {
            EnvKind::Ghostrun => EnvConfig::GhostRun(self.ghostrun.clone()),
            EnvKind::Mazecleaners => EnvConfig::MazeCleaners(self.mazecleaners.clone()),
        }
    }

    /// Environment for training episode `episode`.
    pub fn train_env(&self, episode: usize) -> EnvConfig {
        match (self.continual, self.base_env()) {
            (true, EnvConfig::GhostRun(c)) => EnvConfig::GhostRun(continual_schedule(&c, episode)),
            (_, env) => env,
        }
    }

    /// In-distribution test environment: the one the final training
    /// episode used.
    pub fn test_env(&self) -> EnvConfig {
        self.train_env(self.episodes.saturating_sub(1))
    }
}

/// Independent random streams derived from one user seed.
pub mod streams {
    pub const NET_INIT: u64 = 1;
    pub const TRAINER: u64 = 2;
    pub const TRAIN_ENV: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const EVAL_ENV: u64 = 5;
    pub const EVAL_POLICY: u64 = 6;
}

/// SplitMix64-style hash of `(base, stream, index)`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Iid,
    Ood,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iid" => Ok(EvalMode::Iid),
            "ood" => Ok(EvalMode::Ood),
            other => Err(Error::Config(format!("unknown evaluation mode {other:?}"))),
        }
    }
}

/// Per-episode test rewards with their mean and population standard
/// deviation (absent when there are no episodes).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub rewards: Vec<f64>,
}

impl Summary {
    pub fn from_rewards(rewards: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&rewards).unzip();
        Summary { mean, std, rewards }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Run the frozen team for `episodes` episodes, sampling actions.
pub fn evaluate_team(team: &Team, env: &EnvConfig, episodes: usize, seed: u64) -> Result<Summary> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::EVAL_POLICY, 0));
    let rewards = (0..episodes)
        .map(|i| play_episode(team, env, derive_seed(seed, streams::EVAL_ENV, i as u64), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Summary::from_rewards(rewards))
}

pub fn eval_env(trained_on: &EnvConfig, mode: EvalMode) -> EnvConfig {
    match mode {
        EvalMode::Iid => trained_on.clone(),
        EvalMode::Ood => ood_variant(trained_on),
    }
}

pub fn evaluate_checkpoint(path: &Path, mode: EvalMode, episodes: usize, seed: u64) -> Result<Summary> {
    let ck = load_checkpoint(path)?;
    evaluate_team(&ck.team, &eval_env(&ck.env, mode), episodes, seed)
}

/// What one seed of an experiment produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub train_rewards: Vec<f64>,
    pub iid: Summary,
    pub ood: Summary,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    seed: u64,
    net_seed: u64,
    trainer_seed: u64,
    eval_seed: u64,
    config: &'a ExperimentConfig,
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed_{seed}"))
}

/// Train, checkpoint and evaluate one seed, writing its directory.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, run_dir: &Path) -> Result<SeedOutcome> {
    let dir = seed_dir(run_dir, seed);
    create_dir(&dir)?;
    let base = cfg.base_env();
    let net_seed = derive_seed(seed, streams::NET_INIT, 0);
    let trainer_seed = derive_seed(seed, streams::TRAINER, 0);
    let eval_seed = derive_seed(seed, streams::EVAL, 0);
    let record = RunRecord {
        seed,
        net_seed,
        trainer_seed,
        eval_seed,
        config: cfg,
    };
    let run_json = serde_json::to_string_pretty(&record).expect("run record serialises") + "\n";
    let run_path = dir.join(RUN_FILE);
    std::fs::write(&run_path, run_json).map_err(|e| Error::io(&run_path, e))?;

    let team = Team::new(
        cfg.hypothesis,
        &cfg.net,
        base.view_size(),
        base.n_agents(),
        cfg.share_parameters,
        net_seed,
    )?;
    let mut trainer = Trainer::new(team, cfg.ppo.clone(), trainer_seed)?;
    let row = |phase, episode, reward, n_ghosts| MetricsRecord {
        seed,
        hypothesis: cfg.hypothesis,
        task: cfg.task,
        phase,
        episode,
        episode_reward: reward,
        policy_loss: None,
        value_loss: None,
        entropy: None,
        contrastive_loss: None,
        n_ghosts,
    };

    let mut rows = Vec::with_capacity(cfg.episodes + 2 * cfg.eval_window);
    let mut train_rewards = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes {
        let env = cfg.train_env(episode);
        let report = trainer.train_episode(&env, derive_seed(seed, streams::TRAIN_ENV, episode as u64))?;
        if !report.reward.is_finite() {
            return Err(Error::Invariant(format!("non-finite reward in episode {episode}")));
        }
        train_rewards.push(report.reward);
        rows.push(MetricsRecord {
            policy_loss: Some(report.stats.policy_loss),
            value_loss: Some(report.stats.value_loss),
            entropy: Some(report.stats.entropy),
            contrastive_loss: report.stats.contrastive_loss,
            ..row(Phase::Train, episode, report.reward, env.n_ghosts())
        });
        if (episode + 1) % 100 == 0 {
            let recent = &train_rewards[train_rewards.len().saturating_sub(100)..];
            log::info!(
                "{} {} seed {seed}: episode {}/{}, mean reward of last {} = {:.2}",
                cfg.hypothesis,
                cfg.task,
                episode + 1,
                cfg.episodes,
                recent.len(),
                recent.iter().sum::<f64>() / recent.len() as f64
            );
        }
    }

    let test_env = cfg.test_env();
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &trainer.team, &test_env)?;
    let mut summaries = Vec::new();
    for (mode, phase) in [(EvalMode::Iid, Phase::IidTest), (EvalMode::Ood, Phase::OodTest)] {
        let env = eval_env(&test_env, mode);
        let summary = evaluate_team(&trainer.team, &env, cfg.eval_window, eval_seed)?;
        for (i, &r) in summary.rewards.iter().enumerate() {
            rows.push(row(phase, i, r, env.n_ghosts()));
        }
        summaries.push(summary);
    }
    save_metrics(&dir.join(METRICS_FILE), &rows)?;
    let ood = summaries.pop().expect("two summaries");
    let iid = summaries.pop().expect("two summaries");
    Ok(SeedOutcome {
        seed,
        dir,
        train_rewards,
        iid,
        ood,
    })
}

/// Size of the worker pool: `ASNET_THREADS` if set, else the number of CPUs.
pub fn worker_threads() -> usize {
    std::env::var("ASNET_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Run every seed of `cfg` into `run_dir`, seeds in parallel.
pub fn run_experiment(cfg: &ExperimentConfig, run_dir: &Path) -> Result<Vec<SeedOutcome>> {
    run_many(std::slice::from_ref(cfg), &[run_dir.to_path_buf()]).map(|mut v| v.remove(0))
}

/// Run several experiments, each into its own directory, with all
/// (experiment, seed) pairs sharing one bounded worker pool.
pub fn run_many(cfgs: &[ExperimentConfig], run_dirs: &[PathBuf]) -> Result<Vec<Vec<SeedOutcome>>> {
    if cfgs.len() != run_dirs.len() {
        return Err(Error::Config("one run directory per experiment is required".into()));
    }
    for (cfg, dir) in cfgs.iter().zip(run_dirs) {
        cfg.validate()?;
        create_dir(dir)?;
        let path = dir.join(EXPERIMENT_FILE);
        std::fs::write(&path, cfg.to_json()).map_err(|e| Error::io(&path, e))?;
    }
    let jobs: Vec<(usize, u64)> = cfgs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<Result<SeedOutcome>> =
        pool()?.install(|| jobs.par_iter().map(|&(i, s)| run_seed(&cfgs[i], s, &run_dirs[i])).collect());
    let mut out: Vec<Vec<SeedOutcome>> = vec![Vec::new(); cfgs.len()];
    for ((i, _), r) in jobs.into_iter().zip(results) {
        out[i].push(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
