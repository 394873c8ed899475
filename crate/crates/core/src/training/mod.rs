//! Decentralised PPO on the shared team reward.
//!
//! Rollouts are stored per agent as [`Segment`]s so updates can replay each
//! agent's recurrent forward pass in order, from the hidden state recorded
//! at the start of the segment, with the same Gumbel noise the rollout used.

mod optim;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{clip_grad_norm, Adam};

use crate::agents::{contrastive_loss, AgentNet, RecurrentState, StepOptions, Team};
use crate::autodiff::{Graph, Noise, Tensor, Var};
use crate::env::{env_reset, Action, EnvConfig, EnvState};
use crate::error::{Error, Result};
use crate::layers::patch_observation;
use crate::params::Bound;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub epochs_per_update: usize,
    /// Minimum number of transitions per minibatch; whole agent segments
    /// are grouped until this is reached.
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub contrastive_coef: f64,
    /// Steps per update; `None` means one full episode.
    pub rollout_length: Option<usize>,
    pub grad_clip_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            epochs_per_update: 4,
            minibatch_size: 64,
            learning_rate: 3e-4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            contrastive_coef: 1.0,
            rollout_length: None,
            grad_clip_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.gamma) || !unit(self.gae_lambda) {
            return Err(Error::Config("gamma and gae_lambda must lie in [0, 1]".into()));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::Config("clip_epsilon must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("learning_rate and grad_clip_norm must be positive".into()));
        }
        if self.epochs_per_update == 0 || self.minibatch_size == 0 || self.rollout_length == Some(0) {
            return Err(Error::Config("epochs, minibatch size and rollout length must be positive".into()));
        }
        Ok(())
    }
}

/// One agent's view of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Patched observation the action was chosen from.
    pub obs: Tensor,
    pub action: usize,
    pub log_prob: f64,
    /// Team reward for the step.
    pub reward: f64,
    pub value: f64,
    /// The episode reached a terminal state after this step. A step-limit
    /// cut is not terminal: its segment bootstraps from the final value.
    pub done: bool,
    pub h1: Vec<f64>,
    pub h1_pred: Option<Vec<f64>>,
    /// Gumbel noise used by the mask generator, replayed during updates.
    pub noise: Vec<f64>,
    pub mask_fallback: bool,
}

/// Consecutive transitions of one agent within one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub agent: usize,
    /// Recurrent state before the first transition.
    pub initial: RecurrentState,
    pub transitions: Vec<Transition>,
    /// Value of the state after the last transition (0 if it ended the
    /// episode).
    pub bootstrap_value: f64,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub segments: Vec<Segment>,
}

impl RolloutBuffer {
    /// Total transitions over all segments.
    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.segments.iter().flat_map(|s| &s.transitions)
    }

    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        for seg in &mut self.segments {
            let rewards: Vec<f64> = seg.transitions.iter().map(|t| t.reward).collect();
            let values: Vec<f64> = seg.transitions.iter().map(|t| t.value).collect();
            let dones: Vec<bool> = seg.transitions.iter().map(|t| t.done).collect();
            let (adv, ret) = compute_gae(&rewards, &values, &dones, seg.bootstrap_value, gamma, lambda)?;
            seg.advantages = adv;
            seg.returns = ret;
        }
        Ok(())
    }

    /// Shift and scale all advantages to zero mean and unit variance. A
    /// single transition, or a constant set, is only centred.
    pub fn normalize_advantages(&mut self) {
        let n = self.len();
        if n == 0 {
            return;
        }
        let all = || self.segments.iter().flat_map(|s| &s.advantages);
        let mean = all().sum::<f64>() / n as f64;
        let var = all().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        let scale = if n > 1 && std > 0.0 { 1.0 / std } else { 1.0 };
        for a in self.segments.iter_mut().flat_map(|s| &mut s.advantages) {
            *a = (*a - mean) * scale;
        }
    }
}

/// Generalised advantage estimation over one trajectory, with `bootstrap`
/// the value after the last step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::dim("compute_gae", &[n], &[values.len(), dones.len()]));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

fn sample_action(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn step_options<'a>(net: &AgentNet, noise: Noise<'a>) -> StepOptions<'a> {
    StepOptions {
        hard_mask: net.config.hard_mask,
        noise,
        mask_override: None,
    }
}

fn check_compatible(config: &EnvConfig, team: &Team) -> Result<()> {
    if team.n_agents() != config.n_agents() {
        return Err(Error::Config(format!(
            "team has {} agents, environment {}",
            team.n_agents(),
            config.n_agents()
        )));
    }
    if team.nets[0].view_size != config.view_size() {
        return Err(Error::Config(format!(
            "network expects a {0}x{0} view, environment gives {1}x{1}",
            team.nets[0].view_size,
            config.view_size()
        )));
    }
    Ok(())
}

/// Drives one episode, possibly across several collection calls.
#[derive(Debug, Clone)]
pub struct Runner {
    env: EnvState,
    obs: Vec<Tensor>,
    recurrent: Vec<RecurrentState>,
    done: bool,
    terminal: bool,
    pub episode_reward: f64,
    pub steps: usize,
    pub mask_fallbacks: usize,
}

impl Runner {
    pub fn new(config: &EnvConfig, team: &Team, env_seed: u64) -> Result<Self> {
        check_compatible(config, team)?;
        let (env, images) = env_reset(config, env_seed)?;
        let net = &team.nets[0];
        let obs = images
            .iter()
            .map(|im| patch_observation(im, net.config.patch_h, net.config.patch_w))
            .collect::<Result<_>>()?;
        let recurrent = (0..team.n_agents()).map(|a| team.net_for(a).initial_state()).collect();
        Ok(Runner {
            env,
            obs,
            recurrent,
            done: false,
            terminal: false,
            episode_reward: 0.0,
            steps: 0,
            mask_fallbacks: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn env(&self) -> &EnvState {
        &self.env
    }

    /// Act for up to `limit` steps (stopping at the end of the episode),
    /// sampling actions and Gumbel noise from `rng`.
    pub fn collect(&mut self, team: &Team, limit: usize, rng: &mut ChaCha8Rng) -> Result<RolloutBuffer> {
        let n = team.n_agents();
        let mut segments: Vec<Segment> = (0..n)
            .map(|a| Segment {
                agent: a,
                initial: self.recurrent[a].clone(),
                transitions: Vec::new(),
                bootstrap_value: 0.0,
                advantages: Vec::new(),
                returns: Vec::new(),
            })
            .collect();
        for _ in 0..limit {
            if self.done {
                break;
            }
            let mut g = Graph::new(rng.gen());
            let bounds: Vec<Bound> = team.nets.iter().map(|net| net.params.bind(&mut g)).collect();
            let mut actions = Vec::with_capacity(n);
            for (a, seg) in segments.iter_mut().enumerate() {
                let net = team.net_for(a);
                let o = g.constant(self.obs[a].clone());
                let state = self.recurrent[a].place(&mut g);
                let out = net.step(&mut g, &bounds[team.net_index(a)], o, state, step_options(net, Noise::Sample))?;
                let probs = g.data(out.probs);
                let action = sample_action(probs, rng);
                if out.mask_fallback {
                    self.mask_fallbacks += 1;
                    log::debug!("agent {a} step {}: action mask was all zeros, using uniform", self.steps);
                }
                seg.transitions.push(Transition {
                    obs: self.obs[a].clone(),
                    action,
                    log_prob: probs[action].ln(),
                    reward: 0.0,
                    value: g.item(out.value),
                    done: false,
                    h1: g.data(out.h1).to_vec(),
                    h1_pred: out.h1_pred.map(|v| g.data(v).to_vec()),
                    noise: out.noise,
                    mask_fallback: out.mask_fallback,
                });
                self.recurrent[a] = RecurrentState::read(&g, out.next);
                actions.push(Action::ALL[action]);
            }
            let res = self.env.step(&actions)?;
            let net = &team.nets[0];
            self.obs = res
                .observations
                .iter()
                .map(|im| patch_observation(im, net.config.patch_h, net.config.patch_w))
                .collect::<Result<_>>()?;
            for seg in &mut segments {
                let t = seg.transitions.last_mut().expect("pushed above");
                t.reward = res.reward;
                t.done = res.done && !res.truncated;
            }
            self.episode_reward += res.reward;
            self.steps += 1;
            self.done = res.done;
            self.terminal = res.done && !res.truncated;
        }
        if !self.terminal && segments.iter().any(|s| !s.is_empty()) {
            let values = self.values(team, rng)?;
            for (seg, v) in segments.iter_mut().zip(values) {
                seg.bootstrap_value = v;
            }
        }
        segments.retain(|s| !s.is_empty());
        Ok(RolloutBuffer { segments })
    }

    /// Value estimates for the current observations, leaving recurrent
    /// state untouched.
    fn values(&self, team: &Team, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let mut g = Graph::new(rng.gen());
        let bounds: Vec<Bound> = team.nets.iter().map(|net| net.params.bind(&mut g)).collect();
        (0..team.n_agents())
            .map(|a| {
                let net = team.net_for(a);
                let o = g.constant(self.obs[a].clone());
                let state = self.recurrent[a].place(&mut g);
                let out = net.step(&mut g, &bounds[team.net_index(a)], o, state, step_options(net, Noise::Sample))?;
                Ok(g.item(out.value))
            })
            .collect()
    }
}

/// Run the team for `steps` steps, starting a new episode whenever one ends.
pub fn collect_rollout(config: &EnvConfig, team: &Team, steps: usize, seed: u64) -> Result<RolloutBuffer> {
    check_compatible(config, team)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buffer = RolloutBuffer::default();
    let mut remaining = steps;
    while remaining > 0 {
        let mut runner = Runner::new(config, team, rng.gen())?;
        let part = runner.collect(team, remaining, &mut rng)?;
        remaining -= runner.steps;
        buffer.segments.extend(part.segments);
    }
    Ok(buffer)
}

/// Graph handles of the PPO objective over a set of segments.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
    pub contrastive: Option<Var>,
    /// Probability ratios, `1 × N`.
    pub ratio: Var,
    /// Per-transition clipped surrogate, `1 × N`.
    pub surrogate: Var,
    pub count: usize,
}

fn row(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::new(vec![1, n], values).expect("non-empty row")
}

/// Replay `segments` through `net` and build the clipped PPO objective plus
/// the weighted value, entropy and contrastive terms.
pub fn build_loss(g: &mut Graph, net: &AgentNet, b: &Bound, segments: &[&Segment], cfg: &PpoConfig) -> Result<LossTerms> {
    let count: usize = segments.iter().map(|s| s.len()).sum();
    if count == 0 {
        return Err(Error::Config("cannot build a loss from an empty batch".into()));
    }
    let (mut lps, mut values, mut ents, mut contr) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut old, mut adv, mut ret) = (Vec::new(), Vec::new(), Vec::new());
    for seg in segments {
        if seg.advantages.len() != seg.len() || seg.returns.len() != seg.len() {
            return Err(Error::Config("advantages have not been computed".into()));
        }
        let mut state = seg.initial.place(g);
        for (i, tr) in seg.transitions.iter().enumerate() {
            let o = g.constant(tr.obs.clone());
            let out = net.step(g, b, o, state, step_options(net, Noise::Fixed(&tr.noise)))?;
            lps.push(g.categorical_log_prob(out.probs, tr.action)?);
            values.push(out.value);
            ents.push(g.categorical_entropy(out.probs));
            if let Some(pred) = out.h1_pred {
                contr.push(contrastive_loss(g, pred, out.h1)?);
            }
            old.push(tr.log_prob);
            adv.push(seg.advantages[i]);
            ret.push(seg.returns[i]);
            state = out.next;
        }
    }
    let lp = g.concat(&lps, 1)?;
    let old = g.constant(row(old));
    let adv = g.constant(row(adv));
    let diff = g.sub(lp, old)?;
    let ratio = g.exp(diff);
    let unclipped = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
    let clipped = g.mul(clipped, adv)?;
    let surrogate = g.minimum(unclipped, clipped)?;
    let mean_surrogate = g.mean(surrogate);
    let policy = g.neg(mean_surrogate);

    let v = g.concat(&values, 1)?;
    let ret = g.constant(row(ret));
    let value = g.mse(v, ret)?;
    let ent_row = g.concat(&ents, 1)?;
    let entropy = g.mean(ent_row);

    let weighted_value = g.scale(value, cfg.value_coef);
    let weighted_entropy = g.scale(entropy, -cfg.entropy_coef);
    let mut total = g.add(policy, weighted_value)?;
    total = g.add(total, weighted_entropy)?;
    let contrastive = if contr.is_empty() {
        None
    } else {
        let c_row = g.concat(&contr, 1)?;
        let c = g.mean(c_row);
        let weighted = g.scale(c, cfg.contrastive_coef);
        total = g.add(total, weighted)?;
        Some(c)
    };
    Ok(LossTerms {
        total,
        policy,
        value,
        entropy,
        contrastive,
        ratio,
        surrogate,
        count,
    })
}

/// Loss statistics averaged over the minibatches they were computed on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Absent for architectures without a predictor.
    pub contrastive_loss: Option<f64>,
    pub total_loss: f64,
    /// Policy loss of the very first minibatch, before any parameter moved.
    pub first_policy_loss: f64,
    pub minibatches: usize,
}

#[derive(Default)]
struct StatsAcc {
    sums: [f64; 5],
    has_contrastive: bool,
    first_policy: Option<f64>,
    n: usize,
}

impl StatsAcc {
    fn add(&mut self, g: &Graph, t: &LossTerms) {
        let c = t.contrastive.map(|c| g.item(c));
        self.has_contrastive |= c.is_some();
        let vals = [g.item(t.policy), g.item(t.value), g.item(t.entropy), c.unwrap_or(0.0), g.item(t.total)];
        for (s, v) in self.sums.iter_mut().zip(vals) {
            *s += v;
        }
        self.first_policy.get_or_insert(vals[0]);
        self.n += 1;
    }

    fn finish(self) -> UpdateStats {
        let k = self.n.max(1) as f64;
        UpdateStats {
            policy_loss: self.sums[0] / k,
            value_loss: self.sums[1] / k,
            entropy: self.sums[2] / k,
            contrastive_loss: self.has_contrastive.then_some(self.sums[3] / k),
            total_loss: self.sums[4] / k,
            first_policy_loss: self.first_policy.unwrap_or(0.0),
            minibatches: self.n,
        }
    }
}

/// Segment indices owned by each network of the team.
fn segments_per_net(team: &Team, buffer: &RolloutBuffer) -> Vec<Vec<usize>> {
    let mut owned = vec![Vec::new(); team.nets.len()];
    for (i, s) in buffer.segments.iter().enumerate() {
        owned[team.net_index(s.agent)].push(i);
    }
    owned
}

/// PPO epochs over `buffer`, whose advantages must already be computed.
/// Segments are shuffled each epoch and grouped into minibatches of at
/// least `minibatch_size` transitions.
pub fn ppo_update(
    team: &mut Team,
    optimizers: &mut [Adam],
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    if buffer.is_empty() {
        return Err(Error::Config("ppo_update on an empty buffer".into()));
    }
    if optimizers.len() != team.nets.len() {
        return Err(Error::Config("one optimiser per network is required".into()));
    }
    let owned = segments_per_net(team, buffer);
    let mut acc = StatsAcc::default();
    for _ in 0..cfg.epochs_per_update {
        for (k, idx) in owned.iter().enumerate() {
            let mut order = idx.clone();
            order.shuffle(rng);
            let mut batch: Vec<&Segment> = Vec::new();
            let mut filled = 0;
            for (pos, &i) in order.iter().enumerate() {
                batch.push(&buffer.segments[i]);
                filled += buffer.segments[i].len();
                if filled < cfg.minibatch_size && pos + 1 < order.len() {
                    continue;
                }
                let net = &mut team.nets[k];
                let mut g = Graph::new(0);
                let b = net.params.bind(&mut g);
                let terms = build_loss(&mut g, net, &b, &batch, cfg)?;
                g.backward(terms.total)?;
                let mut grads = net.params.grads(&g, &b);
                clip_grad_norm(&mut grads, cfg.grad_clip_norm);
                optimizers[k].step(&mut net.params, &grads)?;
                acc.add(&g, &terms);
                batch.clear();
                filled = 0;
            }
        }
    }
    Ok(acc.finish())
}

/// Objective over the whole buffer at the current parameters, without
/// updating anything.
pub fn evaluate_losses(team: &Team, buffer: &RolloutBuffer, cfg: &PpoConfig) -> Result<UpdateStats> {
    let mut acc = StatsAcc::default();
    for (k, idx) in segments_per_net(team, buffer).iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let net = &team.nets[k];
        let mut g = Graph::new(0);
        let b = net.params.bind(&mut g);
        let batch: Vec<&Segment> = idx.iter().map(|&i| &buffer.segments[i]).collect();
        let terms = build_loss(&mut g, net, &b, &batch, cfg)?;
        acc.add(&g, &terms);
    }
    if acc.n == 0 {
        return Err(Error::Config("evaluate_losses on an empty buffer".into()));
    }
    Ok(acc.finish())
}

/// Result of one training episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReport {
    pub reward: f64,
    pub steps: usize,
    /// Mean over the updates made during the episode.
    pub stats: UpdateStats,
}

/// A team, its optimisers, and the random stream driving action sampling
/// and minibatch order.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub team: Team,
    pub optimizers: Vec<Adam>,
    pub config: PpoConfig,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(team: Team, config: PpoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let optimizers = team
            .nets
            .iter()
            .map(|n| Adam::new(&n.params, config.learning_rate))
            .collect();
        Ok(Trainer {
            team,
            optimizers,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// GAE, advantage normalisation and a PPO update on `buffer`.
    pub fn update(&mut self, buffer: &mut RolloutBuffer) -> Result<UpdateStats> {
        buffer.compute_advantages(self.config.gamma, self.config.gae_lambda)?;
        buffer.normalize_advantages();
        ppo_update(&mut self.team, &mut self.optimizers, buffer, &self.config, &mut self.rng)
    }

    /// Play one episode, updating after every `rollout_length` steps (or
    /// once at the end by default).
    pub fn train_episode(&mut self, env: &EnvConfig, env_seed: u64) -> Result<EpisodeReport> {
        let mut runner = Runner::new(env, &self.team, env_seed)?;
        let chunk = self.config.rollout_length.unwrap_or(usize::MAX);
        let mut updates = Vec::new();
        while !runner.is_done() {
            let mut buffer = runner.collect(&self.team, chunk, &mut self.rng)?;
            updates.push(self.update(&mut buffer)?);
        }
        Ok(EpisodeReport {
            reward: runner.episode_reward,
            steps: runner.steps,
            stats: mean_stats(&updates),
        })
    }
}

/// Play one episode with frozen parameters, still sampling actions.
/// Returns the episode's total team reward.
pub fn play_episode(team: &Team, env: &EnvConfig, env_seed: u64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut runner = Runner::new(env, team, env_seed)?;
    runner.collect(team, usize::MAX, rng)?;
    Ok(runner.episode_reward)
}

fn mean_stats(all: &[UpdateStats]) -> UpdateStats {
    let Some(first) = all.first() else {
        return UpdateStats::default();
    };
    let k = all.len() as f64;
    let mean = |f: fn(&UpdateStats) -> f64| all.iter().map(f).sum::<f64>() / k;
    UpdateStats {
        policy_loss: mean(|s| s.policy_loss),
        value_loss: mean(|s| s.value_loss),
        entropy: mean(|s| s.entropy),
        contrastive_loss: first
            .contrastive_loss
            .map(|_| mean(|s| s.contrastive_loss.unwrap_or(0.0))),
        total_loss: mean(|s| s.total_loss),
        first_policy_loss: first.first_policy_loss,
        minibatches: all.iter().map(|s| s.minibatches).sum(),
    }
}

#[cfg(test)]
mod tests;
