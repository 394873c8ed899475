//! The hypothesis architectures wired from [`crate::layers`].
//!
//! Every architecture maps a patched observation to a distribution over the
//! four moves and a value estimate. Recurrent state lives outside the
//! network in [`RecurrentState`] so one parameter set can drive several
//! agents.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Noise, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{
    build_qkv, generate_binary_mask, gru_cell_step, scaled_dot_attention, AttentionParams, GruParams, Linear,
    MaskGenParams, Mlp,
};
use crate::params::{Bound, Initializer, ParamSet};

/// Number of discrete actions (up, down, left, right).
pub const N_ACTIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Architecture {
    H1,
    H2,
    H3,
    H4,
    H5_1,
    H5_2,
    H5_3,
    H5_4,
    H5_5,
}

impl Architecture {
    pub const ALL: [Architecture; 9] = [
        Architecture::H1,
        Architecture::H2,
        Architecture::H3,
        Architecture::H4,
        Architecture::H5_1,
        Architecture::H5_2,
        Architecture::H5_3,
        Architecture::H5_4,
        Architecture::H5_5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::H1 => "H1",
            Architecture::H2 => "H2",
            Architecture::H3 => "H3",
            Architecture::H4 => "H4",
            Architecture::H5_1 => "H5_1",
            Architecture::H5_2 => "H5_2",
            Architecture::H5_3 => "H5_3",
            Architecture::H5_4 => "H5_4",
            Architecture::H5_5 => "H5_5",
        }
    }

    /// The attention-schema family: recurrent predictor of attention.
    pub fn is_h5(self) -> bool {
        matches!(
            self,
            Architecture::H5_1 | Architecture::H5_2 | Architecture::H5_3 | Architecture::H5_4 | Architecture::H5_5
        )
    }

    pub fn uses_gru(self) -> bool {
        self != Architecture::H1
    }

    pub fn uses_mask(self) -> bool {
        self.is_h5() && self != Architecture::H5_1
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    /// Accepts `H5_4` or `h5.4`, in any case.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('.', "_");
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown hypothesis {s:?}")))
    }
}

impl Serialize for Architecture {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Architecture {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    /// Width of the policy and value MLPs.
    pub head_width: usize,
    /// Width of the activator and suppressor MLPs.
    pub mask_hidden: usize,
    pub mask_temperature: f64,
    pub hard_mask: bool,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            d_k: 16,
            d_v: 16,
            heads: 1,
            hidden_dim: 32,
            head_width: 64,
            mask_hidden: 32,
            mask_temperature: 1.0,
            hard_mask: true,
            patch_h: 1,
            patch_w: 7,
        }
    }
}

impl NetConfig {
    /// `(n_patches, patch_dim)` for a square RGB view of side `view`.
    pub fn patch_layout(&self, view: usize) -> Result<(usize, usize)> {
        if self.patch_h == 0 || self.patch_w == 0 || view % self.patch_h != 0 || view % self.patch_w != 0 {
            return Err(Error::Config(format!(
                "{}x{} patches do not tile a {view}x{view} view",
                self.patch_h, self.patch_w
            )));
        }
        Ok(((view / self.patch_h) * (view / self.patch_w), self.patch_h * self.patch_w * 3))
    }
}

/// Parameters and wiring of one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentNet {
    pub arch: Architecture,
    pub config: NetConfig,
    pub view_size: usize,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub params: ParamSet,
    pub attention: AttentionParams,
    pub gru: Option<GruParams>,
    pub predictor: Option<Linear>,
    pub policy: Mlp,
    pub value: Mlp,
    pub mask_gen: Option<MaskGenParams>,
}

impl AgentNet {
    /// Fresh network. Parameters are drawn in a fixed order with the mask
    /// generator last, so two H5 variants built from the same seed agree on
    /// every parameter they have in common.
    pub fn new(arch: Architecture, config: NetConfig, view_size: usize, seed: u64) -> Result<Self> {
        let (n_patches, patch_dim) = config.patch_layout(view_size)?;
        if config.hidden_dim == 0 || config.head_width == 0 || config.mask_hidden == 0 {
            return Err(Error::Config("network widths must be positive".into()));
        }
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer {
            set: &mut params,
            rng: &mut rng,
        };
        let c = &config;
        let att_source = if matches!(arch, Architecture::H2) {
            c.hidden_dim
        } else {
            patch_dim
        };
        let attention = AttentionParams::new(&mut init, "attention", att_source, c.d_k, c.d_v, c.heads)?;
        let gru_input = match arch {
            Architecture::H1 => None,
            Architecture::H2 | Architecture::H4 => Some(patch_dim),
            _ => Some(c.d_v),
        };
        let gru = gru_input.map(|i| GruParams::new(&mut init, "control", i, c.hidden_dim));
        let predictor = arch
            .is_h5()
            .then(|| Linear::new(&mut init, "predictor", c.hidden_dim, c.d_v));
        let feature = match arch {
            Architecture::H3 => c.hidden_dim,
            Architecture::H4 => c.d_v + c.hidden_dim,
            _ => c.d_v,
        };
        let policy = Mlp::new(&mut init, "policy", feature, c.head_width, N_ACTIONS);
        let value = Mlp::new(&mut init, "value", feature, c.head_width, 1);
        let d_att = match arch {
            Architecture::H5_2 => Some(N_ACTIONS),
            Architecture::H5_3 => Some(c.d_v),
            Architecture::H5_4 | Architecture::H5_5 => Some(n_patches),
            _ => None,
        };
        let mask_gen = d_att
            .map(|d| MaskGenParams::new(&mut init, "mask", c.hidden_dim, c.mask_hidden, d, c.mask_temperature))
            .transpose()?;
        Ok(AgentNet {
            arch,
            config,
            view_size,
            n_patches,
            patch_dim,
            params,
            attention,
            gru,
            predictor,
            policy,
            value,
            mask_gen,
        })
    }

    /// Width of the vector fed to the policy and value heads.
    pub fn feature_dim(&self) -> usize {
        self.policy.in_dim()
    }

    /// Width of the Gumbel noise one step consumes (zero without a mask).
    pub fn noise_len(&self) -> usize {
        self.mask_gen.as_ref().map_or(0, |m| 2 * m.d_att)
    }

    pub fn initial_state(&self) -> RecurrentState {
        RecurrentState {
            hidden: Tensor::zeros(&[1, self.config.hidden_dim]),
            prev_h1: Tensor::zeros(&[1, self.config.d_v]),
        }
    }

    /// One step on `g`, dispatching on the architecture.
    pub fn step(&self, g: &mut Graph, b: &Bound, o_pa: Var, state: GraphState, opts: StepOptions<'_>) -> Result<StepOutput> {
        if self.arch.is_h5() {
            forward_h5(g, self, b, o_pa, state, opts)
        } else {
            forward_h1_to_h4(g, self, b, o_pa, state)
        }
    }
}

/// Per-agent recurrent state carried between environment steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    /// GRU hidden state, `1 × hidden_dim`.
    pub hidden: Tensor,
    /// Attention output of the previous step, `1 × d_v` (input of the H5
    /// internal control).
    pub prev_h1: Tensor,
}

impl RecurrentState {
    pub fn place(&self, g: &mut Graph) -> GraphState {
        GraphState {
            hidden: g.constant(self.hidden.clone()),
            prev_h1: g.constant(self.prev_h1.clone()),
        }
    }

    pub fn read(g: &Graph, s: GraphState) -> Self {
        RecurrentState {
            hidden: g.value(s.hidden).clone(),
            prev_h1: g.value(s.prev_h1).clone(),
        }
    }
}

/// [`RecurrentState`] placed on a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphState {
    pub hidden: Var,
    pub prev_h1: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOptions<'a> {
    pub hard_mask: bool,
    pub noise: Noise<'a>,
    /// Replaces the generated mask (H5_2..H5_5).
    pub mask_override: Option<Var>,
}

impl Default for StepOptions<'_> {
    fn default() -> Self {
        StepOptions {
            hard_mask: true,
            noise: Noise::Sample,
            mask_override: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Action probabilities, `1 × 4`.
    pub probs: Var,
    /// `1 × 1`.
    pub value: Var,
    /// Attention output `1 × d_v` (after the mask for H5_3).
    pub h1: Var,
    /// Internal-control output, where the architecture has one.
    pub h2: Option<Var>,
    /// Predicted attention output `1 × d_v` (H5 only).
    pub h1_pred: Option<Var>,
    pub mask: Option<Var>,
    /// Gumbel noise consumed by the mask generator.
    pub noise: Vec<f64>,
    /// H5_2 only: the action mask was all zeros and the uniform
    /// distribution was used instead.
    pub mask_fallback: bool,
    pub next: GraphState,
}

fn wrong_dispatch(op: &str, arch: Architecture) -> Error {
    Error::Config(format!("{op} cannot run architecture {arch}"))
}

fn heads(g: &mut Graph, net: &AgentNet, b: &Bound, feature: Var) -> Result<(Var, Var)> {
    let logits = net.policy.forward(g, b, feature)?;
    let probs = g.softmax_rows(logits)?;
    let value = net.value.forward(g, b, feature)?;
    Ok((probs, value))
}

/// Feed the rows of `o_pa` through the GRU in order. Returns the stacked
/// per-row outputs and the final hidden state.
fn scan_rows(g: &mut Graph, gru: &GruParams, b: &Bound, o_pa: Var, hidden: Var) -> Result<(Var, Var)> {
    let n = g.shape(o_pa)[0];
    let mut h = hidden;
    let mut outs = Vec::with_capacity(n);
    for i in 0..n {
        let x = g.slice_rows(o_pa, i, 1)?;
        h = gru_cell_step(g, gru, b, x, h)?;
        outs.push(h);
    }
    Ok((g.concat(&outs, 0)?, h))
}

fn check_obs(g: &Graph, net: &AgentNet, o_pa: Var) -> Result<()> {
    if g.shape(o_pa) != [net.n_patches, net.patch_dim] {
        return Err(Error::dim("agent observation", g.shape(o_pa), &[net.n_patches, net.patch_dim]));
    }
    Ok(())
}

/// H1–H4 forward pass.
pub fn forward_h1_to_h4(g: &mut Graph, net: &AgentNet, b: &Bound, o_pa: Var, state: GraphState) -> Result<StepOutput> {
    check_obs(g, net, o_pa)?;
    let att = &net.attention;
    let gru = || net.gru.as_ref().ok_or_else(|| Error::Invariant("missing GRU".into()));
    let (h1, h2, feature, hidden) = match net.arch {
        Architecture::H1 => {
            let (q, k, v) = build_qkv(g, att, b, o_pa)?;
            let (h1, _) = scaled_dot_attention(g, q, k, v, att.heads, None)?;
            (h1, None, h1, state.hidden)
        }
        Architecture::H2 => {
            let (stacked, h) = scan_rows(g, gru()?, b, o_pa, state.hidden)?;
            let (q, k, v) = build_qkv(g, att, b, stacked)?;
            let (h1, _) = scaled_dot_attention(g, q, k, v, att.heads, None)?;
            (h1, Some(h), h1, h)
        }
        Architecture::H3 => {
            let (q, k, v) = build_qkv(g, att, b, o_pa)?;
            let (h1, _) = scaled_dot_attention(g, q, k, v, att.heads, None)?;
            let h2 = gru_cell_step(g, gru()?, b, h1, state.hidden)?;
            (h1, Some(h2), h2, h2)
        }
        Architecture::H4 => {
            let (q, k, v) = build_qkv(g, att, b, o_pa)?;
            let (h1, _) = scaled_dot_attention(g, q, k, v, att.heads, None)?;
            let (_, h2) = scan_rows(g, gru()?, b, o_pa, state.hidden)?;
            let feature = g.concat(&[h1, h2], 1)?;
            (h1, Some(h2), feature, h2)
        }
        other => return Err(wrong_dispatch("forward_h1_to_h4", other)),
    };
    let (probs, value) = heads(g, net, b, feature)?;
    Ok(StepOutput {
        probs,
        value,
        h1,
        h2,
        h1_pred: None,
        mask: None,
        noise: Vec::new(),
        mask_fallback: false,
        next: GraphState {
            hidden,
            prev_h1: state.prev_h1,
        },
    })
}

/// H5 forward pass: the internal control consumes the previous attention
/// output (cut from the tape), predicts the current one, and, except for
/// H5_1, emits a binary mask gating the policy path.
pub fn forward_h5(
    g: &mut Graph,
    net: &AgentNet,
    b: &Bound,
    o_pa: Var,
    state: GraphState,
    opts: StepOptions<'_>,
) -> Result<StepOutput> {
    if !net.arch.is_h5() {
        return Err(wrong_dispatch("forward_h5", net.arch));
    }
    check_obs(g, net, o_pa)?;
    let att = &net.attention;
    let gru = net.gru.as_ref().ok_or_else(|| Error::Invariant("missing GRU".into()))?;
    let predictor = net
        .predictor
        .as_ref()
        .ok_or_else(|| Error::Invariant("missing predictor".into()))?;

    let (q, k, v) = build_qkv(g, att, b, o_pa)?;
    let control_in = g.detach(state.prev_h1);
    let h2 = gru_cell_step(g, gru, b, control_in, state.hidden)?;
    let h1_pred = predictor.forward(g, b, h2)?;

    let (mask, noise) = match (&net.mask_gen, opts.mask_override) {
        (None, _) => (None, Vec::new()),
        (Some(mg), Some(m)) => {
            if g.value(m).numel() != mg.d_att {
                return Err(Error::dim("mask override", g.shape(m), &[1, mg.d_att]));
            }
            let m = g.reshape(m, &[1, mg.d_att])?;
            (Some(m), Vec::new())
        }
        (Some(mg), None) => {
            let (m, used) = generate_binary_mask(g, mg, b, h2, opts.hard_mask, opts.noise)?;
            (Some(m), used)
        }
    };

    let mut mask_fallback = false;
    let (h1, probs, value) = match net.arch {
        Architecture::H5_1 => {
            let (h1, _) = scaled_dot_attention(g, q, k, v, att.heads, None)?;
            let (probs, value) = heads(g, net, b, h1)?;
            (h1, probs, value)
        }
        Architecture::H5_2 => {
            let m = mask.expect("H5_2 has a mask");
            let (h1, _) = scaled_dot_attention(g, q, k, v, att.heads, None)?;
            let (probs, value) = heads(g, net, b, h1)?;
            let gated = g.mul(probs, m)?;
            let total = g.sum(gated);
            let probs = if g.item(total) > 0.0 {
                g.div_scalar(gated, total)?
            } else {
                mask_fallback = true;
                g.constant(Tensor::filled(&[1, N_ACTIONS], 1.0 / N_ACTIONS as f64))
            };
            (h1, probs, value)
        }
        Architecture::H5_3 => {
            let m = mask.expect("H5_3 has a mask");
            let (raw, _) = scaled_dot_attention(g, q, k, v, att.heads, None)?;
            let h1 = g.mul(raw, m)?;
            let (probs, value) = heads(g, net, b, h1)?;
            (h1, probs, value)
        }
        Architecture::H5_4 | Architecture::H5_5 => {
            let (h1, _) = scaled_dot_attention(g, q, k, v, att.heads, mask)?;
            let feature = if net.arch == Architecture::H5_5 { h1_pred } else { h1 };
            let (probs, value) = heads(g, net, b, feature)?;
            (h1, probs, value)
        }
        _ => unreachable!("checked above"),
    };
    Ok(StepOutput {
        probs,
        value,
        h1,
        h2: Some(h2),
        h1_pred: Some(h1_pred),
        mask,
        noise,
        mask_fallback,
        next: GraphState { hidden: h2, prev_h1: h1 },
    })
}

/// Mean squared difference between a prediction and a target that is
/// treated as a constant.
pub fn contrastive_loss(g: &mut Graph, h1_pred: Var, h1_target: Var) -> Result<Var> {
    if g.value(h1_pred).numel() != g.value(h1_target).numel() {
        return Err(Error::dim("contrastive_loss", g.shape(h1_pred), g.shape(h1_target)));
    }
    let target = g.detach(h1_target);
    let target = if g.shape(target) == g.shape(h1_pred) {
        target
    } else {
        let shape = g.shape(h1_pred).to_vec();
        g.reshape(target, &shape)?
    };
    g.mse(h1_pred, target)
}

/// One network per agent, or a single network shared by all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Team {
    pub nets: Vec<AgentNet>,
    pub shared: bool,
    n_agents: usize,
}

impl Team {
    /// With `shared = false` each agent gets its own independently
    /// initialised copy.
    pub fn new(arch: Architecture, config: &NetConfig, view_size: usize, n_agents: usize, shared: bool, seed: u64) -> Result<Self> {
        let count = if shared { 1 } else { n_agents };
        let nets = (0..count)
            .map(|i| AgentNet::new(arch, config.clone(), view_size, seed.wrapping_add(i as u64)))
            .collect::<Result<_>>()?;
        Ok(Team { nets, shared, n_agents })
    }

    pub fn from_nets(nets: Vec<AgentNet>, n_agents: usize) -> Result<Self> {
        let shared = nets.len() == 1;
        if nets.is_empty() || (!shared && nets.len() != n_agents) {
            return Err(Error::Config(format!("{} networks for {n_agents} agents", nets.len())));
        }
        Ok(Team { nets, shared, n_agents })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn arch(&self) -> Architecture {
        self.nets[0].arch
    }

    /// Index into `nets` used by `agent`.
    pub fn net_index(&self, agent: usize) -> usize {
        if self.shared {
            0
        } else {
            agent
        }
    }

    pub fn net_for(&self, agent: usize) -> &AgentNet {
        &self.nets[self.net_index(agent)]
    }
}
