//! Randomised finite-difference checks of every differentiable component.
//!
//! Each instance draws fresh dimensions, parameters and inputs, reduces the
//! component output to a scalar with fixed random weights, and compares the
//! tape gradient with central differences for every parameter and input.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{self, GradCheckReport, FD_TOLERANCE};
use crate::autodiff::{Graph, Noise, Tensor, Var};
use crate::error::Result;
use crate::layers::{
    build_qkv, generate_binary_mask, gru_cell_step, scaled_dot_attention, AttentionParams, GruParams, Linear,
    MaskGenParams, Mlp,
};
use crate::params::{Bound, Initializer, ParamSet};

/// Instances run by default: 13 per component.
pub const DEFAULT_INSTANCES: usize = 13 * Component::ALL.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Linear,
    Gru,
    Attention,
    MaskedAttention,
    SoftMask,
    MaskedPolicy,
    PolicyHead,
    ValueHead,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::Linear,
        Component::Gru,
        Component::Attention,
        Component::MaskedAttention,
        Component::SoftMask,
        Component::MaskedPolicy,
        Component::PolicyHead,
        Component::ValueHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Linear => "linear",
            Component::Gru => "gru",
            Component::Attention => "attention",
            Component::MaskedAttention => "masked_attention",
            Component::SoftMask => "soft_mask",
            Component::MaskedPolicy => "masked_policy",
            Component::PolicyHead => "policy_head",
            Component::ValueHead => "value_head",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseResult {
    pub component: Component,
    pub seed: u64,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.cases.iter().map(|c| c.report.checked).sum()
    }

    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.max_rel_error() < FD_TOLERANCE
    }

    /// `(component, instances, worst relative error)` per component.
    pub fn by_component(&self) -> Vec<(Component, usize, f64)> {
        Component::ALL
            .iter()
            .map(|&c| {
                let of: Vec<_> = self.cases.iter().filter(|r| r.component == c).collect();
                (c, of.len(), of.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max))
            })
            .filter(|&(_, n, _)| n > 0)
            .collect()
    }
}

/// Run `instances` random checks, cycling through the components.
pub fn run_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut cases = Vec::with_capacity(instances);
    for i in 0..instances {
        let component = Component::ALL[i % Component::ALL.len()];
        let case_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
        let report = check_component(component, case_seed)?;
        log::debug!("{component} seed {case_seed}: {report:?}");
        cases.push(CaseResult {
            component,
            seed: case_seed,
            report,
        });
    }
    Ok(SuiteReport { cases })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("non-empty shape")
}

/// Checks gradients with respect to every parameter of `params` and every
/// tensor in `inputs`. `build` returns a tensor that is reduced to a scalar
/// by a fixed random weighting.
fn run_case<F>(rng: &mut ChaCha8Rng, params: &ParamSet, inputs: Vec<Tensor>, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
{
    let n = params.len();
    let mut all: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    all.extend(inputs);
    let probe_shape = {
        let mut g = Graph::new(0);
        let vars: Vec<Var> = all.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &Bound::from_vars(vars[..n].to_vec()), &vars[n..])?;
        g.shape(out).to_vec()
    };
    let weights = random_tensor(rng, &probe_shape);
    gradcheck::check(&all, |g, vars| {
        let out = build(g, &Bound::from_vars(vars[..n].to_vec()), &vars[n..])?;
        let w = g.constant(weights.clone());
        let weighted = g.mul(out, w)?;
        Ok(g.sum(weighted))
    })
}

pub fn check_component(component: Component, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut set = ParamSet::new();
    let mut init = Initializer {
        set: &mut set,
        rng: &mut init_rng,
    };
    let dim = |rng: &mut ChaCha8Rng| rng.gen_range(2..=5usize);
    match component {
        Component::Linear => {
            let (rows, i, o) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
            let layer = Linear::new(&mut init, "linear", i, o);
            let x = random_tensor(&mut rng, &[rows, i]);
            run_case(&mut rng, &set, vec![x], |g, b, v| layer.forward(g, b, v[0]))
        }
        Component::Gru => {
            let (i, h) = (dim(&mut rng), dim(&mut rng));
            let gru = GruParams::new(&mut init, "gru", i, h);
            let x = random_tensor(&mut rng, &[1, i]);
            let h0 = random_tensor(&mut rng, &[1, h]);
            let x2 = random_tensor(&mut rng, &[1, i]);
            run_case(&mut rng, &set, vec![x, h0, x2], |g, b, v| {
                let h1 = gru_cell_step(g, &gru, b, v[0], v[1])?;
                gru_cell_step(g, &gru, b, v[2], h1)
            })
        }
        Component::Attention | Component::MaskedAttention => {
            let heads = rng.gen_range(1..=2usize);
            let (n, patch) = (dim(&mut rng), dim(&mut rng));
            let (d_k, d_v) = (heads * dim(&mut rng), heads * dim(&mut rng));
            let att = AttentionParams::new(&mut init, "attention", patch, d_k, d_v, heads)?;
            let source = random_tensor(&mut rng, &[n, patch]);
            let mask = (component == Component::MaskedAttention).then(|| {
                let bits = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.6)))).collect();
                Tensor::new(vec![1, n], bits).expect("mask shape")
            });
            run_case(&mut rng, &set, vec![source], |g, b, v| {
                let (q, k, val) = build_qkv(g, &att, b, v[0])?;
                let m = mask.clone().map(|t| g.constant(t));
                let (h1, weights) = scaled_dot_attention(g, q, k, val, heads, m)?;
                let flat = g.reshape(weights, &[1, heads * n])?;
                g.concat(&[h1, flat], 1)
            })
        }
        Component::SoftMask => {
            let (i, width, d_att) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
            let temperature = rng.gen_range(0.5..2.0);
            let gen = MaskGenParams::new(&mut init, "mask", i, width, d_att, temperature)?;
            let noise: Vec<f64> = {
                let mut g = Graph::new(rng.gen());
                g.sample_gumbel(2 * d_att)
            };
            let h2 = random_tensor(&mut rng, &[1, i]);
            run_case(&mut rng, &set, vec![h2], |g, b, v| {
                Ok(generate_binary_mask(g, &gen, b, v[0], false, Noise::Fixed(&noise))?.0)
            })
        }
        Component::MaskedPolicy => {
            let (i, width) = (dim(&mut rng), dim(&mut rng));
            let head = Mlp::new(&mut init, "policy", i, width, 4);
            let gen = MaskGenParams::new(&mut init, "mask", i, width, 4, 1.0)?;
            let noise: Vec<f64> = Graph::new(rng.gen()).sample_gumbel(8);
            let x = random_tensor(&mut rng, &[1, i]);
            run_case(&mut rng, &set, vec![x], |g, b, v| {
                let logits = head.forward(g, b, v[0])?;
                let probs = g.softmax_rows(logits)?;
                let (mask, _) = generate_binary_mask(g, &gen, b, v[0], false, Noise::Fixed(&noise))?;
                let gated = g.mul(probs, mask)?;
                let total = g.sum(gated);
                g.div_scalar(gated, total)
            })
        }
        Component::PolicyHead => {
            let (i, width) = (dim(&mut rng), dim(&mut rng));
            let head = Mlp::new(&mut init, "policy", i, width, 4);
            let x = random_tensor(&mut rng, &[1, i]);
            let action = rng.gen_range(0..4usize);
            run_case(&mut rng, &set, vec![x], |g, b, v| {
                let logits = head.forward(g, b, v[0])?;
                let probs = g.softmax_rows(logits)?;
                let lp = g.categorical_log_prob(probs, action)?;
                let ent = g.categorical_entropy(probs);
                g.concat(&[probs, lp, ent], 1)
            })
        }
        Component::ValueHead => {
            let (i, width) = (dim(&mut rng), dim(&mut rng));
            let head = Mlp::new(&mut init, "value", i, width, 1);
            let x = random_tensor(&mut rng, &[1, i]);
            let target = random_tensor(&mut rng, &[1, 1]);
            run_case(&mut rng, &set, vec![x, target], |g, b, v| {
                let value = head.forward(g, b, v[0])?;
                let err = g.mse(value, v[1])?;
                g.concat(&[value, err], 1)
            })
        }
    }
}
