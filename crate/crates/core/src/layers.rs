//! Neural building blocks: linear/MLP heads, the GRU cell used as internal
//! control, scaled dot-product attention over observation patches, and the
//! activator/suppressor mask generator.
//!
//! Row vectors are `1 × n` matrices throughout.

use crate::autodiff::{Graph, Noise, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{Bound, Initializer, ParamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Initializer<'_>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = init.uniform(&format!("{name}.weight"), &[out_dim, in_dim], in_dim);
        let b = init.uniform(&format!("{name}.bias"), &[out_dim], in_dim);
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.w], Some(p[self.b]))
    }
}

/// Two-layer perceptron with a tanh hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(init: &mut Initializer<'_>, name: &str, in_dim: usize, width: usize, out_dim: usize) -> Self {
        Mlp {
            hidden: Linear::new(init, &format!("{name}.0"), in_dim, width),
            out: Linear::new(init, &format!("{name}.1"), width, out_dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.tanh(h);
        self.out.forward(g, p, h)
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out.out_dim
    }
}

/// Weights of one GRU cell. `*_i*` act on the input, `*_h*` on the previous
/// hidden state; `r`, `z`, `n` are the reset, update and new gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_ir: ParamId,
    pub b_ir: ParamId,
    pub w_hr: ParamId,
    pub b_hr: ParamId,
    pub w_iz: ParamId,
    pub b_iz: ParamId,
    pub w_hz: ParamId,
    pub b_hz: ParamId,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_hn: ParamId,
    pub b_hn: ParamId,
}

impl GruParams {
    pub fn new(init: &mut Initializer<'_>, name: &str, input_dim: usize, hidden_dim: usize) -> Self {
        let mut mat = |gate: &str, cols: usize| {
            init.uniform(&format!("{name}.w_{gate}"), &[hidden_dim, cols], cols)
        };
        let (w_ir, w_hr) = (mat("ir", input_dim), mat("hr", hidden_dim));
        let (w_iz, w_hz) = (mat("iz", input_dim), mat("hz", hidden_dim));
        let (w_in, w_hn) = (mat("in", input_dim), mat("hn", hidden_dim));
        let mut bias = |gate: &str, fan: usize| init.uniform(&format!("{name}.b_{gate}"), &[hidden_dim], fan);
        let (b_ir, b_hr) = (bias("ir", input_dim), bias("hr", hidden_dim));
        let (b_iz, b_hz) = (bias("iz", input_dim), bias("hz", hidden_dim));
        let (b_in, b_hn) = (bias("in", input_dim), bias("hn", hidden_dim));
        GruParams {
            input_dim,
            hidden_dim,
            w_ir,
            b_ir,
            w_hr,
            b_hr,
            w_iz,
            b_iz,
            w_hz,
            b_hz,
            w_in,
            b_in,
            w_hn,
            b_hn,
        }
    }
}

fn expect_cols(g: &Graph, v: Var, cols: usize, op: &'static str) -> Result<()> {
    let shape = g.shape(v);
    if shape.len() != 2 || shape[1] != cols {
        return Err(Error::dim(op, shape, &[shape.first().copied().unwrap_or(1), cols]));
    }
    Ok(())
}

/// One GRU step:
///
/// ```text
/// r  = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z  = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n  = tanh(W_in x + b_in + r ∘ (W_hn h + b_hn))
/// h' = (1 - z) ∘ n + z ∘ h
/// ```
pub fn gru_cell_step(g: &mut Graph, p: &GruParams, b: &Bound, x: Var, h_prev: Var) -> Result<Var> {
    expect_cols(g, x, p.input_dim, "gru_cell_step input")?;
    expect_cols(g, h_prev, p.hidden_dim, "gru_cell_step hidden")?;
    if g.shape(x)[0] != g.shape(h_prev)[0] {
        return Err(Error::dim("gru_cell_step", g.shape(x), g.shape(h_prev)));
    }
    let gate = |g: &mut Graph, wi: ParamId, bi: ParamId, wh: ParamId, bh: ParamId| -> Result<Var> {
        let xi = g.linear(x, b[wi], Some(b[bi]))?;
        let hh = g.linear(h_prev, b[wh], Some(b[bh]))?;
        let s = g.add(xi, hh)?;
        Ok(g.sigmoid(s))
    };
    let r = gate(g, p.w_ir, p.b_ir, p.w_hr, p.b_hr)?;
    let z = gate(g, p.w_iz, p.b_iz, p.w_hz, p.b_hz)?;
    let xn = g.linear(x, b[p.w_in], Some(b[p.b_in]))?;
    let hn = g.linear(h_prev, b[p.w_hn], Some(b[p.b_hn]))?;
    let gated = g.mul(r, hn)?;
    let pre = g.add(xn, gated)?;
    let n = g.tanh(pre);
    let keep = g.one_minus(z);
    let fresh = g.mul(keep, n)?;
    let carried = g.mul(z, h_prev)?;
    g.add(fresh, carried)
}

/// Split an image into non-overlapping `patch_h × patch_w` patches.
///
/// Row `i` of the result is patch `i` (patches ordered row-major over the
/// patch grid), flattened row-major with interleaved channels and scaled
/// to `[0, 1]`.
pub fn patch_observation(obs: &Image, patch_h: usize, patch_w: usize) -> Result<Tensor> {
    let (h, w) = (obs.height(), obs.width());
    if patch_h == 0 || patch_w == 0 || h % patch_h != 0 || w % patch_w != 0 {
        return Err(Error::Config(format!(
            "{patch_h}x{patch_w} patches do not tile a {h}x{w} image"
        )));
    }
    let (gh, gw) = (h / patch_h, w / patch_w);
    let patch_dim = patch_h * patch_w * 3;
    let mut data = Vec::with_capacity(gh * gw * patch_dim);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch_h {
                let row = pr * patch_h + r;
                let start = (row * w + pc * patch_w) * 3;
                data.extend(
                    obs.pixels()[start..start + patch_w * 3]
                        .iter()
                        .map(|&v| f64::from(v) / 255.0),
                );
            }
        }
    }
    Tensor::new(vec![gh * gw, patch_dim], data)
}

/// Inverse of [`patch_observation`].
pub fn unpatch_observation(patches: &Tensor, height: usize, width: usize, patch_h: usize, patch_w: usize) -> Result<Image> {
    if patch_h == 0 || patch_w == 0 || height % patch_h != 0 || width % patch_w != 0 {
        return Err(Error::Config("patch size does not tile the image".into()));
    }
    let (gh, gw) = (height / patch_h, width / patch_w);
    if patches.shape() != [gh * gw, patch_h * patch_w * 3] {
        return Err(Error::dim(
            "unpatch_observation",
            patches.shape(),
            &[gh * gw, patch_h * patch_w * 3],
        ));
    }
    let mut pixels = vec![0u8; height * width * 3];
    let mut it = patches.data().iter();
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch_h {
                let row = pr * patch_h + r;
                let start = (row * width + pc * patch_w) * 3;
                for px in &mut pixels[start..start + patch_w * 3] {
                    *px = (it.next().copied().unwrap_or(0.0) * 255.0).round() as u8;
                }
            }
        }
    }
    Ok(Image::from_pixels(height, width, pixels).expect("pixel count matches"))
}

/// Key/value/query projections. Keys and values project every patch; the
/// query projects the mean patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub patch_dim: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_q: ParamId,
}

impl AttentionParams {
    pub fn new(
        init: &mut Initializer<'_>,
        name: &str,
        patch_dim: usize,
        d_k: usize,
        d_v: usize,
        heads: usize,
    ) -> Result<Self> {
        if d_k == 0 || d_v == 0 || heads == 0 || d_k % heads != 0 || d_v % heads != 0 {
            return Err(Error::Config(format!(
                "attention dims d_k={d_k}, d_v={d_v} must be positive multiples of heads={heads}"
            )));
        }
        Ok(AttentionParams {
            patch_dim,
            d_k,
            d_v,
            heads,
            w_k: init.uniform(&format!("{name}.w_k"), &[d_k, patch_dim], patch_dim),
            w_v: init.uniform(&format!("{name}.w_v"), &[d_v, patch_dim], patch_dim),
            w_q: init.uniform(&format!("{name}.w_q"), &[d_k, patch_dim], patch_dim),
        })
    }
}

/// Returns `(q, K, V)` with `K = S·W_kᵀ`, `V = S·W_vᵀ` and
/// `q = mean_rows(S)·W_qᵀ`.
pub fn build_qkv(g: &mut Graph, p: &AttentionParams, b: &Bound, source: Var) -> Result<(Var, Var, Var)> {
    expect_cols(g, source, p.patch_dim, "build_qkv")?;
    let k = g.linear(source, b[p.w_k], None)?;
    let v = g.linear(source, b[p.w_v], None)?;
    let mean = g.mean_axis(source, 0)?;
    let q = g.linear(mean, b[p.w_q], None)?;
    Ok((q, k, v))
}

/// `softmax(q·Kᵀ/√d_k)` weights, optionally multiplied by a `{0,1}` mask
/// (no renormalisation), then the weighted sum of value rows.
///
/// With `heads > 1` the key/value columns are split evenly, each head uses
/// its own `√(d_k/heads)` scale, the same mask gates every head, and head
/// outputs are concatenated. Returns `(h1: 1×d_v, weights: heads×n)`.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    keys: Var,
    values: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(keys).to_vec(), g.shape(values).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[0] != 1 || qs[1] != ks[1] {
        return Err(Error::dim("scaled_dot_attention q/K", &qs, &ks));
    }
    if ks[0] != vs[0] {
        return Err(Error::dim("scaled_dot_attention K/V", &ks, &vs));
    }
    let n = ks[0];
    if heads == 0 || qs[1] % heads != 0 || vs[1] % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide d_k/d_v")));
    }
    let mask = match mask {
        Some(m) if g.value(m).numel() != n => {
            return Err(Error::dim("attention mask", g.shape(m), &[1, n]));
        }
        Some(m) if g.shape(m) != [1, n] => Some(g.reshape(m, &[1, n])?),
        other => other,
    };
    let (dkh, dvh) = (qs[1] / heads, vs[1] / heads);
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for head in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, keys, values)
        } else {
            (
                g.slice_cols(q, head * dkh, dkh)?,
                g.slice_cols(keys, head * dkh, dkh)?,
                g.slice_cols(values, head * dvh, dvh)?,
            )
        };
        let scores = g.linear(qh, kh, None)?;
        let scores = g.scale(scores, 1.0 / (dkh as f64).sqrt());
        let mut w = g.softmax_rows(scores)?;
        if let Some(m) = mask {
            w = g.mul(w, m)?;
        }
        outs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    if heads == 1 {
        Ok((outs[0], weights[0]))
    } else {
        Ok((g.concat(&outs, 1)?, g.concat(&weights, 0)?))
    }
}

/// Activator and suppressor networks whose paired outputs are binarised
/// with a Gumbel-softmax.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskGenParams {
    pub input_dim: usize,
    pub d_att: usize,
    pub activator: Mlp,
    pub suppressor: Mlp,
    pub temperature: f64,
}

impl MaskGenParams {
    pub fn new(
        init: &mut Initializer<'_>,
        name: &str,
        input_dim: usize,
        width: usize,
        d_att: usize,
        temperature: f64,
    ) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!("mask temperature {temperature} must be positive")));
        }
        Ok(MaskGenParams {
            input_dim,
            d_att,
            activator: Mlp::new(init, &format!("{name}.activator"), input_dim, width, d_att),
            suppressor: Mlp::new(init, &format!("{name}.suppressor"), input_dim, width, d_att),
            temperature,
        })
    }
}

/// Produce `M_att: 1 × d_att`. Position `i` is the activator channel of a
/// two-way Gumbel-softmax over `(activator_i, suppressor_i)`, so with
/// `hard` every entry is exactly 0 or 1. Returns the noise that was used.
pub fn generate_binary_mask(
    g: &mut Graph,
    p: &MaskGenParams,
    b: &Bound,
    h2: Var,
    hard: bool,
    noise: Noise<'_>,
) -> Result<(Var, Vec<f64>)> {
    if g.shape(h2) != [1, p.input_dim] {
        return Err(Error::dim("generate_binary_mask", g.shape(h2), &[1, p.input_dim]));
    }
    let act = p.activator.forward(g, b, h2)?;
    let sup = p.suppressor.forward(g, b, h2)?;
    let stacked = g.concat(&[act, sup], 0)?;
    let pairs = g.transpose(stacked)?;
    let (binary, used) = g.gumbel_softmax_binary(pairs, p.temperature, hard, noise)?;
    let on = g.slice_cols(binary, 0, 1)?;
    let mask = g.reshape(on, &[1, p.d_att])?;
    Ok((mask, used))
}
