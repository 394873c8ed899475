//! Dense tensors with a reverse-mode tape.
//!
//! Every operation is evaluated eagerly and appended to a [`Graph`]. The
//! append order is a topological order, so [`Graph::backward`] is a single
//! reverse sweep over the node list. Leaves created with
//! [`Graph::param`] receive gradients; everything else is scratch.

pub mod gradcheck;
mod tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Lower clamp for uniform draws feeding the Gumbel transform.
pub const GUMBEL_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where Gumbel perturbations come from.
#[derive(Debug, Clone, Copy)]
pub enum Noise<'a> {
    /// Draw fresh noise from the graph's seeded stream.
    Sample,
    /// Replay previously drawn noise (row-major, one value per logit).
    Fixed(&'a [f64]),
    /// No perturbation.
    Zero,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    MeanAxis { a: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    SoftmaxRows(Var),
    Mse(Var, Var),
    LogProb { probs: Var, action: usize },
    Entropy(Var),
    GumbelSoftmax { logits: Var, soft: Vec<f64>, temperature: f64 },
    Clamp { a: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
    DivScalar(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only tape of evaluated operations plus a seeded noise stream.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Gradient buffer for a node, zero-filled on first use.
fn slot(slot: &mut Option<Vec<f64>>, len: usize) -> &mut [f64] {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// Inner product with four independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha · x`
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    if alpha == 0.0 {
        return;
    }
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Gradient stored on a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let mut value = value;
        value.requires_grad = inputs.iter().any(|&v| self.requires(v));
        #[cfg(debug_assertions)]
        if !matches!(op, Op::Log(_)) && inputs.iter().all(|&v| self.value(v).all_finite()) {
            assert!(
                value.all_finite(),
                "non-finite output from {:?}",
                std::mem::discriminant(&op)
            );
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = true;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(Error::Shape(format!(
                "{op} expects a matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `x · wᵀ (+ b)` with `x: m×in`, `w: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.matrix_dims(x, "linear")?;
        let (n, k2) = self.matrix_dims(w, "linear")?;
        if k != k2 {
            return Err(Error::dim("linear", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.value(b).numel() != n {
                return Err(Error::dim("linear bias", self.shape(w), self.shape(b)));
            }
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let xr = &xd[i * k..(i + 1) * k];
            for j in 0..n {
                let wr = &wd[j * k..(j + 1) * k];
                out[i * n + j] = dot(xr, wr);
            }
        }
        if let Some(b) = b {
            let bd = self.data(b);
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] += bd[j];
                }
            }
        }
        let inputs: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(b).collect();
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::Linear { x, w, b },
            &inputs,
        ))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "minimum")?;
        Ok(self.zip_with(a, b, Op::Minimum(a, b), f64::min))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, 1.0)
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "add_bias")?;
        if self.value(b).numel() != n {
            return Err(Error::dim("add_bias", self.shape(a), self.shape(b)));
        }
        let bd = self.data(b).to_vec();
        let mut out = self.data(a).to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bd[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::AddBias(a, b),
            &[a, b],
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let out = transpose_raw(self.data(a), m, n);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let out = self.data(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Reshape(a), &[a]))
    }

    /// Concatenate matrices along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (m0, n0) = self.matrix_dims(first, "concat")?;
        let mut dims = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (m, n) = self.matrix_dims(v, "concat")?;
            let ok = match axis {
                0 => n == n0,
                1 => m == m0,
                _ => return Err(Error::Shape(format!("concat axis {axis} out of range"))),
            };
            if !ok {
                return Err(Error::dim("concat", self.shape(first), self.shape(v)));
            }
            dims.push((m, n));
        }
        let (shape, out) = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * n0);
            for &v in inputs {
                out.extend_from_slice(self.data(v));
            }
            (vec![rows, n0], out)
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(m0 * cols);
            for i in 0..m0 {
                for (&v, &(_, n)) in inputs.iter().zip(&dims) {
                    out.extend_from_slice(&self.data(v)[i * n..(i + 1) * n]);
                }
            }
            (vec![m0, cols], out)
        };
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", self.shape(a), &[start, len]));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols { a, start },
            &[a],
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::dim("slice_rows", self.shape(a), &[start, len]));
        }
        let out = self.data(a)[start * n..(start + len) * n].to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![len, n], out),
            Op::SliceRows { a, start },
            &[a],
        ))
    }

    /// Mean over rows (`axis = 0`, giving `1 × n`) or columns (`axis = 1`, giving `m × 1`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "mean_axis")?;
        let src = self.data(a);
        let (shape, out) = match axis {
            0 => {
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        out[j] += src[i * n + j];
                    }
                }
                out.iter_mut().for_each(|v| *v /= m as f64);
                (vec![1, n], out)
            }
            1 => {
                let out = (0..m)
                    .map(|i| src[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
                    .collect();
                (vec![m, 1], out)
            }
            _ => return Err(Error::Shape(format!("mean axis {axis} out of range"))),
        };
        Ok(self.push(Tensor::from_parts(shape, out), Op::MeanAxis { a, axis }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "softmax_rows")?;
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(&src[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::SoftmaxRows(a), &[a]))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).numel() as f64;
        let s = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), &[a, b]))
    }

    /// `ln p[action]` for a single categorical distribution.
    pub fn categorical_log_prob(&mut self, probs: Var, action: usize) -> Result<Var> {
        let t = self.value(probs);
        if action >= t.numel() {
            return Err(Error::dim("categorical_log_prob", t.shape(), &[action]));
        }
        let lp = t.data()[action].max(f64::MIN_POSITIVE).ln();
        Ok(self.push(
            Tensor::scalar(lp),
            Op::LogProb { probs, action },
            &[probs],
        ))
    }

    /// `-Σ p ln p`, with `0 ln 0 = 0`.
    pub fn categorical_entropy(&mut self, probs: Var) -> Var {
        let h = -self
            .data(probs)
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>();
        self.push(Tensor::scalar(h), Op::Entropy(probs), &[probs])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp { a, lo, hi }, |x| x.clamp(lo, hi))
    }

    /// Divides every element of `a` by the single element of `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("div_scalar", self.shape(a), self.shape(s)));
        }
        let d = self.item(s);
        let out: Vec<f64> = self.data(a).iter().map(|&x| x / d).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::DivScalar(a, s), &[a, s]))
    }

    /// Draw standard Gumbel noise `-ln(-ln u)` with `u` clamped to `(ε, 1-ε)`.
    pub fn sample_gumbel(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let u: f64 = self.rng.gen::<f64>().clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
                -(-u.ln()).ln()
            })
            .collect()
    }

    /// Gumbel-softmax over the two columns of a `d × 2` logit matrix.
    ///
    /// With `hard` the forward value is the one-hot argmax of each row (ties go
    /// to column 0) and the backward pass uses the soft Jacobian. Returns the
    /// output and the noise that was applied so it can be replayed.
    pub fn gumbel_softmax_binary(
        &mut self,
        logits: Var,
        temperature: f64,
        hard: bool,
        noise: Noise<'_>,
    ) -> Result<(Var, Vec<f64>)> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "gumbel temperature must be positive, got {temperature}"
            )));
        }
        let (d, two) = self.matrix_dims(logits, "gumbel_softmax_binary")?;
        if two != 2 {
            return Err(Error::dim("gumbel_softmax_binary", self.shape(logits), &[d, 2]));
        }
        let g = match noise {
            Noise::Sample => self.sample_gumbel(2 * d),
            Noise::Fixed(values) => {
                if values.len() != 2 * d {
                    return Err(Error::dim("gumbel noise", &[d, 2], &[values.len()]));
                }
                values.to_vec()
            }
            Noise::Zero => vec![0.0; 2 * d],
        };
        let perturbed: Vec<f64> = self
            .data(logits)
            .iter()
            .zip(&g)
            .map(|(l, n)| (l + n) / temperature)
            .collect();
        let mut soft = vec![0.0; 2 * d];
        for i in 0..d {
            softmax_row(&perturbed[2 * i..2 * i + 2], &mut soft[2 * i..2 * i + 2]);
        }
        let out = if hard {
            let mut h = vec![0.0; 2 * d];
            for i in 0..d {
                let k = if soft[2 * i] >= soft[2 * i + 1] { 0 } else { 1 };
                h[2 * i + k] = 1.0;
            }
            h
        } else {
            soft.clone()
        };
        let v = self.push(
            Tensor::from_parts(vec![d, 2], out),
            Op::GumbelSoftmax {
                logits,
                soft,
                temperature,
            },
            &[logits],
        );
        Ok((v, g))
    }

    /// Reverse sweep from a scalar `loss`. Every trainable leaf ends up with
    /// a gradient (zeros if it does not influence the loss).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gy);
                continue;
            }
            self.backprop_node(idx, &gy, &mut grads);
        }
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.grad = Some(g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let needs = |v: Var| self.nodes[v.0].value.requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    // dA[i, p] += Σ_j dY[i, j] · B[p, j]
                    let ga = slot(&mut grads[a.0], m * k);
                    for i in 0..m {
                        let gr = &gy[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] += dot(gr, &bv[p * n..(p + 1) * n]);
                        }
                    }
                }
                if needs(*b) {
                    // dB[p, :] += Σ_i A[i, p] · dY[i, :]
                    let gb = slot(&mut grads[b.0], k * n);
                    for i in 0..m {
                        let gr = &gy[i * n..(i + 1) * n];
                        for p in 0..k {
                            axpy(&mut gb[p * n..(p + 1) * n], av[i * k + p], gr);
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[0];
                let (xv, wv) = (val(*x), val(*w));
                if needs(*x) {
                    // dX[i, :] += Σ_j dY[i, j] · W[j, :]
                    let gx = slot(&mut grads[x.0], m * k);
                    for i in 0..m {
                        for j in 0..n {
                            axpy(&mut gx[i * k..(i + 1) * k], gy[i * n + j], &wv[j * k..(j + 1) * k]);
                        }
                    }
                }
                if needs(*w) {
                    // dW[j, :] += Σ_i dY[i, j] · X[i, :]
                    let gw = slot(&mut grads[w.0], n * k);
                    for i in 0..m {
                        for j in 0..n {
                            axpy(&mut gw[j * k..(j + 1) * k], gy[i * n + j], &xv[i * k..(i + 1) * k]);
                        }
                    }
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let gb = slot(&mut grads[b.0], n);
                        for i in 0..m {
                            for j in 0..n {
                                gb[j] += gy[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], gy.to_vec());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], gy.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[a.0], gy.to_vec());
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], gy.iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d = gy.iter().zip(val(*b)).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[a.0], d);
                }
                if needs(*b) {
                    let d = gy.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    let d = (0..gy.len())
                        .map(|i| if av[i] <= bv[i] { gy[i] } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], d);
                }
                if needs(*b) {
                    let d = (0..gy.len())
                        .map(|i| if av[i] <= bv[i] { 0.0 } else { gy[i] })
                        .collect();
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::Scale(a, f) => {
                accumulate(&mut grads[a.0], gy.iter().map(|g| g * f).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                accumulate(&mut grads[a.0], gy.to_vec());
            }
            Op::AddBias(a, b) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                if needs(*a) {
                    accumulate(&mut grads[a.0], gy.to_vec());
                }
                if needs(*b) {
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += gy[i * n + j];
                        }
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                accumulate(&mut grads[a.0], transpose_raw(gy, n, m));
            }
            Op::Concat { inputs, axis } => {
                let total_cols = node.value.shape()[1];
                let mut offset = 0;
                for &v in inputs {
                    let (m, n) = (self.shape(v)[0], self.shape(v)[1]);
                    let part = if *axis == 0 {
                        let p = gy[offset..offset + m * n].to_vec();
                        offset += m * n;
                        p
                    } else {
                        let mut p = Vec::with_capacity(m * n);
                        for i in 0..m {
                            let s = i * total_cols + offset;
                            p.extend_from_slice(&gy[s..s + n]);
                        }
                        offset += n;
                        p
                    };
                    if needs(v) {
                        accumulate(&mut grads[v.0], part);
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let len = node.value.shape()[1];
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + len]
                        .copy_from_slice(&gy[i * len..(i + 1) * len]);
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::SliceRows { a, start } => {
                let n = self.shape(*a)[1];
                let mut d = vec![0.0; self.value(*a).numel()];
                d[start * n..start * n + gy.len()].copy_from_slice(gy);
                accumulate(&mut grads[a.0], d);
            }
            Op::MeanAxis { a, axis } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = if *axis == 0 {
                            gy[j] / m as f64
                        } else {
                            gy[i] / n as f64
                        };
                    }
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::Sum(a) => {
                accumulate(&mut grads[a.0], vec![gy[0]; self.value(*a).numel()]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                accumulate(&mut grads[a.0], vec![gy[0] / n as f64; n]);
            }
            Op::Sigmoid(a) => {
                let d = gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                accumulate(&mut grads[a.0], d);
            }
            Op::Tanh(a) => {
                let d = gy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                accumulate(&mut grads[a.0], d);
            }
            Op::Log(a) => {
                let d = gy.iter().zip(val(*a)).map(|(g, x)| g / x).collect();
                accumulate(&mut grads[a.0], d);
            }
            Op::Exp(a) => {
                let d = gy.iter().zip(y).map(|(g, e)| g * e).collect();
                accumulate(&mut grads[a.0], d);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    softmax_backward(&y[r.clone()], &gy[r.clone()], &mut d[r], 1.0);
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).numel() as f64;
                let diff: Vec<f64> = val(*a)
                    .iter()
                    .zip(val(*b))
                    .map(|(x, t)| 2.0 * (x - t) / n * gy[0])
                    .collect();
                if needs(*b) {
                    accumulate(&mut grads[b.0], diff.iter().map(|d| -d).collect());
                }
                if needs(*a) {
                    accumulate(&mut grads[a.0], diff);
                }
            }
            Op::LogProb { probs, action } => {
                let p = val(*probs)[*action];
                let mut d = vec![0.0; val(*probs).len()];
                if p > f64::MIN_POSITIVE {
                    d[*action] = gy[0] / p;
                }
                accumulate(&mut grads[probs.0], d);
            }
            Op::Entropy(probs) => {
                let d = val(*probs)
                    .iter()
                    .map(|&p| if p > 0.0 { -gy[0] * (p.ln() + 1.0) } else { 0.0 })
                    .collect();
                accumulate(&mut grads[probs.0], d);
            }
            Op::GumbelSoftmax {
                logits,
                soft,
                temperature,
            } => {
                let rows = soft.len() / 2;
                let mut d = vec![0.0; soft.len()];
                for i in 0..rows {
                    let r = 2 * i..2 * i + 2;
                    softmax_backward(&soft[r.clone()], &gy[r.clone()], &mut d[r], 1.0 / temperature);
                }
                accumulate(&mut grads[logits.0], d);
            }
            Op::Clamp { a, lo, hi } => {
                let d = gy
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], d);
            }
            Op::DivScalar(a, s) => {
                let sv = val(*s)[0];
                if needs(*a) {
                    accumulate(&mut grads[a.0], gy.iter().map(|g| g / sv).collect());
                }
                if needs(*s) {
                    let ds = -gy
                        .iter()
                        .zip(val(*a))
                        .map(|(g, x)| g * x)
                        .sum::<f64>()
                        / (sv * sv);
                    accumulate(&mut grads[s.0], vec![ds]);
                }
            }
        }
    }
}

fn softmax_backward(y: &[f64], gy: &[f64], out: &mut [f64], factor: f64) {
    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(gy) {
        *o = factor * yi * (gi - dot);
    }
}
