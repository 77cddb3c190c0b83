//! Dense row-major f64 tensors with shape metadata.
//!
//! This is the substrate every other module builds on: elementwise ops with
//! numpy-style broadcasting, batched matmul over the last two axes, shape
//! manipulation, activations, and the two normalization kinds. Everything is
//! f64; the tolerances used by the test suite assume it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("grad_check eps {0} outside [1e-7, 1e-4]")]
    EpsOutOfRange(f64),
    #[error("grad_check: function is not deterministic ({0} != {1})")]
    NonDeterministic(f64, f64),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Dense multi-dimensional array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::Invalid {
                op: "Tensor::new",
                msg: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    // ── elementwise with broadcasting ────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip("sub", other, |a, b| a - b)
    }

    /// Hadamard product (with broadcasting).
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip("mul", other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip("div", other, |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    fn zip(&self, op: &'static str, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor { shape: self.shape.clone(), data });
        }
        let out_shape = broadcast_shape(op, &self.shape, &other.shape)?;
        let out_numel: usize = out_shape.iter().product();
        let a_idx = BroadcastIndexer::new(&self.shape, &out_shape);
        let b_idx = BroadcastIndexer::new(&other.shape, &out_shape);
        let mut data = Vec::with_capacity(out_numel);
        let mut coords = vec![0usize; out_shape.len()];
        for _ in 0..out_numel {
            data.push(f(self.data[a_idx.offset(&coords)], other.data[b_idx.offset(&coords)]));
            incr_coords(&mut coords, &out_shape);
        }
        Ok(Tensor { shape: out_shape, data })
    }

    // ── matmul ───────────────────────────────────────────────────────

    /// Matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        if self.rank() < 2 || other.rank() < 2 {
            return Err(mismatch());
        }
        let (m, ka) = (self.shape[self.rank() - 2], self.shape[self.rank() - 1]);
        let (kb, n) = (other.shape[other.rank() - 2], other.shape[other.rank() - 1]);
        if ka != kb {
            return Err(mismatch());
        }
        let a_lead = &self.shape[..self.rank() - 2];
        let b_lead = &other.shape[..other.rank() - 2];
        let lead = broadcast_shape("matmul", a_lead, b_lead)?;
        let batches: usize = lead.iter().product::<usize>().max(1);

        let a_bi = BroadcastIndexer::new(a_lead, &lead);
        let b_bi = BroadcastIndexer::new(b_lead, &lead);
        let mut out_shape = lead.clone();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![0.0; batches * m * n];
        let mut coords = vec![0usize; lead.len()];
        for batch in 0..batches {
            let a_off = a_bi.offset(&coords) * m * ka;
            let b_off = b_bi.offset(&coords) * kb * n;
            matmul2(
                &self.data[a_off..a_off + m * ka],
                &other.data[b_off..b_off + kb * n],
                m,
                ka,
                n,
                &mut out[batch * m * n..(batch + 1) * m * n],
            );
            incr_coords(&mut coords, &lead);
        }
        Ok(Tensor { shape: out_shape, data: out })
    }

    // ── shape manipulation ───────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(NumericsError::Invalid {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Reorder axes. `perm` must be a permutation of 0..rank.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        if perm.len() != self.rank() || {
            let mut seen = vec![false; self.rank()];
            perm.iter().any(|&p| p >= self.rank() || std::mem::replace(&mut seen[p], true))
        } {
            return Err(NumericsError::Invalid {
                op: "permute",
                msg: format!("{:?} is not a permutation of 0..{}", perm, self.rank()),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        let mut data = Vec::with_capacity(self.data.len());
        let mut coords = vec![0usize; out_shape.len()];
        for _ in 0..self.data.len() {
            let mut off = 0;
            for (d, &c) in coords.iter().enumerate() {
                off += c * in_strides[perm[d]];
            }
            data.push(self.data[off]);
            incr_coords(&mut coords, &out_shape);
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(NumericsError::Invalid {
                op: "transpose",
                msg: format!("needs rank >= 2, got {:?}", self.shape),
            });
        }
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(self.rank() - 2, self.rank() - 1);
        self.permute(&perm)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(NumericsError::Invalid {
                op: "narrow",
                msg: format!(
                    "slice [{start}, {}) on axis {axis} of {:?}",
                    start + len,
                    self.shape
                ),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * self.shape[axis] + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Ok(Tensor { shape: out_shape, data })
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(NumericsError::Invalid {
            op: "concat",
            msg: "no tensors given".into(),
        })?;
        for p in parts {
            if p.rank() != first.rank()
                || axis >= p.rank()
                || (0..p.rank()).any(|d| d != axis && p.shape[d] != first.shape[d])
            {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out_shape = first.shape.clone();
        out_shape[axis] = total_axis;
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Reverse order along `axis`.
    pub fn flip(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(NumericsError::Invalid {
                op: "flip",
                msg: format!("axis {axis} out of range for {:?}", self.shape),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = vec![0.0; self.data.len()];
        for o in 0..outer {
            for i in 0..n {
                let src = (o * n + i) * inner;
                let dst = (o * n + (n - 1 - i)) * inner;
                data[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
            }
        }
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    // ── reductions & softmax ─────────────────────────────────────────

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.data.len() as f64
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(NumericsError::Invalid {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for {:?}", self.shape),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = (o * n + i) * inner;
                for j in 0..inner {
                    data[o * inner + j] += self.data[src + j];
                }
            }
        }
        Ok(Tensor { shape: out_shape, data })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = self.shape.get(axis).copied().unwrap_or(0).max(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    /// Numerically stable softmax along `axis`; rows sum to 1.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(NumericsError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for {:?}", self.shape),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = vec![0.0; self.data.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let mut max = f64::NEG_INFINITY;
                for i in 0..n {
                    max = max.max(self.data[at(i)]);
                }
                let mut denom = 0.0;
                for i in 0..n {
                    let e = (self.data[at(i)] - max).exp();
                    data[at(i)] = e;
                    denom += e;
                }
                for i in 0..n {
                    data[at(i)] /= denom;
                }
            }
        }
        Ok(Tensor { shape: self.shape.clone(), data })
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(NumericsError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Maps coordinates in a broadcast output shape to flat offsets in a
/// (right-aligned, possibly smaller) input shape. Broadcast axes get stride 0.
pub struct BroadcastIndexer {
    strides: Vec<usize>,
}

impl BroadcastIndexer {
    pub fn new(in_shape: &[usize], out_shape: &[usize]) -> Self {
        let in_strides = strides(in_shape);
        let pad = out_shape.len() - in_shape.len();
        let mut st = vec![0usize; out_shape.len()];
        for d in 0..in_shape.len() {
            st[pad + d] = if in_shape[d] == 1 { 0 } else { in_strides[d] };
        }
        BroadcastIndexer { strides: st }
    }

    pub fn offset(&self, coords: &[usize]) -> usize {
        coords.iter().zip(&self.strides).map(|(c, s)| c * s).sum()
    }
}

/// Advance row-major coordinates by one position.
pub fn incr_coords(coords: &mut [usize], shape: &[usize]) {
    for d in (0..coords.len()).rev() {
        coords[d] += 1;
        if coords[d] < shape[d] {
            return;
        }
        coords[d] = 0;
    }
}

/// Accumulate a gradient of `grad_shape` back down to `target_shape` by
/// summing over broadcast axes. Inverse of broadcasting in the VJP sense.
pub fn reduce_to_shape(grad: &Tensor, target_shape: &[usize]) -> Tensor {
    if grad.shape() == target_shape {
        return grad.clone();
    }
    let out_numel: usize = target_shape.iter().product();
    let idx = BroadcastIndexer::new(target_shape, grad.shape());
    let mut out = vec![0.0; out_numel];
    let mut coords = vec![0usize; grad.rank()];
    for &g in grad.data() {
        out[idx.offset(&coords)] += g;
        incr_coords(&mut coords, grad.shape());
    }
    Tensor { shape: target_shape.to_vec(), data: out }
}

fn matmul2(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

// ── activations ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
    Softplus,
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => x.map(relu),
        Activation::Gelu => x.map(gelu),
        Activation::Tanh => x.map(f64::tanh),
        Activation::Softplus => x.map(softplus),
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh form.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// ln(1 + e^x), stable for large |x|. Strictly positive.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── normalization ────────────────────────────────────────────────────

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Layer,
    Batch,
}

/// Running statistics and mode flag for batch normalization. The channel
/// axis is the last one; statistics pool every other axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub training: bool,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            training: true,
        }
    }

    pub fn update(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Normalize over the last axis: zero mean, unit variance per row, no affine.
pub fn layer_norm(x: &Tensor, eps: f64) -> Tensor {
    let d = *x.shape().last().expect("layer_norm on rank-0 tensor");
    let rows = x.numel() / d;
    let mut data = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (o, &v) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    Tensor { shape: x.shape().to_vec(), data }
}

/// Batch normalization over all axes except the last (channel) axis, no
/// affine. Training mode uses batch statistics (biased variance) and folds
/// them into the running estimates; eval mode reads the running estimates.
/// A single-position batch in training mode is degenerate: variance is zero
/// and only the eps floor keeps the output finite.
pub fn batch_norm(x: &Tensor, state: &mut BatchNormState, eps: f64) -> Tensor {
    let c = *x.shape().last().expect("batch_norm on rank-0 tensor");
    assert_eq!(c, state.running_mean.len(), "batch_norm channel mismatch");
    let rows = x.numel() / c;
    let (mean, var) = if state.training {
        let mut mean = vec![0.0; c];
        for r in 0..rows {
            for j in 0..c {
                mean[j] += x.data()[r * c + j];
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for j in 0..c {
                let d = x.data()[r * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= rows as f64;
        }
        state.update(&mean, &var);
        (mean, var)
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };
    let mut data = vec![0.0; x.numel()];
    for r in 0..rows {
        for j in 0..c {
            data[r * c + j] = (x.data()[r * c + j] - mean[j]) / (var[j] + eps).sqrt();
        }
    }
    Tensor { shape: x.shape().to_vec(), data }
}

/// Dispatch between the two normalization kinds.
pub fn normalize(x: &Tensor, kind: NormKind, state: Option<&mut BatchNormState>) -> Tensor {
    match kind {
        NormKind::Layer => layer_norm(x, NORM_EPS),
        NormKind::Batch => {
            batch_norm(x, state.expect("batch normalization needs a state"), NORM_EPS)
        }
    }
}

// ── random init helpers ──────────────────────────────────────────────

use rand::Rng;

pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..numel).map(|_| rng.gen_range(lo..hi)).collect(),
    }
}

pub fn rand_normal(shape: &[usize], mean: f64, std: f64, rng: &mut impl Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    // Box-Muller keeps us off distribution crates' version churn.
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(mean + std * r * theta.cos());
        if data.len() < numel {
            data.push(mean + std * r * theta.sin());
        }
    }
    Tensor { shape: shape.to_vec(), data }
}
