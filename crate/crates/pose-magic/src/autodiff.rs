//! Reverse-mode automatic differentiation on a per-forward-pass tape.
//!
//! A `Graph` is an arena of nodes; building an op records its value, its
//! parents, and a closure computing vector-Jacobian products. The tape is
//! rebuilt on every forward pass, so control flow in model code needs no
//! special handling. Single-threaded by design: data parallelism happens one
//! graph per sequence, never inside a graph.

use crate::tensor::{
    self, gelu, gelu_grad, reduce_to_shape, relu, sigmoid, softplus, NumericsError, Result, Tensor,
};

/// Handle to a node in a `Graph`. Only valid for the graph that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type Vjp = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    vjp: Option<Vjp>,
    param: Option<ParamId>,
}

/// Handle to a parameter in a `ParamStore`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Owns all trainable tensors. Insertion order is the canonical parameter
/// order everywhere (optimizer state, checkpoints, gradient reports).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Per-parameter gradients produced by `Graph::backward`. Parameters that
/// did not influence the loss read back as zeros.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(store.value(id).shape()),
        }
    }

    pub fn get_ref(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Elementwise sum, for accumulating shards of a batch.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.grads.len() < other.grads.len() {
            self.grads.resize_with(other.grads.len(), || None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                *mine = Some(match mine.take() {
                    Some(m) => m.add(t)?,
                    None => t.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn zeros(n_params: usize) -> Self {
        Gradients { grads: (0..n_params).map(|_| None).collect() }
    }

    /// Scale every gradient in place, for averaging accumulated shards.
    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g = g.scale(c);
        }
    }
}

/// Computation tape. Nodes are appended in evaluation order, so index order
/// is already a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, vjp: Option<Vjp>) -> Var {
        self.nodes.push(Node { value, parents, vjp, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not require gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    /// Leaf bound to a stored parameter; gradients flow into `Gradients`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            parents: vec![],
            vjp: None,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Escape hatch for fused ops with hand-written adjoints.
    pub fn custom(&mut self, value: Tensor, parents: Vec<Var>, vjp: Vjp) -> Var {
        self.push(value, parents, Some(vjp))
    }

    // ── arithmetic ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let out = va.add(&vb)?;
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![reduce_to_shape(g, &sa), reduce_to_shape(g, &sb)]
            })),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let out = va.sub(&vb)?;
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![reduce_to_shape(g, &sa), reduce_to_shape(&g.scale(-1.0), &sb)]
            })),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let out = va.mul(&vb)?;
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![
                    reduce_to_shape(&g.mul(&vb).expect("mul vjp"), va.shape()),
                    reduce_to_shape(&g.mul(&va).expect("mul vjp"), vb.shape()),
                ]
            })),
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let out = va.div(&vb)?;
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let da = g.div(&vb).expect("div vjp");
                let db = g
                    .mul(&va)
                    .and_then(|t| t.div(&vb))
                    .and_then(|t| t.div(&vb))
                    .expect("div vjp")
                    .scale(-1.0);
                vec![reduce_to_shape(&da, va.shape()), reduce_to_shape(&db, vb.shape())]
            })),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, vec![a], Some(Box::new(move |g| vec![g.scale(c)])))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        let out = va.matmul(&vb)?;
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let bt = vb.transpose().expect("matmul vjp");
                let at = va.transpose().expect("matmul vjp");
                let da = g.matmul(&bt).expect("matmul vjp");
                let db = at.matmul(g).expect("matmul vjp");
                vec![reduce_to_shape(&da, va.shape()), reduce_to_shape(&db, vb.shape())]
            })),
        ))
    }

    // ── elementwise nonlinearities ──────────────────────────────────

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let out = va.map(relu);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect(),
                )
                .expect("relu vjp")]
            })),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let out = va.map(gelu);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gv, &xv)| gv * gelu_grad(xv))
                        .collect(),
                )
                .expect("gelu vjp")]
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let y = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                        .collect(),
                )
                .expect("tanh vjp")]
            })),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let out = va.map(softplus);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gv, &xv)| gv * sigmoid(xv))
                        .collect(),
                )
                .expect("softplus vjp")]
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let y = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g.mul(&y).expect("exp vjp")]
            })),
        )
    }

    /// exp(x) - 1 without cancellation near zero. d/dx = exp(x) = y + 1.
    pub fn expm1(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp_m1);
        let y = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let scale = y.map(|v| v + 1.0);
                vec![g.mul(&scale).expect("expm1 vjp")]
            })),
        )
    }

    // ── shape ops ───────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let orig = self.value(a).shape().to_vec();
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g.reshape(&orig).expect("reshape vjp")])),
        ))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        let mut inverse = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g.permute(&inverse).expect("permute vjp")])),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(NumericsError::Invalid {
                op: "transpose",
                msg: format!("needs rank >= 2, got rank {rank}"),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn flip(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).flip(axis)?;
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g.flip(axis).expect("flip vjp")])),
        ))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let parent_shape = self.value(a).shape().to_vec();
        let out = self.value(a).narrow(axis, start, len)?;
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                // scatter the slice gradient back into a zero tensor
                let outer: usize = parent_shape[..axis].iter().product();
                let n = parent_shape[axis];
                let inner: usize = parent_shape[axis + 1..].iter().product();
                let mut full = Tensor::zeros(&parent_shape);
                for o in 0..outer {
                    for i in 0..len {
                        let dst = (o * n + start + i) * inner;
                        let src = (o * len + i) * inner;
                        full.data_mut()[dst..dst + inner]
                            .copy_from_slice(&g.data()[src..src + inner]);
                    }
                }
                vec![full]
            })),
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&v| self.value(v).clone()).collect();
        let refs: Vec<&Tensor> = values.iter().collect();
        let out = Tensor::concat(&refs, axis)?;
        let sizes: Vec<usize> = values.iter().map(|t| t.shape()[axis]).collect();
        Ok(self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for &len in &sizes {
                    grads.push(g.narrow(axis, start, len).expect("concat vjp"));
                    start += len;
                }
                grads
            })),
        ))
    }

    // ── reductions, softmax, norms ──────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let out = Tensor::scalar(self.value(a).sum_all());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![Tensor::full(&shape, g.item())])),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let n = self.value(a).numel() as f64;
        let out = Tensor::scalar(self.value(a).mean_all());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![Tensor::full(&shape, g.item() / n)])),
        )
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).softmax(axis)?;
        let y = out.clone();
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                // dx = y * (g - sum_axis(g * y)) with the sum broadcast back
                let shape = y.shape();
                let outer: usize = shape[..axis].iter().product();
                let n = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut dx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let mut dot = 0.0;
                        for i in 0..n {
                            dot += g.data()[at(i)] * y.data()[at(i)];
                        }
                        for i in 0..n {
                            dx[at(i)] = y.data()[at(i)] * (g.data()[at(i)] - dot);
                        }
                    }
                }
                vec![Tensor::new(shape.to_vec(), dx).expect("softmax vjp")]
            })),
        ))
    }

    /// Euclidean norm over the last axis: (..., c) -> (...). The gradient at
    /// an exactly zero vector is defined as zero.
    pub fn l2_norm_last(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let c = *va.shape().last().expect("l2_norm_last on rank-0 tensor");
        let rows = va.numel() / c;
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &va.data()[r * c..(r + 1) * c];
            norms.push(row.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        let out_shape = va.shape()[..va.rank() - 1].to_vec();
        let out = Tensor::new(out_shape, norms.clone()).expect("l2_norm_last");
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = vec![0.0; va.numel()];
                for r in 0..rows {
                    let norm = norms[r];
                    if norm == 0.0 {
                        continue;
                    }
                    let gv = g.data()[r];
                    for j in 0..c {
                        dx[r * c + j] = gv * va.data()[r * c + j] / norm;
                    }
                }
                vec![Tensor::new(va.shape().to_vec(), dx).expect("l2_norm_last vjp")]
            })),
        )
    }

    /// Layer normalization over the last axis (no affine part; compose with
    /// mul/add for gain and bias).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let eps = tensor::NORM_EPS;
        let d = *va.shape().last().expect("layer_norm on rank-0 tensor");
        let rows = va.numel() / d;
        let mut y = vec![0.0; va.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &va.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for (o, &v) in y[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), y.clone()).expect("layer_norm");
        let shape = va.shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                // dx = inv_std * (g - mean(g) - y * mean(g .* y)) per row
                let mut dx = vec![0.0; g.numel()];
                for r in 0..rows {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let g_mean = gr.iter().sum::<f64>() / d as f64;
                    let gy_mean =
                        gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = inv_std[r] * (gr[j] - g_mean - yr[j] * gy_mean);
                    }
                }
                vec![Tensor::new(shape.clone(), dx).expect("layer_norm vjp")]
            })),
        )
    }

    /// Batch normalization in training mode: statistics over every axis but
    /// the last, biased variance, gradients flow through the statistics.
    /// Returns the node plus the batch mean/var so the caller can fold them
    /// into running estimates.
    pub fn batch_norm_train(&mut self, a: Var) -> (Var, Vec<f64>, Vec<f64>) {
        let va = self.value(a).clone();
        let eps = tensor::NORM_EPS;
        let c = *va.shape().last().expect("batch_norm on rank-0 tensor");
        let rows = va.numel() / c;
        let mut mean = vec![0.0; c];
        for r in 0..rows {
            for j in 0..c {
                mean[j] += va.data()[r * c + j];
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for j in 0..c {
                let d = va.data()[r * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= rows as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut y = vec![0.0; va.numel()];
        for r in 0..rows {
            for j in 0..c {
                y[r * c + j] = (va.data()[r * c + j] - mean[j]) * inv_std[j];
            }
        }
        let out = Tensor::new(va.shape().to_vec(), y.clone()).expect("batch_norm");
        let shape = va.shape().to_vec();
        let inv = inv_std.clone();
        let node = self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                // dx = inv_std * (g - mean_rows(g) - y * mean_rows(g .* y)) per channel
                let mut g_mean = vec![0.0; c];
                let mut gy_mean = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        g_mean[j] += g.data()[r * c + j];
                        gy_mean[j] += g.data()[r * c + j] * y[r * c + j];
                    }
                }
                for j in 0..c {
                    g_mean[j] /= rows as f64;
                    gy_mean[j] /= rows as f64;
                }
                let mut dx = vec![0.0; g.numel()];
                for r in 0..rows {
                    for j in 0..c {
                        dx[r * c + j] = inv[j]
                            * (g.data()[r * c + j] - g_mean[j] - y[r * c + j] * gy_mean[j]);
                    }
                }
                vec![Tensor::new(shape.clone(), dx).expect("batch_norm vjp")]
            })),
        );
        (node, mean, var)
    }

    /// Batch normalization in eval mode: fixed running statistics, so the
    /// op is a per-channel affine map and frames stay independent.
    pub fn batch_norm_eval(&mut self, a: Var, running_mean: &[f64], running_var: &[f64]) -> Var {
        let va = self.value(a).clone();
        let eps = tensor::NORM_EPS;
        let c = *va.shape().last().expect("batch_norm on rank-0 tensor");
        assert_eq!(c, running_mean.len(), "batch_norm channel mismatch");
        let rows = va.numel() / c;
        let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut y = vec![0.0; va.numel()];
        for r in 0..rows {
            for j in 0..c {
                y[r * c + j] = (va.data()[r * c + j] - running_mean[j]) * inv_std[j];
            }
        }
        let out = Tensor::new(va.shape().to_vec(), y).expect("batch_norm");
        let shape = va.shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = vec![0.0; g.numel()];
                for r in 0..rows {
                    for j in 0..c {
                        dx[r * c + j] = g.data()[r * c + j] * inv_std[j];
                    }
                }
                vec![Tensor::new(shape.clone(), dx).expect("batch_norm vjp")]
            })),
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// parameter that was bound into this graph via `param`.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let loss_val = self.value(loss);
        if loss_val.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(Tensor::full(loss_val.shape(), 1.0));

        let mut grads = Gradients::zeros(store.len());
        for idx in (0..=loss.0).rev() {
            let Some(adj) = adjoints[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(id) = node.param {
                let slot = &mut grads.grads[id.0];
                *slot = Some(match slot.take() {
                    Some(g) => g.add(&adj)?,
                    None => adj.clone(),
                });
            }
            if let Some(vjp) = &node.vjp {
                let parent_grads = vjp(&adj);
                assert_eq!(
                    parent_grads.len(),
                    node.parents.len(),
                    "vjp arity mismatch at node {idx}"
                );
                for (parent, grad) in node.parents.iter().zip(parent_grads) {
                    let slot = &mut adjoints[parent.0];
                    *slot = Some(match slot.take() {
                        Some(acc) => acc.add(&grad)?,
                        None => grad,
                    });
                }
            }
        }
        Ok(grads)
    }
}

// ── gradient checking ────────────────────────────────────────────────

/// Worst-case relative error between analytic and central-difference
/// gradients, with the offending coordinate for diagnostics.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compare analytic gradients against central differences for every scalar
/// in the store. `f` must rebuild the loss from scratch on each call and be
/// deterministic; this is verified by evaluating it twice before anything
/// else. Relative error uses max(|analytic|, |numeric|, 1e-8) as the scale.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Var,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(NumericsError::EpsOutOfRange(eps));
    }

    let eval = |f: &mut F, store: &ParamStore| -> Result<f64> {
        let mut graph = Graph::new();
        let loss = f(&mut graph, store);
        let v = graph.value(loss);
        if v.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let v1 = eval(&mut f, store)?;
    let v2 = eval(&mut f, store)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(NumericsError::NonDeterministic(v1, v2));
    }

    let mut graph = Graph::new();
    let loss = f(&mut graph, store);
    let grads = graph.backward(loss, store)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };

    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let analytic = grads.get(store, id);
        let n = store.value(id).numel();
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&mut f, store)?;
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&mut f, store)?;
            store.value_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let scale = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / scale;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(name: &str, shape: &[usize], data: &[f64]) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, Tensor::new(shape.to_vec(), data.to_vec()).unwrap());
        (s, id)
    }

    #[test]
    fn sum_of_squares_gradient() {
        let (store, id) = store_with("x", &[2], &[1.0, 2.0]);
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss, &store).unwrap();
        assert_eq!(grads.get(&store, id).data(), &[2.0, 4.0]);
    }

    #[test]
    fn off_path_param_gets_zero_grad() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::from_vec(vec![3.0]));
        let unused = store.add("unused", Tensor::from_vec(vec![5.0, 7.0]));
        let mut g = Graph::new();
        let x = g.param(&store, used);
        let loss = g.sum_all(x);
        let grads = g.backward(loss, &store).unwrap();
        assert_eq!(grads.get(&store, unused).data(), &[0.0, 0.0]);
        assert_eq!(grads.get(&store, used).data(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let (store, id) = store_with("x", &[3], &[1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let err = g.backward(x, &store).unwrap_err();
        assert!(matches!(err, NumericsError::NonScalarLoss(_)));
    }

    #[test]
    fn shared_param_accumulates() {
        // loss = sum(x) + sum(x*x); d/dx = 1 + 2x
        let (store, id) = store_with("x", &[2], &[1.0, -2.0]);
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let s1 = g.sum_all(x);
        let sq = g.mul(x, x).unwrap();
        let s2 = g.sum_all(sq);
        let loss = g.add(s1, s2).unwrap();
        let grads = g.backward(loss, &store).unwrap();
        assert_eq!(grads.get(&store, id).data(), &[3.0, -3.0]);
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let (mut store, id) = store_with("x", &[1], &[1.0]);
        let err = grad_check(&mut store, 1e-2, |g, s| {
            let x = g.param(s, id);
            g.sum_all(x)
        })
        .unwrap_err();
        assert!(matches!(err, NumericsError::EpsOutOfRange(_)));
    }

    #[test]
    fn grad_check_detects_nondeterminism() {
        let (mut store, id) = store_with("x", &[1], &[1.0]);
        let mut call = 0u64;
        let err = grad_check(&mut store, 1e-5, |g, s| {
            call += 1;
            let x = g.param(s, id);
            let jitter = g.constant(Tensor::scalar(call as f64));
            let y = g.mul(x, jitter).unwrap();
            g.sum_all(y)
        })
        .unwrap_err();
        assert!(matches!(err, NumericsError::NonDeterministic(_, _)));
    }

    #[test]
    fn three_layer_network_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", tensor::rand_uniform(&[4, 8], -0.5, 0.5, &mut rng));
        let b1 = store.add("b1", tensor::rand_uniform(&[8], -0.1, 0.1, &mut rng));
        let w2 = store.add("w2", tensor::rand_uniform(&[8, 8], -0.5, 0.5, &mut rng));
        let b2 = store.add("b2", tensor::rand_uniform(&[8], -0.1, 0.1, &mut rng));
        let w3 = store.add("w3", tensor::rand_uniform(&[8, 2], -0.5, 0.5, &mut rng));
        let x = tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let target = tensor::rand_uniform(&[3, 2], -1.0, 1.0, &mut rng);

        let report = grad_check(&mut store, 1e-5, |g, s| {
            let xin = g.constant(x.clone());
            let t = g.constant(target.clone());
            let (w1v, b1v) = (g.param(s, w1), g.param(s, b1));
            let (w2v, b2v) = (g.param(s, w2), g.param(s, b2));
            let w3v = g.param(s, w3);
            let h1 = g.matmul(xin, w1v).unwrap();
            let h1 = g.add(h1, b1v).unwrap();
            let h1 = g.gelu(h1);
            let h2 = g.matmul(h1, w2v).unwrap();
            let h2 = g.add(h2, b2v).unwrap();
            let h2 = g.tanh(h2);
            let out = g.matmul(h2, w3v).unwrap();
            let diff = g.sub(out, t).unwrap();
            let sq = g.mul(diff, diff).unwrap();
            g.mean_all(sq)
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "three-layer gradcheck failed: {report:?}"
        );
    }

    // Per-op finite difference sweeps. Inputs are kept away from the
    // nondifferentiable points of relu and div.
    #[test]
    fn per_op_gradients_match_central_difference() {
        type OpBuilder = fn(&mut Graph, Var) -> Var;
        let ops: Vec<(&str, OpBuilder)> = vec![
            ("gelu", |g, x| g.gelu(x)),
            ("tanh", |g, x| g.tanh(x)),
            ("softplus", |g, x| g.softplus(x)),
            ("exp", |g, x| g.exp(x)),
            ("expm1", |g, x| g.expm1(x)),
            ("scale", |g, x| g.scale(x, -1.7)),
            ("flip", |g, x| g.flip(x, 0).unwrap()),
            ("layer_norm", |g, x| g.layer_norm(x)),
            ("softmax", |g, x| g.softmax(x, 1).unwrap()),
            ("bn_train", |g, x| g.batch_norm_train(x).0),
            ("l2_norm", |g, x| g.l2_norm_last(x)),
            ("reshape", |g, x| g.reshape(x, &[2, 2, 6]).unwrap()),
            ("permute", |g, x| g.permute(x, &[1, 0]).unwrap()),
            ("narrow", |g, x| g.narrow(x, 1, 1, 3).unwrap()),
        ];
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (name, build) in &ops {
                let mut store = ParamStore::new();
                let id = store.add("x", tensor::rand_uniform(&[4, 6], -2.0, 2.0, &mut rng));
                // weight the output so the grad is not uniform
                let w = tensor::rand_uniform(&[24], -1.0, 1.0, &mut rng);
                let report = grad_check(&mut store, 1e-5, |g, s| {
                    let x = g.param(s, id);
                    let y = build(g, x);
                    let n = g.value(y).numel();
                    let wv = g.constant(
                        Tensor::new(g.value(y).shape().to_vec(), w.data()[..n].to_vec()).unwrap(),
                    );
                    let weighted = g.mul(y, wv).unwrap();
                    g.sum_all(weighted)
                })
                .unwrap();
                assert!(
                    report.max_rel_err < 1e-5,
                    "op {name} seed {seed}: {report:?}"
                );
            }
        }
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut store = ParamStore::new();
            // keep |x| > 0.1 so the central difference never straddles zero
            let raw = tensor::rand_uniform(&[12], 0.1, 2.0, &mut rng);
            let signs = tensor::rand_uniform(&[12], -1.0, 1.0, &mut rng);
            let data: Vec<f64> = raw
                .data()
                .iter()
                .zip(signs.data())
                .map(|(&m, &s)| if s > 0.0 { m } else { -m })
                .collect();
            let id = store.add("x", Tensor::from_vec(data));
            let report = grad_check(&mut store, 1e-5, |g, s| {
                let x = g.param(s, id);
                let y = g.relu(x);
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "relu seed {seed}: {report:?}");
        }
    }

    #[test]
    fn binary_op_gradients_match_central_difference() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let mut store = ParamStore::new();
            let a = store.add("a", tensor::rand_uniform(&[3, 4], -2.0, 2.0, &mut rng));
            // denominators in [0.5, 2.5] keep div well conditioned
            let b = store.add("b", tensor::rand_uniform(&[3, 4], 0.5, 2.5, &mut rng));
            let w = store.add("w", tensor::rand_uniform(&[4, 5], -1.0, 1.0, &mut rng));
            let report = grad_check(&mut store, 1e-5, |g, s| {
                let av = g.param(s, a);
                let bv = g.param(s, b);
                let wv = g.param(s, w);
                let sum = g.add(av, bv).unwrap();
                let diff = g.sub(av, bv).unwrap();
                let prod = g.mul(sum, diff).unwrap();
                let quot = g.div(prod, bv).unwrap();
                let out = g.matmul(quot, wv).unwrap();
                let sq = g.mul(out, out).unwrap();
                g.mean_all(sq)
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "binary seed {seed}: {report:?}");
        }
    }

    #[test]
    fn broadcast_gradients_match_central_difference() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let mut store = ParamStore::new();
            let x = store.add("x", tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, &mut rng));
            let bias = store.add("bias", tensor::rand_uniform(&[4], -1.0, 1.0, &mut rng));
            let gain = store.add("gain", tensor::rand_uniform(&[1, 1, 4], 0.5, 1.5, &mut rng));
            let report = grad_check(&mut store, 1e-5, |g, s| {
                let xv = g.param(s, x);
                let bv = g.param(s, bias);
                let gv = g.param(s, gain);
                let y = g.mul(xv, gv).unwrap();
                let y = g.add(y, bv).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "broadcast seed {seed}: {report:?}");
        }
    }

    #[test]
    fn concat_and_narrow_gradients() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let mut store = ParamStore::new();
            let a = store.add("a", tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng));
            let b = store.add("b", tensor::rand_uniform(&[2, 2], -1.0, 1.0, &mut rng));
            let report = grad_check(&mut store, 1e-5, |g, s| {
                let av = g.param(s, a);
                let bv = g.param(s, b);
                let cat = g.concat(&[av, bv], 1).unwrap();
                let mid = g.narrow(cat, 1, 1, 3).unwrap();
                let sq = g.mul(mid, mid).unwrap();
                g.sum_all(sq)
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "concat seed {seed}: {report:?}");
        }
    }

    #[test]
    fn batch_norm_eval_is_linear_per_channel() {
        let mut store = ParamStore::new();
        let id = store.add(
            "x",
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let rm = vec![0.5, -0.5];
        let rv = vec![4.0, 9.0];
        let report = grad_check(&mut store, 1e-5, |g, s| {
            let x = g.param(s, id);
            let y = g.batch_norm_eval(x, &rm, &rv);
            let sq = g.mul(y, y).unwrap();
            g.sum_all(sq)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn gradients_accumulate_across_shards() {
        let (store, id) = store_with("x", &[2], &[1.0, 2.0]);
        let run = |scale: f64| {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let y = g.scale(x, scale);
            let sq = g.mul(y, y).unwrap();
            let loss = g.sum_all(sq);
            g.backward(loss, &store).unwrap()
        };
        let mut total = run(1.0);
        total.accumulate(&run(2.0)).unwrap();
        // d/dx [x^2 + 4x^2] = 10x
        assert_eq!(total.get(&store, id).data(), &[10.0, 20.0]);
    }
}
