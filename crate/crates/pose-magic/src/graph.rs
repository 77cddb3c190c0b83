//! Skeleton topology, dynamic temporal graphs, and graph convolutions.
//!
//! Two kinds of graphs flow through the network. The spatial graph is the
//! kinematic skeleton, fixed and symmetric. The temporal graph is rebuilt
//! on every pass, per sample and per joint, by connecting each frame to its
//! k most similar frames; in causal mode the candidate set is masked to
//! strictly earlier frames before selection. Graph construction is a hard
//! top-k and carries no gradient; the convolution weights do.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::tensor::{self, NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("joint_count must be positive")]
    Empty,
    #[error("edge [{0}, {1}] out of range for {2} joints")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("self-edge [{0}, {0}] not allowed")]
    SelfEdge(usize),
    #[error("left_right_pairs [{0}, {1}] invalid: {2}")]
    BadPair(usize, usize, String),
    #[error("root {0} out of range for {1} joints")]
    BadRoot(usize, usize),
    #[error("names has {0} entries for {1} joints")]
    BadNames(usize, usize),
    #[error("skeleton JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Kinematic tree plus the mirror pairing used by flip augmentation.
/// Skeleton topology is data, not code; the default ships as JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joint_count: usize,
    pub edges: Vec<[usize; 2]>,
    pub left_right_pairs: Vec<[usize; 2]>,
    pub root: usize,
    pub names: Vec<String>,
}

const DEFAULT_SKELETON_JSON: &str = include_str!("../data/h36m_skeleton.json");

impl Skeleton {
    pub fn from_json(s: &str) -> Result<Skeleton, SkeletonError> {
        let skel: Skeleton = serde_json::from_str(s)?;
        skel.validate()?;
        Ok(skel)
    }

    /// The 17-joint Human3.6M-convention skeleton bundled with the crate.
    pub fn h36m() -> Skeleton {
        Skeleton::from_json(DEFAULT_SKELETON_JSON).expect("bundled skeleton is valid")
    }

    pub fn validate(&self) -> Result<(), SkeletonError> {
        if self.joint_count == 0 {
            return Err(SkeletonError::Empty);
        }
        for &[a, b] in &self.edges {
            if a >= self.joint_count || b >= self.joint_count {
                return Err(SkeletonError::EdgeOutOfRange(a, b, self.joint_count));
            }
            if a == b {
                return Err(SkeletonError::SelfEdge(a));
            }
        }
        let mut seen = vec![false; self.joint_count];
        for &[l, r] in &self.left_right_pairs {
            if l >= self.joint_count || r >= self.joint_count {
                return Err(SkeletonError::BadPair(l, r, "index out of range".into()));
            }
            if l == r {
                return Err(SkeletonError::BadPair(l, r, "pairs a joint with itself".into()));
            }
            if seen[l] || seen[r] {
                return Err(SkeletonError::BadPair(l, r, "joint appears in two pairs".into()));
            }
            seen[l] = true;
            seen[r] = true;
        }
        if self.root >= self.joint_count {
            return Err(SkeletonError::BadRoot(self.root, self.joint_count));
        }
        if self.names.len() != self.joint_count {
            return Err(SkeletonError::BadNames(self.names.len(), self.joint_count));
        }
        Ok(())
    }

    /// Permutation sending each joint to its mirror image; unpaired joints
    /// map to themselves.
    pub fn mirror_permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.joint_count).collect();
        for &[l, r] in &self.left_right_pairs {
            perm[l] = r;
            perm[r] = l;
        }
        perm
    }
}

/// Binary adjacency matrix with self-loops, row-directed in causal mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency(pub Tensor);

impl Adjacency {
    pub fn matrix(&self) -> &Tensor {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.shape()[0]
    }
}

/// Skeleton edges as a symmetric 0/1 matrix with self-loops.
pub fn spatial_adjacency(skel: &Skeleton) -> Adjacency {
    let j = skel.joint_count;
    let mut a = Tensor::zeros(&[j, j]);
    for i in 0..j {
        a.data_mut()[i * j + i] = 1.0;
    }
    for &[p, q] in &skel.edges {
        a.data_mut()[p * j + q] = 1.0;
        a.data_mut()[q * j + p] = 1.0;
    }
    Adjacency(a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    /// Raw dot product of frame features.
    #[default]
    Dot,
    /// Dot product of L2-normalized features; zero vectors score zero.
    Cosine,
}

/// Frame-to-frame similarity of one joint's feature sequence, [T, f] -> [T, T].
pub fn temporal_similarity(x: &Tensor, kind: SimilarityKind) -> Tensor {
    let t = x.shape()[0];
    let f = x.shape()[1];
    let rows: Vec<&[f64]> = (0..t).map(|i| &x.data()[i * f..(i + 1) * f]).collect();
    let norms: Vec<f64> = match kind {
        SimilarityKind::Dot => vec![1.0; t],
        SimilarityKind::Cosine => rows
            .iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    0.0
                } else {
                    1.0 / n
                }
            })
            .collect(),
    };
    let mut s = vec![0.0; t * t];
    for i in 0..t {
        for j in i..t {
            let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
            let v = dot * norms[i] * norms[j];
            s[i * t + j] = v;
            s[j * t + i] = v;
        }
    }
    Tensor::new(vec![t, t], s).expect("temporal_similarity")
}

/// Top-k neighbor selection per row. The diagonal is never a candidate;
/// the self-loop is added after selection, so every row holds exactly
/// min(k, candidates)+1 ones. Causal mode masks columns j >= i before
/// selection, which makes the result strictly lower-triangular plus the
/// unit diagonal. Ties break toward the lower frame index.
pub fn knn_adjacency(sim: &Tensor, k: usize, causal: bool) -> Adjacency {
    assert!(k >= 1, "knn_adjacency needs k >= 1");
    let t = sim.shape()[0];
    assert_eq!(sim.shape(), &[t, t], "similarity matrix must be square");
    let mut a = Tensor::zeros(&[t, t]);
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(t);
    for i in 0..t {
        candidates.clear();
        let limit = if causal { i } else { t };
        for j in 0..limit {
            if j != i {
                candidates.push((sim.data()[i * t + j], j));
            }
        }
        candidates
            .sort_by(|(sa, ja), (sb, jb)| sb.partial_cmp(sa).unwrap().then(ja.cmp(jb)));
        for &(_, j) in candidates.iter().take(k) {
            a.data_mut()[i * t + j] = 1.0;
        }
        a.data_mut()[i * t + i] = 1.0;
    }
    Adjacency(a)
}

/// D^{-1/2} A D^{-1/2} with D the diagonal of row sums. Row sums are used
/// on both sides even for directed (causal) matrices, which keeps the
/// spectral radius at most 1: the result is similar to the row-stochastic
/// D^{-1} A. Self-loops guarantee positive degrees.
pub fn normalize_adjacency(adj: &Adjacency) -> Tensor {
    let m = adj.size();
    let a = adj.matrix();
    let mut inv_sqrt_deg = vec![0.0; m];
    for i in 0..m {
        let deg: f64 = a.data()[i * m..(i + 1) * m].iter().sum();
        assert!(deg > 0.0, "row {i} has zero degree; self-loops missing");
        inv_sqrt_deg[i] = 1.0 / deg.sqrt();
    }
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            out[i * m + j] = a.data()[i * m + j] * inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    Tensor::new(vec![m, m], out).expect("normalize_adjacency")
}

/// Largest absolute eigenvalue by power iteration from the all-ones
/// vector. For the nonnegative matrices produced here the dominant
/// eigenvalue is the Perron root, so the iteration converges.
pub fn spectral_radius(m: &Tensor, iters: usize) -> f64 {
    let n = m.shape()[0];
    assert_eq!(m.shape(), &[n, n]);
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut rho = 0.0;
    for _ in 0..iters {
        let mut next = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += m.data()[i * n + j] * v[j];
            }
            next[i] = acc;
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        rho = norm;
        for x in &mut next {
            *x /= norm;
        }
        v = next;
    }
    rho
}

// ── graph convolution layers ─────────────────────────────────────────

/// Train/eval switch. Batch statistics couple positions in training mode,
/// so anything that relies on frame independence (causality checks,
/// streaming) must run in eval mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;

/// Running batch-norm statistics. These are model state but not trainable;
/// checkpoints store them as buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnBuffer {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnBuffer {
    pub fn new(channels: usize) -> Self {
        BnBuffer {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, mean: &[f64], var: &[f64]) {
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// Batch statistics observed during one forward pass, keyed by buffer
/// index. Collected instead of applied so that parallel shards can merge
/// deterministically before the running estimates move.
#[derive(Debug, Default)]
pub struct BnUpdates(pub Vec<(usize, Vec<f64>, Vec<f64>)>);

impl BnUpdates {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One graph convolution: weights for the propagated and the skip term,
/// batch-norm affine, and the index of its running-stats buffer.
#[derive(Debug, Clone)]
pub struct GcnLayerParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub bn_gain: ParamId,
    pub bn_bias: ParamId,
    pub bn_buffer: usize,
    pub d: usize,
}

impl GcnLayerParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        buffers: &mut Vec<BnBuffer>,
        rng: &mut impl rand::Rng,
    ) -> GcnLayerParams {
        let bound = 1.0 / (d as f64).sqrt();
        let bn_buffer = buffers.len();
        buffers.push(BnBuffer::new(d));
        GcnLayerParams {
            w1: store.add(
                format!("{prefix}.w1"),
                tensor::rand_uniform(&[d, d], -bound, bound, rng),
            ),
            w2: store.add(
                format!("{prefix}.w2"),
                tensor::rand_uniform(&[d, d], -bound, bound, rng),
            ),
            bn_gain: store.add(format!("{prefix}.bn.gain"), Tensor::full(&[d], 1.0)),
            bn_bias: store.add(format!("{prefix}.bn.bias"), Tensor::zeros(&[d])),
            bn_buffer,
            d,
        }
    }
}

/// GCN(x) = ReLU(x + BN(A x W1 + x W2)) with A the normalized adjacency.
/// `adj` is [m, m] shared across the batch or [B, m, m] per sample; `x` is
/// [B, m, d]. Training mode normalizes by batch statistics and records
/// them in `updates`; eval mode reads the running buffer.
pub fn gcn_layer(
    graph: &mut Graph,
    store: &ParamStore,
    p: &GcnLayerParams,
    adj: &Tensor,
    x: Var,
    mode: Mode,
    buffers: &[BnBuffer],
    updates: &mut BnUpdates,
) -> Result<Var, NumericsError> {
    let shape = graph.value(x).shape().to_vec();
    if shape.len() != 3 || shape[2] != p.d {
        return Err(NumericsError::Invalid {
            op: "gcn_layer",
            msg: format!("x must be [B, m, {}], got {:?}", p.d, shape),
        });
    }
    let m = shape[1];
    let adj_ok = adj.shape() == [m, m] || adj.shape() == [shape[0], m, m];
    if !adj_ok {
        return Err(NumericsError::Invalid {
            op: "gcn_layer",
            msg: format!("adjacency {:?} does not fit x {:?}", adj.shape(), shape),
        });
    }

    let adj_c = graph.constant(adj.clone());
    let w1 = graph.param(store, p.w1);
    let w2 = graph.param(store, p.w2);
    let propagated = graph.matmul(adj_c, x)?;
    let term1 = graph.matmul(propagated, w1)?;
    let term2 = graph.matmul(x, w2)?;
    let pre_norm = graph.add(term1, term2)?;

    let normed = match mode {
        Mode::Train => {
            let (node, mean, var) = graph.batch_norm_train(pre_norm);
            updates.0.push((p.bn_buffer, mean, var));
            node
        }
        Mode::Eval => {
            let buf = &buffers[p.bn_buffer];
            graph.batch_norm_eval(pre_norm, &buf.running_mean, &buf.running_var)
        }
    };
    let gain = graph.param(store, p.bn_gain);
    let bias = graph.param(store, p.bn_bias);
    let scaled = graph.mul(normed, gain)?;
    let affine = graph.add(scaled, bias)?;

    let residual = graph.add(x, affine)?;
    Ok(graph.relu(residual))
}

/// Where a GCN stream gets its adjacency.
pub enum AdjacencySource<'a> {
    /// Fixed normalized matrix, e.g. the skeleton graph.
    Static(&'a Tensor),
    /// Rebuilt per sample from the stream input's current feature values.
    /// Selection is a hard top-k; no gradient flows through it.
    Dynamic {
        k: usize,
        causal: bool,
        similarity: SimilarityKind,
    },
}

/// Parameters of one residual GCN stage: outer norm, graph convolution,
/// second norm, and a pointwise MLP, composed as
///
///   X'  = X + GCN(Norm(X))
///   out = X' + MLP(Norm(X'))
#[derive(Debug, Clone)]
pub struct GcnStreamParams {
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub gcn: GcnLayerParams,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub d: usize,
}

/// MLP expansion ratio between the two pointwise layers.
pub const MLP_RATIO: usize = 4;

impl GcnStreamParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        buffers: &mut Vec<BnBuffer>,
        rng: &mut impl rand::Rng,
    ) -> GcnStreamParams {
        let hidden = MLP_RATIO * d;
        let bound_in = 1.0 / (d as f64).sqrt();
        let bound_hidden = 1.0 / (hidden as f64).sqrt();
        GcnStreamParams {
            norm1_gain: store.add(format!("{prefix}.norm1.gain"), Tensor::full(&[d], 1.0)),
            norm1_bias: store.add(format!("{prefix}.norm1.bias"), Tensor::zeros(&[d])),
            gcn: GcnLayerParams::init(store, &format!("{prefix}.gcn"), d, buffers, rng),
            norm2_gain: store.add(format!("{prefix}.norm2.gain"), Tensor::full(&[d], 1.0)),
            norm2_bias: store.add(format!("{prefix}.norm2.bias"), Tensor::zeros(&[d])),
            mlp_w1: store.add(
                format!("{prefix}.mlp.w1"),
                tensor::rand_uniform(&[d, hidden], -bound_in, bound_in, rng),
            ),
            mlp_b1: store.add(format!("{prefix}.mlp.b1"), Tensor::zeros(&[hidden])),
            mlp_w2: store.add(
                format!("{prefix}.mlp.w2"),
                tensor::rand_uniform(&[hidden, d], -bound_hidden, bound_hidden, rng),
            ),
            mlp_b2: store.add(format!("{prefix}.mlp.b2"), Tensor::zeros(&[d])),
            d,
        }
    }
}

fn affine_layer_norm(
    graph: &mut Graph,
    store: &ParamStore,
    gain: ParamId,
    bias: ParamId,
    x: Var,
) -> Result<Var, NumericsError> {
    let normed = graph.layer_norm(x);
    let g = graph.param(store, gain);
    let b = graph.param(store, bias);
    let scaled = graph.mul(normed, g)?;
    graph.add(scaled, b)
}

/// One GCN stream stage over `x` of shape [B, m, d]. For the dynamic
/// temporal source, B indexes joints and m indexes frames; each joint gets
/// its own adjacency built from the current values of its feature rows.
pub fn gcn_stream(
    graph: &mut Graph,
    store: &ParamStore,
    p: &GcnStreamParams,
    x: Var,
    source: AdjacencySource,
    mode: Mode,
    buffers: &[BnBuffer],
    updates: &mut BnUpdates,
) -> Result<Var, NumericsError> {
    let shape = graph.value(x).shape().to_vec();
    if shape.len() != 3 || shape[2] != p.d {
        return Err(NumericsError::Invalid {
            op: "gcn_stream",
            msg: format!("x must be [B, m, {}], got {:?}", p.d, shape),
        });
    }
    let (b, m) = (shape[0], shape[1]);

    let adj = match source {
        AdjacencySource::Static(t) => t.clone(),
        AdjacencySource::Dynamic { k, causal, similarity } => {
            let vals = graph.value(x).clone();
            let mut stacked = Vec::with_capacity(b * m * m);
            for bi in 0..b {
                let rows = vals.narrow(0, bi, 1)?.reshape(&[m, p.d])?;
                let sim = temporal_similarity(&rows, similarity);
                let a = knn_adjacency(&sim, k, causal);
                stacked.extend_from_slice(normalize_adjacency(&a).data());
            }
            Tensor::new(vec![b, m, m], stacked)?
        }
    };

    let n1 = affine_layer_norm(graph, store, p.norm1_gain, p.norm1_bias, x)?;
    let conv = gcn_layer(graph, store, &p.gcn, &adj, n1, mode, buffers, updates)?;
    let x1 = graph.add(x, conv)?;

    let n2 = affine_layer_norm(graph, store, p.norm2_gain, p.norm2_bias, x1)?;
    let w1 = graph.param(store, p.mlp_w1);
    let b1 = graph.param(store, p.mlp_b1);
    let w2 = graph.param(store, p.mlp_w2);
    let b2 = graph.param(store, p.mlp_b2);
    let h = graph.matmul(n2, w1)?;
    let h = graph.add(h, b1)?;
    let h = graph.gelu(h);
    let out = graph.matmul(h, w2)?;
    let out = graph.add(out, b2)?;
    let mlp = graph.add(x1, out)?;
    Ok(mlp)
}
