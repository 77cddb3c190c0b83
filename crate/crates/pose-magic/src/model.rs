//! The full lifting network: joint embedding, a stack of two-stream blocks,
//! and the expansion head that regresses 3D joint positions.
//!
//! Each block runs a state-space stream and a graph stream in parallel from
//! the shared block input. Within a stream, the spatial pass (over joints)
//! runs before the temporal pass (over frames). The two stream outputs are
//! recombined per position by a learned convex weighting. The architecture
//! is length-agnostic: nothing is sized by the training sequence length.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::graph::{
    gcn_stream, normalize_adjacency, spatial_adjacency, AdjacencySource, BnBuffer, BnUpdates,
    GcnStreamParams, Mode, SimilarityKind, Skeleton, SkeletonError,
};
use crate::mamba::MambaStreamParams;
use crate::tensor::{self, NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {0}")]
    BadConfig(String),
    #[error("input has {got} joints, model expects {want}")]
    JointMismatch { got: usize, want: usize },
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error("input must be [T, J, 3], got {0:?}")]
    BadInputShape(Vec<usize>),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

/// Temporal wiring of the network. Spatial passes are always bidirectional;
/// the causal variant restricts only the time axis (unidirectional scan,
/// past-masked neighbor selection) so that frame t never sees frames > t.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Bidirectional,
    Causal,
}

fn default_blocks() -> usize {
    26
}
fn default_d_model() -> usize {
    128
}
fn default_d_expand() -> usize {
    512
}
fn default_knn_k() -> usize {
    2
}
fn default_joints() -> usize {
    17
}
fn default_state_dim() -> usize {
    16
}
fn default_t_train() -> usize {
    243
}
fn default_lambda_v() -> f64 {
    20.0
}
fn default_skeleton() -> Skeleton {
    Skeleton::h36m()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of stacked two-stream blocks.
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// Feature width per joint.
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    /// Width of the pre-head expansion.
    #[serde(default = "default_d_expand")]
    pub d_expand: usize,
    /// Neighbors per frame in the dynamic temporal graph.
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
    #[serde(default = "default_joints")]
    pub joints: usize,
    /// State dimension of each selective-scan channel.
    #[serde(default = "default_state_dim")]
    pub state_dim: usize,
    #[serde(default)]
    pub direction: Direction,
    /// Sequence length used by training; inference accepts any length.
    #[serde(default = "default_t_train")]
    pub t_train: usize,
    /// Weight of the velocity term in the training loss.
    #[serde(default = "default_lambda_v")]
    pub lambda_v: f64,
    /// Fusion weights per channel instead of one scalar pair per position.
    #[serde(default)]
    pub fusion_per_channel: bool,
    #[serde(default)]
    pub similarity: SimilarityKind,
    #[serde(default = "default_skeleton")]
    pub skeleton: Skeleton,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: default_blocks(),
            d_model: default_d_model(),
            d_expand: default_d_expand(),
            knn_k: default_knn_k(),
            joints: default_joints(),
            state_dim: default_state_dim(),
            direction: Direction::default(),
            t_train: default_t_train(),
            lambda_v: default_lambda_v(),
            fusion_per_channel: false,
            similarity: SimilarityKind::default(),
            skeleton: default_skeleton(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.skeleton.validate()?;
        if self.joints != self.skeleton.joint_count {
            return Err(ModelError::BadConfig(format!(
                "joints = {} but skeleton has {}",
                self.joints, self.skeleton.joint_count
            )));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_expand", self.d_expand),
            ("knn_k", self.knn_k),
            ("state_dim", self.state_dim),
            ("t_train", self.t_train),
        ] {
            if v == 0 {
                return Err(ModelError::BadConfig(format!("{name} must be positive")));
            }
        }
        if !self.lambda_v.is_finite() || self.lambda_v < 0.0 {
            return Err(ModelError::BadConfig("lambda_v must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// One depth level: both streams plus the fusion weights.
#[derive(Debug, Clone)]
pub struct MagicBlockParams {
    pub spatial_mamba: MambaStreamParams,
    pub temporal_mamba: MambaStreamParams,
    pub spatial_gcn: GcnStreamParams,
    pub temporal_gcn: GcnStreamParams,
    pub fusion_w: ParamId,
}

impl MagicBlockParams {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        buffers: &mut Vec<BnBuffer>,
        rng: &mut impl rand::Rng,
    ) -> MagicBlockParams {
        let d = cfg.d_model;
        let n = cfg.state_dim;
        let temporal_bidir = cfg.direction == Direction::Bidirectional;
        let fusion_cols = if cfg.fusion_per_channel { 2 * d } else { 2 };
        MagicBlockParams {
            spatial_mamba: MambaStreamParams::init(
                store,
                &format!("{prefix}.spatial_mamba"),
                d,
                n,
                true,
                rng,
            ),
            temporal_mamba: MambaStreamParams::init(
                store,
                &format!("{prefix}.temporal_mamba"),
                d,
                n,
                temporal_bidir,
                rng,
            ),
            spatial_gcn: GcnStreamParams::init(
                store,
                &format!("{prefix}.spatial_gcn"),
                d,
                buffers,
                rng,
            ),
            temporal_gcn: GcnStreamParams::init(
                store,
                &format!("{prefix}.temporal_gcn"),
                d,
                buffers,
                rng,
            ),
            fusion_w: store.add(
                format!("{prefix}.fusion.w"),
                Tensor::zeros(&[2 * d, fusion_cols]),
            ),
        }
    }
}

/// Pose lifting model: 2D joint tracks with confidence in, 3D joint
/// positions out, for sequences of any length.
#[derive(Debug)]
pub struct PoseMagicModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub buffers: Vec<BnBuffer>,
    pub input_proj_w: ParamId,
    pub input_proj_b: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<MagicBlockParams>,
    pub expand_w: ParamId,
    pub expand_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// Normalized skeleton adjacency, fixed for the model's lifetime.
    spatial_adj: Tensor,
}

impl PoseMagicModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<PoseMagicModel, ModelError> {
        use rand::SeedableRng;
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut buffers = Vec::new();
        let d = config.d_model;
        let dp = config.d_expand;
        let j = config.joints;

        let in_bound = 1.0 / (3.0f64).sqrt();
        let input_proj_w = store.add(
            "input_proj.w".to_string(),
            tensor::rand_uniform(&[3, d], -in_bound, in_bound, &mut rng),
        );
        let input_proj_b = store.add("input_proj.b".to_string(), Tensor::zeros(&[d]));
        let pos_embed = store.add(
            "pos_embed".to_string(),
            tensor::rand_normal(&[j, d], 0.0, 0.02, &mut rng),
        );

        let blocks = (0..config.blocks)
            .map(|i| {
                MagicBlockParams::init(&mut store, &format!("block{i}"), &config, &mut buffers, &mut rng)
            })
            .collect();

        let exp_bound = 1.0 / (d as f64).sqrt();
        let expand_w = store.add(
            "expand.w".to_string(),
            tensor::rand_uniform(&[d, dp], -exp_bound, exp_bound, &mut rng),
        );
        let expand_b = store.add("expand.b".to_string(), Tensor::zeros(&[dp]));
        let head_bound = 1.0 / (dp as f64).sqrt();
        let head_w = store.add(
            "head.w".to_string(),
            tensor::rand_uniform(&[dp, 3], -head_bound, head_bound, &mut rng),
        );
        let head_b = store.add("head.b".to_string(), Tensor::zeros(&[3]));

        let spatial_adj = normalize_adjacency(&spatial_adjacency(&config.skeleton));

        Ok(PoseMagicModel {
            config,
            store,
            buffers,
            input_proj_w,
            input_proj_b,
            pos_embed,
            blocks,
            expand_w,
            expand_b,
            head_w,
            head_b,
            spatial_adj,
        })
    }

    pub fn count_params(&self) -> usize {
        self.store.total_len()
    }

    /// Project (x, y, confidence) triples to model width and add the
    /// per-joint position embedding, shared across frames.
    pub fn embed(&self, store: &ParamStore, graph: &mut Graph, xin: Var) -> Result<Var, ModelError> {
        let shape = graph.value(xin).shape().to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(ModelError::BadInputShape(shape));
        }
        if shape[1] != self.config.joints {
            return Err(ModelError::JointMismatch {
                got: shape[1],
                want: self.config.joints,
            });
        }
        let w = graph.param(store, self.input_proj_w);
        let b = graph.param(store, self.input_proj_b);
        let pos = graph.param(store, self.pos_embed);
        let proj = graph.matmul(xin, w)?;
        let proj = graph.add(proj, b)?;
        Ok(graph.add(proj, pos)?)
    }

    /// Convex per-position combination of the two stream outputs. Weights
    /// come from a linear map on the concatenated features followed by a
    /// two-way softmax; with zero weights the result is the plain average.
    pub fn adaptive_fusion(
        &self,
        store: &ParamStore,
        graph: &mut Graph,
        fusion_w: ParamId,
        x_m: Var,
        x_g: Var,
    ) -> Result<Var, ModelError> {
        let d = self.config.d_model;
        let shape = graph.value(x_m).shape().to_vec();
        let (t, j) = (shape[0], shape[1]);
        let cat = graph.concat(&[x_m, x_g], 2)?;
        let w = graph.param(store, fusion_w);
        let logits = graph.matmul(cat, w)?;
        let (alpha_m, alpha_g) = if self.config.fusion_per_channel {
            // logits [T, J, 2d] -> channelwise pair softmax
            let pair = graph.reshape(logits, &[t, j, 2, d])?;
            let pair = graph.permute(pair, &[0, 1, 3, 2])?;
            let alpha = graph.softmax(pair, 3)?;
            let am = graph.narrow(alpha, 3, 0, 1)?;
            let ag = graph.narrow(alpha, 3, 1, 1)?;
            (
                graph.reshape(am, &[t, j, d])?,
                graph.reshape(ag, &[t, j, d])?,
            )
        } else {
            // logits [T, J, 2] -> per-position scalar pair, broadcast over d
            let alpha = graph.softmax(logits, 2)?;
            (graph.narrow(alpha, 2, 0, 1)?, graph.narrow(alpha, 2, 1, 1)?)
        };
        let lhs = graph.mul(alpha_m, x_m)?;
        let rhs = graph.mul(alpha_g, x_g)?;
        Ok(graph.add(lhs, rhs)?)
    }

    /// One two-stream block over features shaped [T, J, d].
    pub fn magic_block(
        &self,
        store: &ParamStore,
        graph: &mut Graph,
        block: &MagicBlockParams,
        x: Var,
        mode: Mode,
        updates: &mut BnUpdates,
    ) -> Result<Var, ModelError> {
        let d = self.config.d_model;
        let shape = graph.value(x).shape().to_vec();
        let (t, j) = (shape[0], shape[1]);
        let causal = self.config.direction == Direction::Causal;

        // state-space stream: joints within each frame, then frames per joint
        let m_spatial = crate::mamba::mamba_stream(graph, store, &block.spatial_mamba, x)?;
        let m_t_in = graph.permute(m_spatial, &[1, 0, 2])?;
        let m_temporal =
            crate::mamba::mamba_stream(graph, store, &block.temporal_mamba, m_t_in)?;
        let x_m = graph.permute(m_temporal, &[1, 0, 2])?;

        // graph stream from the same block input
        let g_spatial = gcn_stream(
            graph,
            store,
            &block.spatial_gcn,
            x,
            AdjacencySource::Static(&self.spatial_adj),
            mode,
            &self.buffers,
            updates,
        )?;
        let g_t_in = graph.permute(g_spatial, &[1, 0, 2])?;
        let g_temporal = gcn_stream(
            graph,
            store,
            &block.temporal_gcn,
            g_t_in,
            AdjacencySource::Dynamic {
                k: self.config.knn_k.min(t.saturating_sub(1)).max(1),
                causal,
                similarity: self.config.similarity,
            },
            mode,
            &self.buffers,
            updates,
        )?;
        let x_g = graph.permute(g_temporal, &[1, 0, 2])?;

        debug_assert_eq!(graph.value(x_m).shape(), &[t, j, d]);
        self.adaptive_fusion(store, graph, block.fusion_w, x_m, x_g)
    }

    /// Build the forward graph for one sequence [T, J, 3] and return the
    /// output node, shaped [T, J, 3]. Training mode records batch-norm
    /// statistics into `updates`; applying them is the caller's decision.
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        x: &Tensor,
        mode: Mode,
        updates: &mut BnUpdates,
    ) -> Result<Var, ModelError> {
        self.forward_graph_in(&self.store, graph, x, mode, updates)
    }

    /// Same as `forward_graph` but reading parameters from `store`, which
    /// must have the layout of `self.store`. Gradient checking perturbs a
    /// detached copy of the store and rebuilds the graph through here.
    pub fn forward_graph_in(
        &self,
        store: &ParamStore,
        graph: &mut Graph,
        x: &Tensor,
        mode: Mode,
        updates: &mut BnUpdates,
    ) -> Result<Var, ModelError> {
        if !x.is_finite() {
            return Err(ModelError::NonFiniteInput);
        }
        let xin = graph.constant(x.clone());
        self.forward_graph_var(store, graph, xin, mode, updates)
    }

    /// Core forward pass with the input already on the graph, so callers
    /// can register it as a parameter and differentiate with respect to it
    /// (the causality check reads analytic input gradients this way).
    pub fn forward_graph_var(
        &self,
        store: &ParamStore,
        graph: &mut Graph,
        x: Var,
        mode: Mode,
        updates: &mut BnUpdates,
    ) -> Result<Var, ModelError> {
        let mut h = self.embed(store, graph, x)?;
        for block in &self.blocks {
            h = self.magic_block(store, graph, block, h, mode, updates)?;
        }
        let ew = graph.param(store, self.expand_w);
        let eb = graph.param(store, self.expand_b);
        let expanded = graph.matmul(h, ew)?;
        let expanded = graph.add(expanded, eb)?;
        let expanded = graph.tanh(expanded);
        let hw = graph.param(store, self.head_w);
        let hb = graph.param(store, self.head_b);
        let out = graph.matmul(expanded, hw)?;
        Ok(graph.add(out, hb)?)
    }

    /// Run inference on one sequence and return the [T, J, 3] prediction.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor, ModelError> {
        let mut graph = Graph::new();
        let mut updates = BnUpdates::new();
        let out = self.forward_graph(&mut graph, x, mode, &mut updates)?;
        Ok(graph.value(out).clone())
    }

    /// Fold collected batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &BnUpdates) {
        for (idx, mean, var) in &updates.0 {
            self.buffers[*idx].update(mean, var);
        }
    }
}
