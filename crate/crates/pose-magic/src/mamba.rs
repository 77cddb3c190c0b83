//! Gated selective-SSM sequence mixer, the "Mamba" half of each block.
//!
//! One stream normalizes its input once, projects it, runs one or two
//! selective SSM passes (forward, and reversed for the bidirectional
//! variant), gates the results with a GELU branch of the same normalized
//! input, and projects back onto a residual connection:
//!
//!   u    = LN(X) W_p1
//!   X_f  = SSM_f(gelu(u W_f))
//!   X_b  = flip(SSM_b(gelu(flip(u) W_b)))        (bidirectional only)
//!   X_i  = gelu(LN(X) W_p2)
//!   X_a  = X_f * X_i + X_b * X_i                 (or X_f * X_i alone)
//!   out  = X + X_a W_p3
//!
//! W_p3 starts at zero, so a fresh stream is the identity map and depth
//! does not disturb the signal until training asks it to.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::ssm::{selective_ssm, SsmParams};
use crate::tensor::{self, NumericsError, Result, Tensor};

/// Reverse-direction branch, present only in the bidirectional variant.
#[derive(Debug, Clone)]
pub struct MambaBackwardParams {
    pub w_b: ParamId,
    pub ssm_b: SsmParams,
}

/// Parameters of one Mamba stream over one axis (joints or frames).
#[derive(Debug, Clone)]
pub struct MambaStreamParams {
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    /// [d, d] shared pre-projection
    pub w_p1: ParamId,
    /// [d, d] gate projection
    pub w_p2: ParamId,
    /// [d, d] output projection, zero-initialized
    pub w_p3: ParamId,
    /// [d, d] forward branch projection
    pub w_f: ParamId,
    pub ssm_f: SsmParams,
    pub backward: Option<MambaBackwardParams>,
    pub d: usize,
}

impl MambaStreamParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        n: usize,
        bidirectional: bool,
        rng: &mut impl Rng,
    ) -> MambaStreamParams {
        let bound = 1.0 / (d as f64).sqrt();
        let norm_gain = store.add(format!("{prefix}.norm.gain"), Tensor::full(&[d], 1.0));
        let norm_bias = store.add(format!("{prefix}.norm.bias"), Tensor::zeros(&[d]));
        let w_p1 = store.add(
            format!("{prefix}.w_p1"),
            tensor::rand_uniform(&[d, d], -bound, bound, rng),
        );
        let w_p2 = store.add(
            format!("{prefix}.w_p2"),
            tensor::rand_uniform(&[d, d], -bound, bound, rng),
        );
        let w_f = store.add(
            format!("{prefix}.w_f"),
            tensor::rand_uniform(&[d, d], -bound, bound, rng),
        );
        let w_p3 = store.add(format!("{prefix}.w_p3"), Tensor::zeros(&[d, d]));
        let ssm_f = SsmParams::init(store, &format!("{prefix}.ssm_f"), d, n, rng);
        let backward = if bidirectional {
            let w_b = store.add(
                format!("{prefix}.w_b"),
                tensor::rand_uniform(&[d, d], -bound, bound, rng),
            );
            let ssm_b = SsmParams::init(store, &format!("{prefix}.ssm_b"), d, n, rng);
            Some(MambaBackwardParams { w_b, ssm_b })
        } else {
            None
        };
        MambaStreamParams {
            norm_gain,
            norm_bias,
            w_p1,
            w_p2,
            w_p3,
            w_f,
            ssm_f,
            backward,
            d,
        }
    }

    pub fn is_bidirectional(&self) -> bool {
        self.backward.is_some()
    }
}

/// Run one Mamba stream over `x` of shape [S, L, d]. The scan mixes along
/// axis 1; axis 0 is a batch of independent sequences.
pub fn mamba_stream(
    graph: &mut Graph,
    store: &ParamStore,
    p: &MambaStreamParams,
    x: Var,
) -> Result<Var> {
    let shape = graph.value(x).shape();
    if shape.len() != 3 || shape[2] != p.d {
        return Err(NumericsError::Invalid {
            op: "mamba_stream",
            msg: format!("x must be [S, L, {}], got {:?}", p.d, shape),
        });
    }

    // one shared normalization feeds the projection and the gate
    let normed = graph.layer_norm(x);
    let gain = graph.param(store, p.norm_gain);
    let bias = graph.param(store, p.norm_bias);
    let scaled = graph.mul(normed, gain)?;
    let aff = graph.add(scaled, bias)?;

    let w_p1 = graph.param(store, p.w_p1);
    let u = graph.matmul(aff, w_p1)?;

    let w_f = graph.param(store, p.w_f);
    let f_pre = graph.matmul(u, w_f)?;
    let f_act = graph.gelu(f_pre);
    let x_f = selective_ssm(graph, store, &p.ssm_f, f_act)?;

    let x_b = match &p.backward {
        Some(back) => {
            let u_rev = graph.flip(u, 1)?;
            let w_b = graph.param(store, back.w_b);
            let b_pre = graph.matmul(u_rev, w_b)?;
            let b_act = graph.gelu(b_pre);
            let scanned = selective_ssm(graph, store, &back.ssm_b, b_act)?;
            Some(graph.flip(scanned, 1)?)
        }
        None => None,
    };

    let w_p2 = graph.param(store, p.w_p2);
    let gate_pre = graph.matmul(aff, w_p2)?;
    let gate = graph.gelu(gate_pre);

    let fwd_gated = graph.mul(x_f, gate)?;
    let x_a = match x_b {
        Some(xb) => {
            let back_gated = graph.mul(xb, gate)?;
            graph.add(fwd_gated, back_gated)?
        }
        None => fwd_gated,
    };

    let w_p3 = graph.param(store, p.w_p3);
    let update = graph.matmul(x_a, w_p3)?;
    graph.add(x, update)
}
