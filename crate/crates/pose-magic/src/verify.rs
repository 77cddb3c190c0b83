//! Self-verification instruments shared by the CLI and the acceptance
//! suite: a frozen full-model gradient-check instance and scan-kernel
//! timing with a fitted scaling exponent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckReport};
use crate::graph::{BnUpdates, Mode, Skeleton};
use crate::metrics;
use crate::model::{ModelConfig, PoseMagicModel};
use crate::ssm::{scan_sequential, ScanInputs};
use crate::tensor::{self, NumericsError, Tensor};

/// Parameter count of the published 26-block bidirectional design point;
/// `count_params` is cross-checked against it as a structural invariant.
pub const REFERENCE_PARAMS: f64 = 14.42e6;

/// Five joints, two mirrored chains. Small enough that finite differences
/// over every parameter stay cheap.
pub fn verification_skeleton() -> Skeleton {
    Skeleton {
        joint_count: 5,
        edges: vec![[0, 1], [1, 2], [0, 3], [3, 4]],
        left_right_pairs: vec![[1, 3], [2, 4]],
        root: 0,
        names: ["hip", "l_hip", "l_foot", "r_hip", "r_foot"]
            .map(String::from)
            .to_vec(),
    }
}

/// Two blocks, width 8, state 4: every architectural path is present and
/// the full parameter sweep finishes in seconds.
pub fn verification_config() -> ModelConfig {
    ModelConfig {
        blocks: 2,
        d_model: 8,
        d_expand: 16,
        state_dim: 4,
        joints: 5,
        knn_k: 2,
        t_train: 6,
        skeleton: verification_skeleton(),
        ..ModelConfig::default()
    }
}

pub struct VerificationInstance {
    pub model: PoseMagicModel,
    pub input: Tensor,
    pub target: Tensor,
}

/// Deterministic gradient-check fixture.
///
/// Central differences on a loss of magnitude L resolve a gradient
/// coordinate no finer than about ulp(L)/eps, so the check can only pass
/// if every parameter's gradient sits well above that floor. Two things
/// arrange this. First, every parameter is re-randomized away from its
/// training initialization: zero-initialized projections, tiny step-size
/// biases, and deep decay lanes all produce gradients orders of magnitude
/// below the resolvable floor. Second, the target is the model's own
/// output plus per-joint offsets and per-frame jitter, keeping position
/// and velocity residuals O(1) so the loss curvature stays benign.
pub fn verification_instance(seed: u64) -> VerificationInstance {
    verification_instance_tuned(seed, WEIGHT_SCALE, RESIDUAL_SCALE)
}

/// Parameter magnitude for the re-randomized store. Larger values raise
/// the gradient floor but compound the network's third derivatives, which
/// central differences pay for quadratically in eps.
const WEIGHT_SCALE: f64 = 0.5;

/// Frozen seed/eps pair for the release gradient check. At this seed the
/// smallest live gradient is ~3e-4, two decades above the rounding floor
/// ulp(loss)/(2 eps), and the worst coordinate sits on a large smooth
/// weight where truncation dominates and stays near 2e-6.
pub const GRAD_CHECK_SEED: u64 = 2;
pub const GRAD_CHECK_EPS: f64 = 2e-5;

/// Scale of the target offsets and jitter. The norm gradients are unit
/// vectors, so shrinking this shrinks the loss value (and with it the
/// finite-difference rounding floor) without shrinking any gradient.
const RESIDUAL_SCALE: f64 = 1.0;

#[doc(hidden)]
pub fn verification_instance_tuned(seed: u64, w: f64, s: f64) -> VerificationInstance {
    let config = verification_config();
    let t = config.t_train;
    let (j, lambda) = (config.joints, config.lambda_v);
    let mut model = PoseMagicModel::new(config, seed).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let names: Vec<(crate::autodiff::ParamId, String)> = model
        .store
        .iter()
        .map(|(id, p)| (id, p.name.clone()))
        .collect();
    for (id, name) in names {
        let shape = model.store.value(id).shape().to_vec();
        let value = if name.ends_with(".a_log") {
            // decay rates in a band where neither a_bar nor its
            // sensitivity to a_log vanishes
            tensor::rand_uniform(&shape, -0.7, 0.7, &mut rng)
        } else if name.ends_with(".delta_bias") {
            // step sizes O(1): tiny deltas make a_bar insensitive
            tensor::rand_uniform(&shape, 0.2, 0.8, &mut rng)
        } else if name.ends_with(".gain") {
            // multiplicative; keep away from zero
            tensor::rand_uniform(&shape, 0.6, 1.4, &mut rng)
        } else {
            tensor::rand_uniform(&shape, -w, w, &mut rng)
        };
        *model.store.value_mut(id) = value;
    }
    let input = tensor::rand_uniform(&[t, j, 3], -1.0, 1.0, &mut rng);
    let base = model.forward(&input, Mode::Train).expect("forward");
    let mut offsets = vec![0.0; j * 3];
    for o in offsets.iter_mut() {
        *o = tensor::rand_uniform(&[1], -0.8 * s, 0.8 * s, &mut rng).item();
    }
    let mut target = base.clone();
    for ti in 0..t {
        for ji in 0..j {
            for c in 0..3 {
                let jit = tensor::rand_uniform(&[1], -0.25 * s, 0.25 * s, &mut rng).item();
                target.data_mut()[(ti * j + ji) * 3 + c] += offsets[ji * 3 + c] + jit;
            }
        }
    }
    debug_assert!(lambda == 20.0);
    VerificationInstance { model, input, target }
}

/// Central-difference check of every parameter of the verification model
/// against the training loss. The criterion for a healthy build is a max
/// relative error below 1e-5.
pub fn model_grad_check(seed: u64, eps: f64) -> Result<GradCheckReport, NumericsError> {
    let inst = verification_instance(seed);
    let mut store = inst.model.store.clone();
    grad_check(&mut store, eps, |g, s| {
        let mut updates = BnUpdates::new();
        let out = inst
            .model
            .forward_graph_in(s, g, &inst.input, Mode::Train, &mut updates)
            .expect("forward");
        metrics::loss_graph(g, out, &inst.target, inst.model.config.lambda_v).expect("loss")
    })
}

/// Median wall time in milliseconds of the sequential scan at length `l`,
/// with 16 channels and 16 state lanes.
pub fn bench_scan(l: usize, reps: usize, seed: u64) -> f64 {
    let (d, n) = (16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a_bar = tensor::rand_uniform(&[l, d, n], 0.5, 0.999, &mut rng);
    let b_bar = tensor::rand_uniform(&[l, d, n], -0.1, 0.1, &mut rng);
    let x = tensor::rand_uniform(&[l, d], -1.0, 1.0, &mut rng);
    let c = tensor::rand_uniform(&[l, n], -1.0, 1.0, &mut rng);
    let inp = ScanInputs::new(a_bar, b_bar, x, c).expect("shapes");
    let mut times: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let t0 = std::time::Instant::now();
            let y = scan_sequential(&inp);
            std::hint::black_box(&y);
            t0.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

/// Least-squares slope of log(time) against log(length): the fitted
/// exponent of a power-law runtime.
pub fn fit_power_law(points: &[(usize, f64)]) -> f64 {
    assert!(points.len() >= 2, "need at least two points");
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(l, t) in points {
        let x = (l as f64).ln();
        let y = t.max(1e-12).ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}
