//! Optimizer, training loop, and evaluation summaries.
//!
//! Batches are processed one graph per sequence; shard gradients are summed
//! in index order and averaged, so results do not depend on the rayon
//! thread count. The optimizer applies decoupled weight decay that is not
//! scaled by the learning rate: a zero learning rate leaves parameters
//! untouched except for the decay factor.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, ParamStore};
use crate::dataio::{PoseSequence2D, PoseSequence3D};
use crate::graph::{BnUpdates, Mode};
use crate::metrics::{self, MetricsError, AUC_THRESHOLDS};
use crate::model::{ModelError, PoseMagicModel};
use crate::synth::{flip_pose, SynthError};
use crate::tensor::{NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch} step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Adaptive-moment optimizer with decoupled weight decay.
///
/// Update per element: theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
/// - weight_decay * theta. The decay term is independent of the learning
/// rate, so lr = 0 shrinks parameters by exactly (1 - weight_decay) per
/// step and changes nothing else.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    pub weight_decay: f64,
    step: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect(),
            v: store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let theta = store.value_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let grad = grads.get_ref(id);
            for k in 0..theta.numel() {
                let g = grad.map_or(0.0, |g| g.data()[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                let t = theta.data()[k];
                theta.data_mut()[k] = t - lr * update - self.weight_decay * t;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate; multiplied by `lr_decay` each epoch.
    pub lr: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    /// Seeds the per-epoch shuffle of sequence order.
    pub seed: u64,
    /// Stop after this many optimizer steps, mid-epoch if necessary.
    pub max_steps: Option<usize>,
    /// Stop at the end of any evaluated epoch whose MPJPE is at or below this.
    pub target_mpjpe: Option<f64>,
    /// Evaluate dataset metrics every this many epochs. The final epoch is
    /// always evaluated; unevaluated epochs emit no log row.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 90,
            batch_size: 8,
            lr: 8e-4,
            lr_decay: 0.99,
            weight_decay: 0.01,
            seed: 0,
            max_steps: None,
            target_mpjpe: None,
            eval_every: 1,
        }
    }
}

/// Learning rate for a given epoch under the geometric schedule.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.lr_decay.powi(epoch as i32)
}

/// One row of the metric log. Velocity and acceleration errors are absent
/// when every sequence is too short to define them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub mpjpe: f64,
    pub mpjve: Option<f64>,
    pub acc_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Mean batch loss at every optimizer step, across epoch boundaries.
    pub step_losses: Vec<f64>,
}

/// Dataset-level metrics, each weighted by the number of terms it averages
/// so the result equals the metric over the concatenated dataset.
#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub mpjpe: f64,
    pub mpjve: Option<f64>,
    pub acc_err: Option<f64>,
    pub pck: f64,
    pub auc: f64,
}

/// Average the model output with the un-mirrored output on the mirrored
/// input. For a mirror-equivariant model this is the plain output.
pub fn forward_flip_averaged(
    model: &PoseMagicModel,
    x: &Tensor,
) -> Result<Tensor, TrainError> {
    let skel = &model.config.skeleton;
    let plain = model.forward(x, Mode::Eval)?;
    let mirrored_in = flip_pose(x, skel)?;
    let mirrored_out = model.forward(&mirrored_in, Mode::Eval)?;
    let restored = flip_pose(&mirrored_out, skel)?;
    Ok(plain.add(&restored)?.scale(0.5))
}

/// Evaluate the model over a dataset. PCK is reported at 150 mm; AUC sweeps
/// thresholds 0..150 mm in steps of 5.
pub fn evaluate(
    model: &PoseMagicModel,
    data: &[(PoseSequence2D, PoseSequence3D)],
    flip: bool,
) -> Result<EvalSummary, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut pos = (0.0, 0usize);
    let mut vel = (0.0, 0usize);
    let mut acc = (0.0, 0usize);
    let mut thr_sums = [0.0f64; AUC_THRESHOLDS];
    let mut thr_n = 0usize;
    for (d2, d3) in data {
        let pred = if flip {
            forward_flip_averaged(model, &d2.frames)?
        } else {
            model.forward(&d2.frames, Mode::Eval)?
        };
        let gt = &d3.frames;
        let (t, j) = (gt.shape()[0], gt.shape()[1]);
        pos.0 += metrics::mpjpe(&pred, gt)? * (t * j) as f64;
        pos.1 += t * j;
        if t >= 2 {
            vel.0 += metrics::mpjve(&pred, gt)? * ((t - 1) * j) as f64;
            vel.1 += (t - 1) * j;
        }
        if t >= 3 {
            acc.0 += metrics::acc_err(&pred, gt)? * ((t - 2) * j) as f64;
            acc.1 += (t - 2) * j;
        }
        for (i, sum) in thr_sums.iter_mut().enumerate() {
            *sum += metrics::pck(&pred, gt, 5.0 * i as f64)? * (t * j) as f64;
        }
        thr_n += t * j;
    }
    let ratio = |(s, n): (f64, usize)| if n == 0 { None } else { Some(s / n as f64) };
    Ok(EvalSummary {
        mpjpe: ratio(pos).expect("nonempty dataset"),
        mpjve: ratio(vel),
        acc_err: ratio(acc),
        pck: thr_sums[AUC_THRESHOLDS - 1] / thr_n as f64,
        auc: thr_sums.iter().sum::<f64>() / AUC_THRESHOLDS as f64 / thr_n as f64,
    })
}

fn sample_grad(
    model: &PoseMagicModel,
    x: &Tensor,
    gt: &Tensor,
) -> Result<(f64, Gradients, BnUpdates), TrainError> {
    let mut graph = crate::autodiff::Graph::new();
    let mut updates = BnUpdates::new();
    let out = model.forward_graph(&mut graph, x, Mode::Train, &mut updates)?;
    let loss = metrics::loss_graph(&mut graph, out, gt, model.config.lambda_v)?;
    let loss_value = graph.value(loss).item();
    let grads = graph.backward(loss, &model.store)?;
    Ok((loss_value, grads, updates))
}

/// Train in place and return the per-epoch log plus per-step losses.
/// Deterministic for a fixed config and dataset: shard gradients are
/// reduced in batch order regardless of how rayon schedules them.
pub fn train(
    model: &mut PoseMagicModel,
    data: &[(PoseSequence2D, PoseSequence3D)],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut report = TrainReport { epochs: Vec::new(), step_losses: Vec::new() };
    let mut steps = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        let mut stop = false;
        for batch in order.chunks(cfg.batch_size) {
            let shards: Vec<Result<(f64, Gradients, BnUpdates), TrainError>> = batch
                .par_iter()
                .map(|&i| sample_grad(model, &data[i].0.frames, &data[i].1.frames))
                .collect();
            let mut total = Gradients::zeros(model.store.len());
            let mut batch_loss = 0.0;
            let mut bn_acc: Vec<Option<(Vec<f64>, Vec<f64>, usize)>> =
                vec![None; model.buffers.len()];
            for shard in shards {
                let (loss_value, grads, updates) = shard?;
                if !loss_value.is_finite() {
                    return Err(TrainError::Diverged { epoch, step: steps, loss: loss_value });
                }
                batch_loss += loss_value;
                total.accumulate(&grads)?;
                for (idx, mean, var) in updates.0 {
                    match &mut bn_acc[idx] {
                        Some((ms, vs, n)) => {
                            for (a, b) in ms.iter_mut().zip(&mean) {
                                *a += b;
                            }
                            for (a, b) in vs.iter_mut().zip(&var) {
                                *a += b;
                            }
                            *n += 1;
                        }
                        slot => *slot = Some((mean, var, 1)),
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            total.scale(inv);
            batch_loss *= inv;
            let mut merged = BnUpdates::new();
            for (idx, slot) in bn_acc.into_iter().enumerate() {
                if let Some((ms, vs, n)) = slot {
                    let inv_n = 1.0 / n as f64;
                    merged.0.push((
                        idx,
                        ms.iter().map(|x| x * inv_n).collect(),
                        vs.iter().map(|x| x * inv_n).collect(),
                    ));
                }
            }
            model.apply_bn_updates(&merged);
            opt.step(&mut model.store, &total, lr);
            report.step_losses.push(batch_loss);
            epoch_loss += batch_loss;
            epoch_batches += 1;
            steps += 1;
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                stop = true;
                break;
            }
        }
        let due = (epoch + 1) % cfg.eval_every.max(1) == 0;
        if due || stop || epoch + 1 == cfg.epochs {
            let summary = evaluate(model, data, false)?;
            report.epochs.push(EpochLog {
                epoch,
                lr,
                train_loss: epoch_loss / epoch_batches as f64,
                mpjpe: summary.mpjpe,
                mpjve: summary.mpjve,
                acc_err: summary.acc_err,
            });
            if cfg.target_mpjpe.is_some_and(|t| summary.mpjpe <= t) {
                break 'epochs;
            }
        }
        if stop {
            break 'epochs;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Skeleton;
    use crate::model::ModelConfig;
    use crate::synth::{synth_dataset, SynthConfig};

    fn tiny_skeleton() -> Skeleton {
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

    fn tiny_model(seed: u64) -> PoseMagicModel {
        let cfg = ModelConfig {
            blocks: 1,
            d_model: 8,
            d_expand: 16,
            state_dim: 4,
            joints: 5,
            knn_k: 2,
            t_train: 8,
            skeleton: tiny_skeleton(),
            ..ModelConfig::default()
        };
        PoseMagicModel::new(cfg, seed).unwrap()
    }

    fn tiny_data(sequences: usize, frames: usize, seed: u64) -> Vec<(PoseSequence2D, PoseSequence3D)> {
        let mut c = SynthConfig::new(tiny_skeleton(), sequences, frames, seed);
        c.noise_sigma = 1.0;
        synth_dataset(&c)
    }

    #[test]
    fn zero_lr_zero_wd_leaves_params_bit_identical() {
        let mut model = tiny_model(1);
        let before: Vec<Vec<f64>> = model
            .store
            .ids()
            .map(|id| model.store.value(id).data().to_vec())
            .collect();
        let data = tiny_data(2, 6, 2);
        let cfg = TrainConfig {
            epochs: 2,
            lr: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        train(&mut model, &data, &cfg).unwrap();
        for (id, want) in model.store.ids().zip(&before) {
            assert_eq!(model.store.value(id).data(), &want[..]);
        }
    }

    #[test]
    fn zero_lr_applies_exactly_the_decay_factor() {
        let mut model = tiny_model(1);
        let before: Vec<Vec<f64>> = model
            .store
            .ids()
            .map(|id| model.store.value(id).data().to_vec())
            .collect();
        let data = tiny_data(1, 6, 2);
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            weight_decay: 0.01,
            max_steps: Some(1),
            ..TrainConfig::default()
        };
        train(&mut model, &data, &cfg).unwrap();
        for (id, prev) in model.store.ids().zip(&before) {
            for (got, p) in model.store.value(id).data().iter().zip(prev) {
                assert_eq!(*got, p - 0.01 * p);
            }
        }
    }

    #[test]
    fn lr_schedule_is_geometric() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0), 8e-4);
        assert!((lr_at(&cfg, 1) - 8e-4 * 0.99).abs() < 1e-18);
        assert!((lr_at(&cfg, 10) - 8e-4 * 0.99f64.powi(10)).abs() < 1e-18);
        let mut model = tiny_model(1);
        let data = tiny_data(1, 4, 2);
        let report = train(
            &mut model,
            &data,
            &TrainConfig { epochs: 3, max_steps: None, ..TrainConfig::default() },
        )
        .unwrap();
        let lrs: Vec<f64> = report.epochs.iter().map(|e| e.lr).collect();
        assert_eq!(lrs, vec![lr_at(&cfg, 0), lr_at(&cfg, 1), lr_at(&cfg, 2)]);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let run = || {
            let mut model = tiny_model(3);
            let data = tiny_data(3, 6, 4);
            let cfg = TrainConfig { epochs: 2, batch_size: 2, ..TrainConfig::default() };
            let report = train(&mut model, &data, &cfg).unwrap();
            let params: Vec<Vec<f64>> = model
                .store
                .ids()
                .map(|id| model.store.value(id).data().to_vec())
                .collect();
            (report, params)
        };
        let (ra, pa) = run();
        let (rb, pb) = run();
        assert_eq!(ra, rb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn single_batch_overfit_loss_trends_down() {
        let mut model = tiny_model(5);
        let data = tiny_data(1, 8, 6);
        let cfg = TrainConfig {
            epochs: 200,
            weight_decay: 0.0,
            lr: 2e-3,
            lr_decay: 1.0,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(report.step_losses.len(), 200);
        // the EMA of step losses must trend down: few upward moves, and a
        // clear overall drop
        let mut ema = report.step_losses[0];
        let mut trace = vec![ema];
        for &l in &report.step_losses[1..] {
            ema = 0.9 * ema + 0.1 * l;
            trace.push(ema);
        }
        let ups = trace.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(ups < 40, "EMA rose on {ups} of 199 steps");
        assert!(
            trace[199] < 0.95 * trace[19],
            "EMA did not fall: early {}, late {}",
            trace[19],
            trace[199]
        );
    }

    #[test]
    fn nan_parameters_abort_with_divergence_error() {
        let mut model = tiny_model(7);
        let id = model.store.by_name("head.w").unwrap();
        model.store.value_mut(id).data_mut()[0] = f64::NAN;
        let data = tiny_data(1, 4, 8);
        let err = train(&mut model, &data, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { epoch: 0, step: 0, .. }), "{err}");
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut model = tiny_model(1);
        assert!(matches!(
            train(&mut model, &[], &TrainConfig::default()),
            Err(TrainError::EmptyDataset)
        ));
        assert!(matches!(
            evaluate(&model, &[], false),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn evaluate_matches_per_sequence_metrics_on_uniform_lengths() {
        let model = tiny_model(9);
        let data = tiny_data(3, 6, 10);
        let summary = evaluate(&model, &data, false).unwrap();
        let mut mpjpe = 0.0;
        let mut pck = 0.0;
        for (d2, d3) in &data {
            let pred = model.forward(&d2.frames, Mode::Eval).unwrap();
            mpjpe += metrics::mpjpe(&pred, &d3.frames).unwrap();
            pck += metrics::pck(&pred, &d3.frames, 150.0).unwrap();
        }
        assert!((summary.mpjpe - mpjpe / 3.0).abs() < 1e-12);
        assert!((summary.pck - pck / 3.0).abs() < 1e-12);
        assert!(summary.mpjve.is_some() && summary.acc_err.is_some());
        assert!(summary.auc >= 0.0 && summary.auc <= 100.0);
    }

    #[test]
    fn flip_averaging_equals_plain_on_exact_predictor() {
        // single-frame sequences: velocity metrics must be absent
        let model = tiny_model(11);
        let data = tiny_data(2, 1, 12);
        let summary = evaluate(&model, &data, false).unwrap();
        assert!(summary.mpjve.is_none() && summary.acc_err.is_none());
        // flip path runs end to end and stays finite
        let tta = evaluate(&model, &data, true).unwrap();
        assert!(tta.mpjpe.is_finite());
    }

    #[test]
    fn target_mpjpe_stops_early() {
        let mut model = tiny_model(13);
        let data = tiny_data(1, 4, 14);
        let cfg = TrainConfig {
            epochs: 50,
            target_mpjpe: Some(f64::INFINITY),
            ..TrainConfig::default()
        };
        let report = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(report.epochs.len(), 1);
    }
}
