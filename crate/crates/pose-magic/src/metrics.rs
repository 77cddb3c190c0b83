//! Training loss and evaluation metrics for 3D pose sequences.
//!
//! All functions take [T, J, 3] tensors. Position error is the Euclidean
//! distance per joint; the velocity and acceleration metrics apply the same
//! distance to first and second finite differences with the frame interval
//! as the unit time step. A time-constant error field therefore scores zero
//! on the temporal metrics while still paying full position error.

use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{op}: shapes {lhs:?} and {rhs:?} differ")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: input must be [T, J, 3], got {0:?}", .shape)]
    BadShape { op: &'static str, shape: Vec<usize> },
    #[error("{op} needs at least {need} frames, got {got}")]
    TooShort {
        op: &'static str,
        need: usize,
        got: usize,
    },
}

fn check_pair(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<(), MetricsError> {
    if pred.rank() != 3 || pred.shape()[2] != 3 {
        return Err(MetricsError::BadShape {
            op,
            shape: pred.shape().to_vec(),
        });
    }
    if pred.shape() != gt.shape() {
        return Err(MetricsError::ShapeMismatch {
            op,
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    Ok(())
}

/// Per-joint Euclidean distances, flattened over (t, j).
fn joint_distances(pred: &Tensor, gt: &Tensor) -> Vec<f64> {
    pred.data()
        .chunks(3)
        .zip(gt.data().chunks(3))
        .map(|(p, g)| {
            let dx = p[0] - g[0];
            let dy = p[1] - g[1];
            let dz = p[2] - g[2];
            (dx * dx + dy * dy + dz * dz).sqrt()
        })
        .collect()
}

/// First differences along the frame axis: out[t] = x[t+1] - x[t].
fn frame_diff(x: &Tensor) -> Tensor {
    let (t, j) = (x.shape()[0], x.shape()[1]);
    let step = j * 3;
    let mut out = vec![0.0; (t - 1) * step];
    for fr in 0..t - 1 {
        for i in 0..step {
            out[fr * step + i] = x.data()[(fr + 1) * step + i] - x.data()[fr * step + i];
        }
    }
    Tensor::new(vec![t - 1, j, 3], out).expect("frame_diff")
}

/// Position term plus weighted velocity term, both as sums of per-joint
/// Euclidean norms over every (t, j). A single frame has no velocity term.
pub fn loss(pred: &Tensor, gt: &Tensor, lambda_v: f64) -> Result<f64, MetricsError> {
    check_pair("loss", pred, gt)?;
    let l3d: f64 = joint_distances(pred, gt).iter().sum();
    let t = pred.shape()[0];
    let lv: f64 = if t >= 2 {
        joint_distances(&frame_diff(pred), &frame_diff(gt)).iter().sum()
    } else {
        0.0
    };
    Ok(l3d + lambda_v * lv)
}

/// Differentiable form of `loss` for a prediction living in a graph.
pub fn loss_graph(
    graph: &mut Graph,
    pred: Var,
    gt: &Tensor,
    lambda_v: f64,
) -> Result<Var, MetricsError> {
    let pred_val = graph.value(pred).clone();
    check_pair("loss", &pred_val, gt)?;
    let t = gt.shape()[0];
    let gtv = graph.constant(gt.clone());
    let diff = graph.sub(pred, gtv).expect("shapes checked");
    let dist = graph.l2_norm_last(diff);
    let l3d = graph.sum_all(dist);
    if t < 2 {
        return Ok(l3d);
    }
    let head = graph.narrow(pred, 0, 1, t - 1).expect("narrow");
    let tail = graph.narrow(pred, 0, 0, t - 1).expect("narrow");
    let vel_pred = graph.sub(head, tail).expect("shapes equal");
    let gt_vel = graph.constant(frame_diff(gt));
    let vel_diff = graph.sub(vel_pred, gt_vel).expect("shapes equal");
    let vel_dist = graph.l2_norm_last(vel_diff);
    let lv = graph.sum_all(vel_dist);
    let weighted = graph.scale(lv, lambda_v);
    Ok(graph.add(l3d, weighted).expect("scalars"))
}

/// Mean per-joint position error.
pub fn mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64, MetricsError> {
    check_pair("mpjpe", pred, gt)?;
    let d = joint_distances(pred, gt);
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Mean per-joint velocity error: position error of the first differences.
pub fn mpjve(pred: &Tensor, gt: &Tensor) -> Result<f64, MetricsError> {
    check_pair("mpjve", pred, gt)?;
    if pred.shape()[0] < 2 {
        return Err(MetricsError::TooShort {
            op: "mpjve",
            need: 2,
            got: pred.shape()[0],
        });
    }
    mpjpe(&frame_diff(pred), &frame_diff(gt))
}

/// Mean per-joint acceleration error: position error of second differences.
pub fn acc_err(pred: &Tensor, gt: &Tensor) -> Result<f64, MetricsError> {
    check_pair("acc_err", pred, gt)?;
    if pred.shape()[0] < 3 {
        return Err(MetricsError::TooShort {
            op: "acc_err",
            need: 3,
            got: pred.shape()[0],
        });
    }
    mpjpe(&frame_diff(&frame_diff(pred)), &frame_diff(&frame_diff(gt)))
}

/// Percentage of joints within `threshold_mm` of the ground truth.
/// The boundary counts as correct, so a zero threshold still accepts
/// exact predictions.
pub fn pck(pred: &Tensor, gt: &Tensor, threshold_mm: f64) -> Result<f64, MetricsError> {
    check_pair("pck", pred, gt)?;
    let d = joint_distances(pred, gt);
    let hits = d.iter().filter(|&&e| e <= threshold_mm).count();
    Ok(100.0 * hits as f64 / d.len() as f64)
}

/// Thresholds swept by `auc`: 0 to 150 mm in 5 mm steps.
pub const AUC_THRESHOLDS: usize = 31;

/// Mean of `pck` over the 31-point threshold sweep, in percent.
pub fn auc(pred: &Tensor, gt: &Tensor) -> Result<f64, MetricsError> {
    check_pair("auc", pred, gt)?;
    let mut total = 0.0;
    for i in 0..AUC_THRESHOLDS {
        total += pck(pred, gt, 5.0 * i as f64)?;
    }
    Ok(total / AUC_THRESHOLDS as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_pair(t: usize, j: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            tensor::rand_uniform(&[t, j, 3], -100.0, 100.0, &mut rng),
            tensor::rand_uniform(&[t, j, 3], -100.0, 100.0, &mut rng),
        )
    }

    #[test]
    fn exact_prediction_scores_perfectly() {
        let (p, _) = random_pair(4, 3, 0);
        assert_eq!(loss(&p, &p, 20.0).unwrap(), 0.0);
        assert_eq!(mpjpe(&p, &p).unwrap(), 0.0);
        assert_eq!(mpjve(&p, &p).unwrap(), 0.0);
        assert_eq!(acc_err(&p, &p).unwrap(), 0.0);
        assert_eq!(pck(&p, &p, 150.0).unwrap(), 100.0);
        assert_eq!(auc(&p, &p).unwrap(), 100.0);
    }

    #[test]
    fn pythagorean_offset_gives_five() {
        let gt = Tensor::zeros(&[1, 1, 3]);
        let pred = Tensor::new(vec![1, 1, 3], vec![3.0, 0.0, 4.0]).unwrap();
        assert!((mpjpe(&pred, &gt).unwrap() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn constant_offset_has_zero_velocity_cost() {
        let (_, gt) = random_pair(5, 2, 1);
        let c = [7.0, -2.0, 1.0];
        let mut pred = gt.clone();
        for chunk in pred.data_mut().chunks_mut(3) {
            for (v, o) in chunk.iter_mut().zip(c) {
                *v += o;
            }
        }
        let norm_c = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        let l = loss(&pred, &gt, 20.0).unwrap();
        assert!((l - 5.0 * 2.0 * norm_c).abs() < 1e-9, "L = T*J*|c|");
        assert!(mpjve(&pred, &gt).unwrap().abs() < 1e-12);
        assert!(acc_err(&pred, &gt).unwrap().abs() < 1e-12);
    }

    #[test]
    fn linear_drift_has_constant_velocity_error() {
        let (_, gt) = random_pair(6, 2, 2);
        let v = [0.5, -1.0, 2.0];
        let mut pred = gt.clone();
        for t in 0..6 {
            for j in 0..2 {
                for c in 0..3 {
                    pred.data_mut()[(t * 2 + j) * 3 + c] += v[c] * t as f64;
                }
            }
        }
        let norm_v = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        assert!((mpjve(&pred, &gt).unwrap() - norm_v).abs() < 1e-9);
        assert!(acc_err(&pred, &gt).unwrap().abs() < 1e-9);
    }

    #[test]
    fn matches_brute_force_oracles() {
        let (p, g) = random_pair(5, 3, 3);
        // independent double-loop implementations
        let mut l3d = 0.0;
        let mut sum_d = 0.0;
        for t in 0..5 {
            for j in 0..3 {
                let mut sq = 0.0;
                for c in 0..3 {
                    let idx = (t * 3 + j) * 3 + c;
                    sq += (p.data()[idx] - g.data()[idx]).powi(2);
                }
                l3d += sq.sqrt();
                sum_d += sq.sqrt();
            }
        }
        let mut lv = 0.0;
        for t in 0..4 {
            for j in 0..3 {
                let mut sq = 0.0;
                for c in 0..3 {
                    let i1 = ((t + 1) * 3 + j) * 3 + c;
                    let i0 = (t * 3 + j) * 3 + c;
                    let dv = (p.data()[i1] - p.data()[i0]) - (g.data()[i1] - g.data()[i0]);
                    sq += dv * dv;
                }
                lv += sq.sqrt();
            }
        }
        assert!((loss(&p, &g, 20.0).unwrap() - (l3d + 20.0 * lv)).abs() < 1e-12);
        assert!((mpjpe(&p, &g).unwrap() - sum_d / 15.0).abs() < 1e-12);

        let mut hits = 0;
        let thr = 120.0;
        for t in 0..5 {
            for j in 0..3 {
                let mut sq = 0.0;
                for c in 0..3 {
                    let idx = (t * 3 + j) * 3 + c;
                    sq += (p.data()[idx] - g.data()[idx]).powi(2);
                }
                if sq.sqrt() <= thr {
                    hits += 1;
                }
            }
        }
        assert!((pck(&p, &g, thr).unwrap() - 100.0 * hits as f64 / 15.0).abs() < 1e-12);

        let mut auc_sum = 0.0;
        for i in 0..31 {
            auc_sum += pck(&p, &g, 5.0 * i as f64).unwrap();
        }
        assert!((auc(&p, &g).unwrap() - auc_sum / 31.0).abs() < 1e-12);
    }

    #[test]
    fn single_frame_drops_velocity_term() {
        let (p, g) = random_pair(1, 4, 4);
        let l = loss(&p, &g, 20.0).unwrap();
        let d: f64 = joint_distances(&p, &g).iter().sum();
        assert_eq!(l, d);
        assert!(matches!(
            mpjve(&p, &g),
            Err(MetricsError::TooShort { op: "mpjve", need: 2, got: 1 })
        ));
        let (p2, g2) = random_pair(2, 4, 5);
        assert!(matches!(
            acc_err(&p2, &g2),
            Err(MetricsError::TooShort { op: "acc_err", need: 3, got: 2 })
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (p, _) = random_pair(3, 2, 6);
        let (_, g) = random_pair(3, 3, 7);
        assert!(matches!(
            loss(&p, &g, 1.0),
            Err(MetricsError::ShapeMismatch { op: "loss", .. })
        ));
        assert!(mpjpe(&p, &g).is_err());
        assert!(pck(&p, &g, 150.0).is_err());
    }

    #[test]
    fn huge_errors_zero_out_pck_and_auc() {
        let gt = Tensor::zeros(&[2, 2, 3]);
        let pred = Tensor::full(&[2, 2, 3], 200.0 / (3.0f64).sqrt());
        assert_eq!(pck(&pred, &gt, 150.0).unwrap(), 0.0);
        assert_eq!(auc(&pred, &gt).unwrap(), 0.0);
    }

    #[test]
    fn loss_is_translation_invariant() {
        let (p, g) = random_pair(4, 3, 8);
        let shift = [13.0, -4.0, 9.0];
        let mut ps = p.clone();
        let mut gs = g.clone();
        for t in [&mut ps, &mut gs] {
            for chunk in t.data_mut().chunks_mut(3) {
                for (v, s) in chunk.iter_mut().zip(shift) {
                    *v += s;
                }
            }
        }
        let a = loss(&p, &g, 20.0).unwrap();
        let b = loss(&ps, &gs, 20.0).unwrap();
        assert!((a - b).abs() < 1e-9 * a.max(1.0));
    }

    #[test]
    fn graph_loss_matches_plain_loss_and_differentiates() {
        let (p, g) = random_pair(4, 2, 9);
        let mut store = ParamStore::new();
        let pid = store.add("pred".to_string(), p.clone());

        let mut graph = Graph::new();
        let pv = graph.param(&store, pid);
        let lv = loss_graph(&mut graph, pv, &g, 20.0).unwrap();
        let plain = loss(&p, &g, 20.0).unwrap();
        assert!((graph.value(lv).item() - plain).abs() < 1e-12);

        // gradients agree with central differences
        let report = crate::autodiff::grad_check(&mut store, 1e-5, |gr, s| {
            let pv = gr.param(s, pid);
            let l = loss_graph(gr, pv, &g, 20.0).unwrap();
            gr.scale(l, 1e-3)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");

        // single frame: velocity term absent
        let (p1, g1) = random_pair(1, 2, 10);
        let mut graph = Graph::new();
        let c = graph.constant(p1.clone());
        let l1 = loss_graph(&mut graph, c, &g1, 20.0).unwrap();
        assert!((graph.value(l1).item() - loss(&p1, &g1, 20.0).unwrap()).abs() < 1e-12);
    }
}
