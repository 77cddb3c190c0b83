//! Procedural motion sequences for desk-scale training and testing.
//!
//! A rest pose is grown deterministically from the skeleton tree, then each
//! joint coordinate oscillates around it with its own random amplitude,
//! frequency, and phase. Frame-to-frame displacement is therefore bounded
//! by amplitude times frequency, and bone lengths stay within twice the
//! amplitude of their rest length. The 2D view is an orthographic
//! projection with Gaussian noise; confidence decays with the noise radius.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{PoseSequence2D, PoseSequence3D};
use crate::graph::Skeleton;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("skeleton has no left/right pairs; cannot mirror")]
    NoMirrorPairs,
    #[error("frames must be [T, J, 3], got {0:?}")]
    BadShape(Vec<usize>),
    #[error("frames have {got} joints, skeleton has {want}")]
    JointMismatch { got: usize, want: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub skeleton: Skeleton,
    /// Frames per sequence.
    pub frames: usize,
    pub sequences: usize,
    /// Peak per-coordinate excursion from the rest pose, in mm.
    pub amplitude: f64,
    /// Upper bound on angular frequency, radians per frame.
    pub max_frequency: f64,
    /// Standard deviation of 2D observation noise, in projected units.
    pub noise_sigma: f64,
    /// Scale of confidence decay: conf = exp(-|noise| / confidence_sigma).
    pub confidence_sigma: f64,
    /// Orthographic projection scale from mm to 2D units.
    pub projection_scale: f64,
}

impl SynthConfig {
    pub fn new(skeleton: Skeleton, sequences: usize, frames: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            skeleton,
            frames,
            sequences,
            amplitude: 60.0,
            max_frequency: 0.35,
            noise_sigma: 3.0,
            confidence_sigma: 5.0,
            projection_scale: 1.0,
        }
    }
}

/// Bone length of the generated rest pose, in mm.
pub const REST_BONE_MM: f64 = 150.0;

/// Deterministic rest pose: walk the tree from the root, placing each child
/// one bone length from its parent in a direction spread by the golden
/// angle. Depends only on the skeleton, not on the RNG.
pub fn rest_pose(skel: &Skeleton) -> Vec<[f64; 3]> {
    let j = skel.joint_count;
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); j];
    let mut placed = vec![false; j];
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); j];
    for &[a, b] in &skel.edges {
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    let mut pose = vec![[0.0f64; 3]; j];
    let mut queue = std::collections::VecDeque::from([skel.root]);
    placed[skel.root] = true;
    const GOLDEN: f64 = 2.399_963_229_728_653;
    while let Some(p) = queue.pop_front() {
        for &c in &adjacency[p] {
            if placed[c] {
                continue;
            }
            placed[c] = true;
            children[p].push(c);
            let a = GOLDEN * c as f64;
            let dir = [a.cos() * 0.8, a.sin() * 0.8, (a * 0.5).sin() * 0.6 + 0.2];
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
            for axis in 0..3 {
                pose[c][axis] = pose[p][axis] + REST_BONE_MM * dir[axis] / norm;
            }
            queue.push_back(c);
        }
    }
    pose
}

/// Diagonal of the rest pose's axis-aligned bounding box, in mm. The
/// overfit acceptance threshold is stated relative to this.
pub fn bounding_box_diagonal(skel: &Skeleton) -> f64 {
    let pose = rest_pose(skel);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &pose {
        for axis in 0..3 {
            lo[axis] = lo[axis].min(p[axis]);
            hi[axis] = hi[axis].max(p[axis]);
        }
    }
    (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt()
}

/// Generate `sequences` pairs of noisy 2D observations and exact 3D
/// targets. Bit-identical for a given config.
pub fn synth_dataset(cfg: &SynthConfig) -> Vec<(PoseSequence2D, PoseSequence3D)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let j = cfg.skeleton.joint_count;
    let rest = rest_pose(&cfg.skeleton);
    let mut out = Vec::with_capacity(cfg.sequences);
    for s in 0..cfg.sequences {
        // per-coordinate sinusoid parameters
        let mut amp = vec![0.0; j * 3];
        let mut freq = vec![0.0; j * 3];
        let mut phase = vec![0.0; j * 3];
        for i in 0..j * 3 {
            amp[i] = cfg.amplitude * rng.gen_range(0.3..1.0);
            freq[i] = rng.gen_range(0.05..cfg.max_frequency.max(0.05 + 1e-9));
            phase[i] = rng.gen_range(0.0..std::f64::consts::TAU);
        }
        let mut d3 = vec![0.0; cfg.frames * j * 3];
        for t in 0..cfg.frames {
            for ji in 0..j {
                for c in 0..3 {
                    let i = ji * 3 + c;
                    d3[(t * j + ji) * 3 + c] =
                        rest[ji][c] + amp[i] * (freq[i] * t as f64 + phase[i]).sin();
                }
            }
        }
        let mut d2 = vec![0.0; cfg.frames * j * 3];
        for t in 0..cfg.frames {
            for ji in 0..j {
                let base3 = (t * j + ji) * 3;
                let (nx, ny) = if cfg.noise_sigma > 0.0 {
                    (
                        cfg.noise_sigma * normal_sample(&mut rng),
                        cfg.noise_sigma * normal_sample(&mut rng),
                    )
                } else {
                    (0.0, 0.0)
                };
                let px = cfg.projection_scale * d3[base3] + nx;
                let py = cfg.projection_scale * d3[base3 + 1] + ny;
                let conf = if cfg.noise_sigma > 0.0 {
                    let r = (nx * nx + ny * ny).sqrt();
                    (-r / cfg.confidence_sigma).exp().clamp(0.0, 1.0)
                } else {
                    1.0
                };
                d2[base3] = px;
                d2[base3 + 1] = py;
                d2[base3 + 2] = conf;
            }
        }
        let id = format!("synth-{s:03}");
        out.push((
            PoseSequence2D {
                id: id.clone(),
                fps: 50.0,
                frames: Tensor::new(vec![cfg.frames, j, 3], d2).expect("counted"),
            },
            PoseSequence3D {
                id,
                fps: 50.0,
                frames: Tensor::new(vec![cfg.frames, j, 3], d3).expect("counted"),
            },
        ));
    }
    out
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; consumes two uniforms per sample
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Mirror a pose tensor: negate the x channel and swap left/right joints.
/// The same operation serves 2D (x, y, conf) and 3D (x, y, z) frames, and
/// it is an involution.
pub fn flip_pose(frames: &Tensor, skel: &Skeleton) -> Result<Tensor, SynthError> {
    if frames.rank() != 3 || frames.shape()[2] != 3 {
        return Err(SynthError::BadShape(frames.shape().to_vec()));
    }
    if frames.shape()[1] != skel.joint_count {
        return Err(SynthError::JointMismatch {
            got: frames.shape()[1],
            want: skel.joint_count,
        });
    }
    if skel.left_right_pairs.is_empty() {
        return Err(SynthError::NoMirrorPairs);
    }
    let perm = skel.mirror_permutation();
    let (t, j) = (frames.shape()[0], frames.shape()[1]);
    let mut out = vec![0.0; t * j * 3];
    for fr in 0..t {
        for ji in 0..j {
            let src = (fr * j + perm[ji]) * 3;
            let dst = (fr * j + ji) * 3;
            out[dst] = -frames.data()[src];
            out[dst + 1] = frames.data()[src + 1];
            out[dst + 2] = frames.data()[src + 2];
        }
    }
    Ok(Tensor::new(vec![t, j, 3], out).expect("same size"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::model::{ModelConfig, PoseMagicModel};
    use crate::tensor;
    use rand::SeedableRng;

    fn cfg() -> SynthConfig {
        SynthConfig::new(Skeleton::h36m(), 2, 12, 7)
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = synth_dataset(&cfg());
        let b = synth_dataset(&cfg());
        assert_eq!(a, b);
        let mut other = cfg();
        other.seed += 1;
        let c = synth_dataset(&other);
        assert_ne!(a[0].1.frames.data(), c[0].1.frames.data());
    }

    #[test]
    fn zero_noise_gives_exact_projection_and_full_confidence() {
        let mut c = cfg();
        c.noise_sigma = 0.0;
        c.projection_scale = 0.5;
        for (d2, d3) in synth_dataset(&c) {
            for (f2, f3) in d2.frames.data().chunks(3).zip(d3.frames.data().chunks(3)) {
                assert_eq!(f2[0], 0.5 * f3[0]);
                assert_eq!(f2[1], 0.5 * f3[1]);
                assert_eq!(f2[2], 1.0);
            }
        }
    }

    #[test]
    fn noisy_confidence_stays_in_unit_interval() {
        for (d2, _) in synth_dataset(&cfg()) {
            for f in d2.frames.data().chunks(3) {
                assert!(f[2] > 0.0 && f[2] <= 1.0, "confidence {}", f[2]);
            }
        }
    }

    #[test]
    fn velocity_respects_sinusoid_bound() {
        let c = cfg();
        for (_, d3) in synth_dataset(&c) {
            let t = d3.frames.shape()[0];
            let step = d3.frames.shape()[1] * 3;
            for fr in 0..t - 1 {
                for i in 0..step {
                    let dv = (d3.frames.data()[(fr + 1) * step + i]
                        - d3.frames.data()[fr * step + i])
                        .abs();
                    assert!(
                        dv <= c.amplitude * c.max_frequency + 1e-9,
                        "frame {fr} coord {i}: step {dv}"
                    );
                }
            }
        }
    }

    #[test]
    fn bones_stay_near_rest_length() {
        let c = cfg();
        let bound = 2.0 * c.amplitude * (3.0f64).sqrt();
        for (_, d3) in synth_dataset(&c) {
            let j = c.skeleton.joint_count;
            for fr in 0..d3.frames.shape()[0] {
                for &[a, b] in &c.skeleton.edges {
                    let pa = &d3.frames.data()[(fr * j + a) * 3..(fr * j + a) * 3 + 3];
                    let pb = &d3.frames.data()[(fr * j + b) * 3..(fr * j + b) * 3 + 3];
                    let len: f64 = (0..3)
                        .map(|i| (pa[i] - pb[i]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    assert!(
                        (len - REST_BONE_MM).abs() <= bound,
                        "bone [{a},{b}] length {len}"
                    );
                }
            }
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let skel = Skeleton::h36m();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = tensor::rand_uniform(&[5, 17, 3], -100.0, 100.0, &mut rng);
        let once = flip_pose(&x, &skel).unwrap();
        let twice = flip_pose(&once, &skel).unwrap();
        assert_eq!(x.data(), twice.data(), "bit-exact involution");
        assert_ne!(x.data(), once.data());
    }

    #[test]
    fn mirror_symmetric_pose_is_a_fixed_point() {
        let skel = Skeleton::h36m();
        let perm = skel.mirror_permutation();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut x = tensor::rand_uniform(&[2, 17, 3], -50.0, 50.0, &mut rng);
        // impose mirror symmetry: paired joints mirror each other, unpaired
        // joints sit on the x = 0 plane
        for fr in 0..2 {
            for j in 0..17 {
                let m = perm[j];
                if m == j {
                    x.data_mut()[(fr * 17 + j) * 3] = 0.0;
                } else if m > j {
                    let (xj, yj, zj) = {
                        let b = (fr * 17 + j) * 3;
                        (x.data()[b], x.data()[b + 1], x.data()[b + 2])
                    };
                    let bm = (fr * 17 + m) * 3;
                    x.data_mut()[bm] = -xj;
                    x.data_mut()[bm + 1] = yj;
                    x.data_mut()[bm + 2] = zj;
                }
            }
        }
        let flipped = flip_pose(&x, &skel).unwrap();
        for (a, b) in x.data().iter().zip(flipped.data()) {
            assert!((a - b).abs() == 0.0, "{a} vs {b}");
        }
    }

    #[test]
    fn flip_requires_mirror_pairs() {
        let skel = Skeleton {
            joint_count: 2,
            edges: vec![[0, 1]],
            left_right_pairs: vec![],
            root: 0,
            names: vec!["a".into(), "b".into()],
        };
        let x = Tensor::zeros(&[1, 2, 3]);
        assert!(matches!(
            flip_pose(&x, &skel),
            Err(SynthError::NoMirrorPairs)
        ));
    }

    #[test]
    fn flip_averaging_of_mirror_equivariant_model_is_plain_output() {
        // a blockless model whose input projection ignores x and whose head
        // emits zero x is exactly mirror-equivariant, provided the joint
        // embedding is symmetric under the mirror permutation
        let cfg = ModelConfig {
            blocks: 0,
            d_model: 8,
            d_expand: 16,
            ..ModelConfig::default()
        };
        let mut model = PoseMagicModel::new(cfg, 5).unwrap();
        let skel = model.config.skeleton.clone();
        let perm = skel.mirror_permutation();
        // zero the x row of the input projection
        {
            let w = model.store.value_mut(model.input_proj_w);
            for c in 0..8 {
                w.data_mut()[c] = 0.0;
            }
        }
        // zero the x column of the head
        {
            let w = model.store.value_mut(model.head_w);
            for r in 0..16 {
                w.data_mut()[r * 3] = 0.0;
            }
            let b = model.store.value_mut(model.head_b);
            b.data_mut()[0] = 0.0;
        }
        // symmetrize the joint embedding
        {
            let pos = model.store.value_mut(model.pos_embed);
            for j in 0..17 {
                let m = perm[j];
                if m > j {
                    for c in 0..8 {
                        let v = pos.data()[j * 8 + c];
                        pos.data_mut()[m * 8 + c] = v;
                    }
                }
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let x = tensor::rand_uniform(&[4, 17, 3], -1.0, 1.0, &mut rng);
        let plain = model.forward(&x, Mode::Eval).unwrap();
        let flipped_in = flip_pose(&x, &skel).unwrap();
        let flipped_out = model.forward(&flipped_in, Mode::Eval).unwrap();
        let unflipped = flip_pose(&flipped_out, &skel).unwrap();
        let averaged = plain.add(&unflipped).unwrap().scale(0.5);
        for (a, b) in plain.data().iter().zip(averaged.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}
