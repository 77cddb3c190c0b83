//! File formats: JSON-lines pose sequences, JSON model configs, and binary
//! checkpoints with a JSON header.
//!
//! Load paths are the trust boundary: they reject non-finite numbers and
//! shape violations with the offending line or record named, so the rest of
//! the crate can assume well-formed tensors. Checkpoints round-trip model
//! state bit-exactly and are written atomically (temp file plus rename).

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{BnBuffer, Skeleton};
use crate::model::{ModelConfig, ModelError, PoseMagicModel};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path} line {line}: {msg}")]
    Line {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("record '{id}': expected {want} joints, frame {frame} has {got}")]
    WrongJointCount {
        id: String,
        frame: usize,
        got: usize,
        want: usize,
    },
    #[error("record '{id}' has no frames")]
    EmptyRecord { id: String },
    #[error("config json: {0}")]
    Config(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint truncated: need {need} bytes, have {got}")]
    Truncated { need: usize, got: usize },
    #[error("checkpoint does not match its config: {}", .0.join("; "))]
    ManifestMismatch(Vec<String>),
    #[error("checkpoint config differs from expected config: {}", .0.join("; "))]
    ConfigMismatch(Vec<String>),
    #[error(transparent)]
    Model(#[from] ModelError),
}

// ── pose sequences ───────────────────────────────────────────────────

/// 2D detections: frames of (x, y, confidence) per joint, [T, J, 3].
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence2D {
    pub id: String,
    pub fps: f64,
    pub frames: Tensor,
}

/// 3D targets or predictions: frames of (x, y, z) per joint, [T, J, 3].
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence3D {
    pub id: String,
    pub fps: f64,
    pub frames: Tensor,
}

fn default_fps() -> f64 {
    50.0
}

/// One JSON-lines record. Channel 3 is confidence in 2D files, z in 3D.
#[derive(Debug, Serialize, Deserialize)]
struct PoseFileRecord {
    id: String,
    #[serde(default = "default_fps")]
    fps: f64,
    frames: Vec<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseKind {
    TwoD,
    ThreeD,
}

fn record_to_tensor(
    rec: &PoseFileRecord,
    kind: PoseKind,
    joints: usize,
) -> Result<Tensor, DataError> {
    if rec.frames.is_empty() {
        return Err(DataError::EmptyRecord { id: rec.id.clone() });
    }
    let t = rec.frames.len();
    let mut data = Vec::with_capacity(t * joints * 3);
    for (fi, frame) in rec.frames.iter().enumerate() {
        if frame.len() != joints {
            return Err(DataError::WrongJointCount {
                id: rec.id.clone(),
                frame: fi,
                got: frame.len(),
                want: joints,
            });
        }
        for joint in frame {
            for (c, &v) in joint.iter().enumerate() {
                let v = if kind == PoseKind::TwoD && c == 2 {
                    v.clamp(0.0, 1.0)
                } else {
                    v
                };
                data.push(v);
            }
        }
    }
    Ok(Tensor::new(vec![t, joints, 3], data).expect("counted"))
}

fn load_records(
    path: &Path,
    kind: PoseKind,
    skeleton: &Skeleton,
) -> Result<Vec<(String, f64, Tensor)>, DataError> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let path_str = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoseFileRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Line {
                path: path_str.clone(),
                line: lineno,
                msg: e.to_string(),
            })?;
        let frames = record_to_tensor(&rec, kind, skeleton.joint_count)?;
        if !frames.is_finite() {
            return Err(DataError::Line {
                path: path_str.clone(),
                line: lineno,
                msg: format!("record '{}' contains non-finite values", rec.id),
            });
        }
        out.push((rec.id, rec.fps, frames));
    }
    Ok(out)
}

pub fn load_poses_2d(path: &Path, skeleton: &Skeleton) -> Result<Vec<PoseSequence2D>, DataError> {
    Ok(load_records(path, PoseKind::TwoD, skeleton)?
        .into_iter()
        .map(|(id, fps, frames)| PoseSequence2D { id, fps, frames })
        .collect())
}

pub fn load_poses_3d(path: &Path, skeleton: &Skeleton) -> Result<Vec<PoseSequence3D>, DataError> {
    Ok(load_records(path, PoseKind::ThreeD, skeleton)?
        .into_iter()
        .map(|(id, fps, frames)| PoseSequence3D { id, fps, frames })
        .collect())
}

fn tensor_to_frames(t: &Tensor) -> Vec<Vec<[f64; 3]>> {
    let (frames, joints) = (t.shape()[0], t.shape()[1]);
    (0..frames)
        .map(|f| {
            (0..joints)
                .map(|j| {
                    let base = (f * joints + j) * 3;
                    [t.data()[base], t.data()[base + 1], t.data()[base + 2]]
                })
                .collect()
        })
        .collect()
}

fn save_records(
    path: &Path,
    records: impl Iterator<Item = (String, f64, Tensor)>,
) -> Result<(), DataError> {
    let mut file = fs::File::create(path)?;
    for (id, fps, frames) in records {
        let rec = PoseFileRecord {
            id,
            fps,
            frames: tensor_to_frames(&frames),
        };
        serde_json::to_writer(&mut file, &rec)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_poses_2d(path: &Path, seqs: &[PoseSequence2D]) -> Result<(), DataError> {
    save_records(
        path,
        seqs.iter()
            .map(|s| (s.id.clone(), s.fps, s.frames.clone())),
    )
}

pub fn save_poses_3d(path: &Path, seqs: &[PoseSequence3D]) -> Result<(), DataError> {
    save_records(
        path,
        seqs.iter()
            .map(|s| (s.id.clone(), s.fps, s.frames.clone())),
    )
}

// ── model config files ───────────────────────────────────────────────

pub fn load_model_config(path: &Path) -> Result<ModelConfig, DataError> {
    let text = fs::read_to_string(path)?;
    let cfg: ModelConfig = serde_json::from_str(&text)?;
    cfg.validate()
        .map_err(|e| DataError::BadConfig(e.to_string()))?;
    Ok(cfg)
}

pub fn save_model_config(path: &Path, cfg: &ModelConfig) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(cfg)?;
    fs::write(path, text)?;
    Ok(())
}

// ── checkpoints ──────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 8] = b"PMCKPT01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EntryKind {
    Param,
    Buffer,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section that follows the header.
    offset: usize,
    kind: EntryKind,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    entries: Vec<ManifestEntry>,
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize config, parameters, and batch-norm buffers. The write is
/// atomic: a temp file in the target directory is renamed into place.
pub fn save_checkpoint(model: &PoseMagicModel, path: &Path) -> Result<(), DataError> {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    for id in model.store.ids() {
        let value = model.store.value(id);
        entries.push(ManifestEntry {
            name: model.store.name(id).to_string(),
            shape: value.shape().to_vec(),
            offset: data.len(),
            kind: EntryKind::Param,
        });
        push_f64s(&mut data, value.data());
    }
    for (i, buf) in model.buffers.iter().enumerate() {
        entries.push(ManifestEntry {
            name: format!("bn{i}.running_mean"),
            shape: vec![buf.running_mean.len()],
            offset: data.len(),
            kind: EntryKind::Buffer,
        });
        push_f64s(&mut data, &buf.running_mean);
        entries.push(ManifestEntry {
            name: format!("bn{i}.running_var"),
            shape: vec![buf.running_var.len()],
            offset: data.len(),
            kind: EntryKind::Buffer,
        });
        push_f64s(&mut data, &buf.running_var);
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config: model.config.clone(),
        entries,
    })?;

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(CHECKPOINT_MAGIC)?;
    tmp.write_all(&(header.len() as u64).to_le_bytes())?;
    tmp.write_all(&header)?;
    tmp.write_all(&data)?;
    tmp.persist(path).map_err(|e| DataError::Io(e.error))?;
    Ok(())
}

fn read_f64s(data: &[u8], offset: usize, count: usize) -> Result<Vec<f64>, DataError> {
    let need = offset + count * 8;
    if need > data.len() {
        return Err(DataError::Truncated {
            need,
            got: data.len(),
        });
    }
    Ok(data[offset..need]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

/// Field-by-field difference between two configs, for error messages.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let mut diffs = Vec::new();
    macro_rules! cmp {
        ($field:ident) => {
            if a.$field != b.$field {
                diffs.push(format!(
                    "{}: {:?} vs {:?}",
                    stringify!($field),
                    a.$field,
                    b.$field
                ));
            }
        };
    }
    cmp!(blocks);
    cmp!(d_model);
    cmp!(d_expand);
    cmp!(knn_k);
    cmp!(joints);
    cmp!(state_dim);
    cmp!(direction);
    cmp!(t_train);
    cmp!(lambda_v);
    cmp!(fusion_per_channel);
    cmp!(similarity);
    if a.skeleton != b.skeleton {
        diffs.push("skeleton".to_string());
    }
    diffs
}

/// Rebuild a model from a checkpoint. Every parameter and buffer the
/// config implies must be present with its exact shape; `expected` adds a
/// config equality gate with a per-field diff on failure.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<PoseMagicModel, DataError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..8] != CHECKPOINT_MAGIC {
        return Err(DataError::BadMagic);
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > bytes.len() {
        return Err(DataError::Truncated {
            need: 16 + header_len,
            got: bytes.len(),
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(DataError::Config)?;
    if let Some(want) = expected {
        let diffs = config_diff(&header.config, want);
        if !diffs.is_empty() {
            return Err(DataError::ConfigMismatch(diffs));
        }
    }
    let data = &bytes[16 + header_len..];

    // seed is irrelevant: every parameter and buffer is overwritten
    let mut model = PoseMagicModel::new(header.config, 0)?;
    let mut mismatches = Vec::new();
    let mut seen_params = 0usize;
    let mut seen_buffers = 0usize;
    for entry in &header.entries {
        match entry.kind {
            EntryKind::Param => match model.store.by_name(&entry.name) {
                Some(id) => {
                    let want_shape = model.store.value(id).shape().to_vec();
                    if want_shape != entry.shape {
                        mismatches.push(format!(
                            "{}: checkpoint {:?} vs config {:?}",
                            entry.name, entry.shape, want_shape
                        ));
                        continue;
                    }
                    let count: usize = entry.shape.iter().product();
                    let values = read_f64s(data, entry.offset, count)?;
                    *model.store.value_mut(id) =
                        Tensor::new(entry.shape.clone(), values).expect("shape checked");
                    seen_params += 1;
                }
                None => mismatches.push(format!("{}: not a parameter of this config", entry.name)),
            },
            EntryKind::Buffer => {
                let parsed = entry
                    .name
                    .strip_prefix("bn")
                    .and_then(|rest| rest.split_once('.'))
                    .and_then(|(idx, field)| idx.parse::<usize>().ok().map(|i| (i, field)));
                let Some((idx, field)) = parsed else {
                    mismatches.push(format!("{}: unrecognized buffer name", entry.name));
                    continue;
                };
                if idx >= model.buffers.len() {
                    mismatches.push(format!(
                        "{}: config has only {} batch-norm buffers",
                        entry.name,
                        model.buffers.len()
                    ));
                    continue;
                }
                let count: usize = entry.shape.iter().product();
                let values = read_f64s(data, entry.offset, count)?;
                let buf: &mut BnBuffer = &mut model.buffers[idx];
                let slot = match field {
                    "running_mean" => &mut buf.running_mean,
                    "running_var" => &mut buf.running_var,
                    other => {
                        mismatches.push(format!("{}: unknown buffer field '{other}'", entry.name));
                        continue;
                    }
                };
                if slot.len() != count {
                    mismatches.push(format!(
                        "{}: checkpoint {:?} vs config [{}]",
                        entry.name,
                        entry.shape,
                        slot.len()
                    ));
                    continue;
                }
                *slot = values;
                seen_buffers += 1;
            }
        }
    }
    if seen_params != model.store.len() {
        mismatches.push(format!(
            "checkpoint provides {seen_params} of {} parameters",
            model.store.len()
        ));
    }
    if seen_buffers != 2 * model.buffers.len() {
        mismatches.push(format!(
            "checkpoint provides {seen_buffers} of {} buffer arrays",
            2 * model.buffers.len()
        ));
    }
    if !mismatches.is_empty() {
        return Err(DataError::ManifestMismatch(mismatches));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::model::Direction;
    use crate::tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        let skeleton = Skeleton {
            joint_count: 3,
            edges: vec![[0, 1], [1, 2]],
            left_right_pairs: vec![],
            root: 0,
            names: vec!["a".into(), "b".into(), "c".into()],
        };
        ModelConfig {
            blocks: 1,
            d_model: 4,
            d_expand: 8,
            knn_k: 1,
            joints: 3,
            state_dim: 2,
            direction: Direction::Bidirectional,
            t_train: 4,
            lambda_v: 20.0,
            fusion_per_channel: false,
            similarity: crate::graph::SimilarityKind::Dot,
            skeleton,
        }
    }

    #[test]
    fn poses_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.2d.jsonl");
        let skel = tiny_config().skeleton;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seqs: Vec<PoseSequence2D> = (0..3)
            .map(|i| PoseSequence2D {
                id: format!("seq-{i}"),
                fps: 50.0,
                frames: {
                    let mut t = tensor::rand_uniform(&[4, 3, 3], -10.0, 10.0, &mut rng);
                    // keep confidences in range so the clamp is a no-op
                    for f in 0..4 {
                        for j in 0..3 {
                            let idx = (f * 3 + j) * 3 + 2;
                            t.data_mut()[idx] = t.data()[idx].abs() / 10.0;
                        }
                    }
                    t
                },
            })
            .collect();
        save_poses_2d(&path, &seqs).unwrap();
        let back = load_poses_2d(&path, &skel).unwrap();
        assert_eq!(seqs, back);
    }

    #[test]
    fn confidence_is_clamped_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        fs::write(
            &path,
            r#"{"id":"x","frames":[[[1.0,2.0,1.7],[0.5,0.5,-0.3],[0.0,0.0,0.5]]]}"#,
        )
        .unwrap();
        let skel = tiny_config().skeleton;
        let seqs = load_poses_2d(&path, &skel).unwrap();
        assert_eq!(seqs[0].frames.data()[2], 1.0);
        assert_eq!(seqs[0].frames.data()[5], 0.0);
        assert_eq!(seqs[0].fps, 50.0, "fps defaults when absent");
        // 3D load of the same numbers must not clamp channel 3
        let seqs3 = load_poses_3d(&path, &skel).unwrap();
        assert_eq!(seqs3[0].frames.data()[2], 1.7);
        assert_eq!(seqs3[0].frames.data()[5], -0.3);
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_poses_2d(&path, &tiny_config().skeleton)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            "{\"id\":\"ok\",\"frames\":[[[0,0,0],[0,0,0],[0,0,0]]]}\nnot json\n",
        )
        .unwrap();
        let err = load_poses_2d(&path, &tiny_config().skeleton).unwrap_err();
        match err {
            DataError::Line { line, .. } => assert_eq!(line, 2),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn wrong_joint_count_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.jsonl");
        fs::write(
            &path,
            r#"{"id":"victim","frames":[[[0,0,0],[0,0,0]]]}"#,
        )
        .unwrap();
        let err = load_poses_2d(&path, &tiny_config().skeleton).unwrap_err();
        match err {
            DataError::WrongJointCount { id, got, want, .. } => {
                assert_eq!(id, "victim");
                assert_eq!((got, want), (2, 3));
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn non_finite_values_are_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inf.jsonl");
        // 1e999 overflows f64 parsing or lands as infinity; either way the
        // loader must refuse it and say where
        fs::write(
            &path,
            "{\"id\":\"a\",\"frames\":[[[0,0,0],[0,0,0],[0,0,0]]]}\n{\"id\":\"b\",\"frames\":[[[1e999,0,0],[0,0,0],[0,0,0]]]}\n",
        )
        .unwrap();
        let err = load_poses_3d(&path, &tiny_config().skeleton).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "message was: {msg}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = PoseMagicModel::new(tiny_config(), 42).unwrap();
        // make the buffers non-default so the round trip covers them
        model.buffers[0].running_mean[1] = 0.25;
        model.buffers[0].running_var[2] = 3.5;
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path, None).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tensor::rand_uniform(&[5, 3, 3], -1.0, 1.0, &mut rng);
        let y0 = model.forward(&x, Mode::Eval).unwrap();
        let y1 = loaded.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y0.data(), y1.data());
        assert_eq!(model.buffers, loaded.buffers);

        let size = fs::metadata(&path).unwrap().len();
        assert!(size < 1_000_000, "tiny checkpoint is {size} bytes");
    }

    #[test]
    fn expected_config_mismatch_lists_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = PoseMagicModel::new(tiny_config(), 3).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let mut other = tiny_config();
        other.d_model = 6;
        other.blocks = 2;
        let err = load_checkpoint(&path, Some(&other)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("d_model"), "{msg}");
        assert!(msg.contains("blocks"), "{msg}");
    }

    #[test]
    fn tampered_header_dimension_fails_with_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = PoseMagicModel::new(tiny_config(), 4).unwrap();
        save_checkpoint(&model, &path).unwrap();

        let bytes = fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_text = String::from_utf8(bytes[16..16 + header_len].to_vec()).unwrap();
        // bump the model width in the stored config; manifest shapes now
        // disagree with what the config constructs
        let tampered_text = header_text.replace("\"d_model\":4", "\"d_model\":6");
        assert_ne!(header_text, tampered_text);
        let mut tampered = Vec::new();
        tampered.extend_from_slice(&bytes[0..8]);
        tampered.extend_from_slice(&(tampered_text.len() as u64).to_le_bytes());
        tampered.extend_from_slice(tampered_text.as_bytes());
        tampered.extend_from_slice(&bytes[16 + header_len..]);
        fs::write(&path, &tampered).unwrap();

        let err = load_checkpoint(&path, None).unwrap_err();
        match err {
            DataError::ManifestMismatch(diffs) => {
                assert!(
                    diffs.iter().any(|d| d.contains("input_proj.w")),
                    "{diffs:?}"
                );
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn truncated_data_section_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = PoseMagicModel::new(tiny_config(), 5).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        let err = load_checkpoint(&path, None).unwrap_err();
        assert!(matches!(err, DataError::Truncated { .. }), "{err}");
    }

    #[test]
    fn config_file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let cfg = tiny_config();
        save_model_config(&path, &cfg).unwrap();
        let back = load_model_config(&path).unwrap();
        assert_eq!(cfg, back);

        fs::write(&path, r#"{"d_model": 0}"#).unwrap();
        assert!(matches!(
            load_model_config(&path),
            Err(DataError::BadConfig(_))
        ));
    }
}
