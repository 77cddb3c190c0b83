//! Command-line front end: dataset synthesis, training, evaluation, batch
//! inference, causal streaming, and the numeric self-checks.
//!
//! All numeric output is JSON (one object per line where a command emits
//! several); `--pretty` switches the summary commands to aligned tables.
//! Exit codes: 0 ok, 1 runtime failure, 2 usage error.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use pose_magic::dataio::{
    load_checkpoint, load_model_config, load_poses_2d, save_checkpoint, save_poses_2d,
    save_poses_3d, DataError, PoseSequence2D, PoseSequence3D,
};
use pose_magic::graph::{Mode, Skeleton};
use pose_magic::model::{Direction, ModelConfig, ModelError, PoseMagicModel};
use pose_magic::synth::{synth_dataset, SynthConfig, SynthError};
use pose_magic::tensor::{NumericsError, Tensor};
use pose_magic::training::{
    evaluate, forward_flip_averaged, train, TrainConfig, TrainError,
};
use pose_magic::verify::{
    bench_scan, fit_power_law, model_grad_check, GRAD_CHECK_EPS, GRAD_CHECK_SEED,
    REFERENCE_PARAMS,
};

#[derive(Parser)]
#[command(name = "pose-magic", version, about = "2D-to-3D human pose lifting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: <OUT>.2d.jsonl and <OUT>.3d.jsonl.
    Synth {
        /// Output path stem.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        sequences: usize,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        /// Model config supplying the skeleton; default is the built-in
        /// 17-joint skeleton.
        #[arg(long)]
        config: Option<PathBuf>,
        /// 2D observation noise in mm.
        #[arg(long, default_value_t = 3.0)]
        noise: f64,
    },
    /// Train on a dataset stem and write a checkpoint.
    Train {
        /// Model config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Dataset stem: reads <DATA>.2d.jsonl and <DATA>.3d.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-epoch metric log (JSON lines). Defaults to stdout.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        weight_decay: Option<f64>,
        /// Run the full evaluation only every Nth epoch.
        #[arg(long)]
        eval_every: Option<usize>,
        /// Stop once training MPJPE falls below this (mm).
        #[arg(long)]
        target_mpjpe: Option<f64>,
    },
    /// Evaluate a checkpoint: mpjpe, mpjve, acc_err, pck, auc.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset stem: reads <DATA>.2d.jsonl and <DATA>.3d.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Average each prediction with its mirrored counterpart.
        #[arg(long)]
        flip: bool,
        #[arg(long)]
        pretty: bool,
    },
    /// Lift a 2D dataset to 3D predictions.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset stem: reads <DATA>.2d.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Prediction output path (JSON lines).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        flip: bool,
    },
    /// Read one 2D frame JSON per line on stdin, emit one 3D frame per line.
    Stream {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sliding window length; default is the checkpoint's training window.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Check analytic gradients of the full training loss against central
    /// differences on a small model.
    Gradcheck {
        #[arg(long, default_value_t = GRAD_CHECK_SEED)]
        seed: u64,
        #[arg(long, default_value_t = GRAD_CHECK_EPS)]
        eps: f64,
        #[arg(long)]
        pretty: bool,
    },
    /// Time the sequential scan kernel across sequence lengths and fit the
    /// scaling exponent.
    Bench {
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Count model parameters and compare to the published 14.42M.
    Params {
        #[arg(long, conflicts_with = "reference_config")]
        config: Option<PathBuf>,
        /// Use the published full-size configuration.
        #[arg(long)]
        reference_config: bool,
        #[arg(long)]
        pretty: bool,
    },
}

enum CliError {
    /// Bad input from the caller: missing path, malformed config, wrong
    /// model kind. Exit 2.
    Usage(String),
    /// Failure during compute or output. Exit 1.
    Runtime(String),
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> CliError {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(DataError, ModelError, TrainError, SynthError, NumericsError, io::Error);

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        CliError::Runtime(format!("json: {e}"))
    }
}

fn main() -> ExitCode {
    init_thread_pool();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}

/// POSE_MAGIC_THREADS caps the rayon pool used by training. Must run before
/// any parallel work touches the global pool.
fn init_thread_pool() {
    if let Some(n) = std::env::var("POSE_MAGIC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { out, seed, sequences, frames, config, noise } => {
            cmd_synth(&out, seed, sequences, frames, config.as_deref(), noise)
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            log,
            epochs,
            max_steps,
            batch_size,
            lr,
            weight_decay,
            eval_every,
            target_mpjpe,
        } => {
            let mut tc = TrainConfig::default();
            tc.seed = seed;
            tc.max_steps = max_steps;
            tc.target_mpjpe = target_mpjpe;
            if let Some(v) = epochs {
                tc.epochs = v;
            }
            if let Some(v) = batch_size {
                tc.batch_size = v;
            }
            if let Some(v) = lr {
                tc.lr = v;
            }
            if let Some(v) = weight_decay {
                tc.weight_decay = v;
            }
            if let Some(v) = eval_every {
                tc.eval_every = v;
            }
            cmd_train(&config, &data, &out, seed, log.as_deref(), &tc)
        }
        Command::Eval { checkpoint, data, flip, pretty } => {
            cmd_eval(&checkpoint, &data, flip, pretty)
        }
        Command::Infer { checkpoint, data, out, flip } => {
            cmd_infer(&checkpoint, &data, &out, flip)
        }
        Command::Stream { checkpoint, window } => cmd_stream(&checkpoint, window),
        Command::Gradcheck { seed, eps, pretty } => cmd_gradcheck(seed, eps, pretty),
        Command::Bench { reps, seed } => cmd_bench(reps, seed),
        Command::Params { config, reference_config, pretty } => {
            cmd_params(config.as_deref(), reference_config, pretty)
        }
    }
}

// ── shared plumbing ──────────────────────────────────────────────────

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("no such file: {}", path.display())))
    }
}

/// Dataset stems: `--data runs/a` names `runs/a.2d.jsonl` + `runs/a.3d.jsonl`.
fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_config(path: &Path) -> Result<ModelConfig, CliError> {
    require_file(path)?;
    load_model_config(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn open_checkpoint(path: &Path) -> Result<PoseMagicModel, CliError> {
    require_file(path)?;
    Ok(load_checkpoint(path, None)?)
}

/// Zip the 2D and 3D halves of a dataset, insisting the files tell the
/// same story: same ids in the same order, same frame counts.
fn load_pairs(
    stem: &Path,
    skeleton: &Skeleton,
) -> Result<Vec<(PoseSequence2D, PoseSequence3D)>, CliError> {
    let p2 = with_suffix(stem, ".2d.jsonl");
    let p3 = with_suffix(stem, ".3d.jsonl");
    require_file(&p2)?;
    require_file(&p3)?;
    let d2 = load_poses_2d(&p2, skeleton).map_err(data_usage(&p2))?;
    let d3 = pose_magic::dataio::load_poses_3d(&p3, skeleton).map_err(data_usage(&p3))?;
    if d2.len() != d3.len() {
        return Err(CliError::Usage(format!(
            "{} has {} sequences but {} has {}",
            p2.display(),
            d2.len(),
            p3.display(),
            d3.len()
        )));
    }
    d2.into_iter()
        .zip(d3)
        .map(|(a, b)| {
            if a.id != b.id {
                Err(CliError::Usage(format!(
                    "sequence id mismatch: 2D '{}' vs 3D '{}'",
                    a.id, b.id
                )))
            } else if a.frames.shape()[0] != b.frames.shape()[0] {
                Err(CliError::Usage(format!(
                    "sequence '{}': {} 2D frames vs {} 3D frames",
                    a.id,
                    a.frames.shape()[0],
                    b.frames.shape()[0]
                )))
            } else {
                Ok((a, b))
            }
        })
        .collect()
}

/// Content problems in user-supplied pose files (wrong joint count, bad
/// JSON) are usage errors, not runtime failures.
fn data_usage(path: &Path) -> impl Fn(DataError) -> CliError + '_ {
    move |e| match e {
        DataError::Io(io) => CliError::Runtime(format!("{}: {io}", path.display())),
        other => CliError::Usage(format!("{}: {other}", path.display())),
    }
}

fn print_table(rows: &[(&str, String)]) {
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in rows {
        println!("{k:width$}  {v}");
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

// ── commands ─────────────────────────────────────────────────────────

fn cmd_synth(
    out: &Path,
    seed: u64,
    sequences: usize,
    frames: usize,
    config: Option<&Path>,
    noise: f64,
) -> Result<(), CliError> {
    if sequences == 0 || frames == 0 {
        return Err(CliError::Usage("need --sequences >= 1 and --frames >= 1".into()));
    }
    let skeleton = match config {
        Some(p) => load_config(p)?.skeleton,
        None => Skeleton::h36m(),
    };
    let mut cfg = SynthConfig::new(skeleton, sequences, frames, seed);
    cfg.noise_sigma = noise;
    let (d2, d3): (Vec<_>, Vec<_>) = synth_dataset(&cfg).into_iter().unzip();
    let p2 = with_suffix(out, ".2d.jsonl");
    let p3 = with_suffix(out, ".3d.jsonl");
    save_poses_2d(&p2, &d2)?;
    save_poses_3d(&p3, &d3)?;
    println!(
        "{}",
        json!({
            "sequences": sequences,
            "frames": frames,
            "out_2d": p2.display().to_string(),
            "out_3d": p3.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    seed: u64,
    log: Option<&Path>,
    tc: &TrainConfig,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let pairs = load_pairs(data, &cfg.skeleton)?;
    let mut model = PoseMagicModel::new(cfg, seed)?;
    let report = train(&mut model, &pairs, tc)?;
    save_checkpoint(&model, out)?;

    let mut epoch_lines = String::new();
    for e in &report.epochs {
        epoch_lines.push_str(&serde_json::to_string(e)?);
        epoch_lines.push('\n');
    }
    match log {
        Some(p) => {
            let mut f = BufWriter::new(File::create(p)?);
            f.write_all(epoch_lines.as_bytes())?;
            f.flush()?;
        }
        None => print!("{epoch_lines}"),
    }
    let last = report.epochs.last();
    println!(
        "{}",
        json!({
            "checkpoint": out.display().to_string(),
            "epochs": report.epochs.len(),
            "steps": report.step_losses.len(),
            "first_loss": report.step_losses.first(),
            "final_loss": report.step_losses.last(),
            "final_mpjpe": last.map(|e| e.mpjpe),
        })
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, flip: bool, pretty: bool) -> Result<(), CliError> {
    let model = open_checkpoint(checkpoint)?;
    let pairs = load_pairs(data, &model.config.skeleton)?;
    let s = evaluate(&model, &pairs, flip)?;
    if pretty {
        print_table(&[
            ("mpjpe", format!("{:.6}", s.mpjpe)),
            ("mpjve", fmt_opt(s.mpjve)),
            ("acc_err", fmt_opt(s.acc_err)),
            ("pck", format!("{:.6}", s.pck)),
            ("auc", format!("{:.6}", s.auc)),
        ]);
    } else {
        println!("{}", serde_json::to_string(&s)?);
    }
    Ok(())
}

fn cmd_infer(checkpoint: &Path, data: &Path, out: &Path, flip: bool) -> Result<(), CliError> {
    let model = open_checkpoint(checkpoint)?;
    let p2 = with_suffix(data, ".2d.jsonl");
    require_file(&p2)?;
    let seqs = load_poses_2d(&p2, &model.config.skeleton).map_err(data_usage(&p2))?;
    let mut preds = Vec::with_capacity(seqs.len());
    for s in &seqs {
        let frames = if flip {
            forward_flip_averaged(&model, &s.frames)?
        } else {
            model.forward(&s.frames, Mode::Eval)?
        };
        preds.push(PoseSequence3D { id: s.id.clone(), fps: s.fps, frames });
    }
    save_poses_3d(out, &preds)?;
    println!(
        "{}",
        json!({ "sequences": preds.len(), "out": out.display().to_string() })
    );
    Ok(())
}

fn cmd_stream(checkpoint: &Path, window: Option<usize>) -> Result<(), CliError> {
    let model = open_checkpoint(checkpoint)?;
    if model.config.direction != Direction::Causal {
        return Err(CliError::Usage(
            "checkpoint is bidirectional; streaming needs a causal model whose \
             frame-t output never reads frames after t"
                .into(),
        ));
    }
    let w = window.unwrap_or(model.config.t_train);
    if w == 0 {
        return Err(CliError::Usage("--window must be >= 1".into()));
    }
    let j = model.config.joints;

    let stdin = io::stdin();
    let mut stdout = io::stdout().lock();
    let mut buf: VecDeque<Vec<f64>> = VecDeque::with_capacity(w);
    for (lineno, line) in stdin.lock().lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame = match parse_frame(&line, j) {
            Ok(f) => f,
            Err(msg) => {
                eprintln!("stream: line {}: {msg}", lineno + 1);
                continue;
            }
        };
        if buf.len() == w {
            buf.pop_front();
        }
        buf.push_back(frame);

        // Window holds frames max(1, t-w+1)..=t; re-lift it and keep only
        // the newest frame so each input line answers with one output line.
        let l = buf.len();
        let mut data = Vec::with_capacity(l * j * 3);
        for f in &buf {
            data.extend_from_slice(f);
        }
        let x = Tensor::new(vec![l, j, 3], data).map_err(CliError::from)?;
        let pred = model.forward(&x, Mode::Eval)?;
        let tail = &pred.data()[(l - 1) * j * 3..];
        let frame_out: Vec<[f64; 3]> = tail.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        serde_json::to_writer(&mut stdout, &frame_out)?;
        stdout.write_all(b"\n")?;
        stdout.flush()?;
    }
    Ok(())
}

/// One stdin line: a J-element array of [x, y, confidence], all finite.
fn parse_frame(line: &str, j: usize) -> Result<Vec<f64>, String> {
    let rows: Vec<[f64; 3]> = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if rows.len() != j {
        return Err(format!("expected {j} joints, got {}", rows.len()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if !flat.iter().all(|v| v.is_finite()) {
        return Err("non-finite coordinate".into());
    }
    Ok(flat)
}

fn cmd_gradcheck(seed: u64, eps: f64, pretty: bool) -> Result<(), CliError> {
    let r = model_grad_check(seed, eps)?;
    let pass = r.max_rel_err < 1e-5;
    if pretty {
        print_table(&[
            ("max_rel_err", format!("{:.3e}", r.max_rel_err)),
            ("worst_param", r.worst_param.clone()),
            ("worst_index", r.worst_index.to_string()),
            ("analytic", format!("{:.6e}", r.analytic)),
            ("numeric", format!("{:.6e}", r.numeric)),
            ("checked", r.checked.to_string()),
            ("pass", pass.to_string()),
        ]);
    } else {
        println!(
            "{}",
            json!({
                "max_rel_err": r.max_rel_err,
                "worst_param": r.worst_param,
                "worst_index": r.worst_index,
                "analytic": r.analytic,
                "numeric": r.numeric,
                "checked": r.checked,
                "pass": pass,
            })
        );
    }
    if pass {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: max relative error {:.3e} >= 1e-5",
            r.max_rel_err
        )))
    }
}

fn cmd_bench(reps: usize, seed: u64) -> Result<(), CliError> {
    if reps == 0 {
        return Err(CliError::Usage("--reps must be >= 1".into()));
    }
    let mut points = Vec::new();
    for &l in &[512usize, 1024, 2048, 4096, 8192] {
        let ms = bench_scan(l, reps, seed);
        println!("{}", json!({ "l": l, "ms": ms }));
        points.push((l, ms));
    }
    println!("{}", json!({ "exponent": fit_power_law(&points) }));
    Ok(())
}

fn cmd_params(
    config: Option<&Path>,
    reference_config: bool,
    pretty: bool,
) -> Result<(), CliError> {
    let cfg = if reference_config {
        ModelConfig::default()
    } else {
        match config {
            Some(p) => load_config(p)?,
            None => {
                return Err(CliError::Usage(
                    "pass --config <path> or --reference-config".into(),
                ))
            }
        }
    };
    let model = PoseMagicModel::new(cfg, 0)?;
    let n = model.count_params();
    let ratio = n as f64 / REFERENCE_PARAMS;
    if pretty {
        print_table(&[
            ("params", n.to_string()),
            ("ratio", format!("{ratio:.4}")),
        ]);
    } else {
        println!("{}", json!({ "params": n, "ratio": ratio }));
    }
    Ok(())
}
