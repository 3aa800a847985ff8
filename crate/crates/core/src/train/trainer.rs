use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{cosine_lr, TrainConfig};
use crate::codec::{encode_grid, encode_heatmap};
use crate::data::{augment, Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::{bce_loss_grad, grid_loss_grad, mse_loss_grad, DwaState, TaskLossVector};
use crate::network::{load_checkpoint, save_checkpoint, BatchOutput, Network};
use crate::nn::{Adam, AdamState, Module, Tensor};
use crate::par;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// One line of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted means over the epoch.
    pub losses: TaskLossVector,
    pub task_losses: [f64; 3],
    /// Task weights used during this epoch.
    pub weights: Vec<f64>,
    pub total: f64,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub code_version: String,
    pub seed: u64,
    pub log: PathBuf,
    pub final_checkpoint: Option<PathBuf>,
    pub parallel: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume_from: Option<PathBuf>,
    /// Stop (after checkpointing) once this many epochs are complete.
    pub stop_after_epoch: Option<usize>,
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The checkpoint written last.
    pub checkpoint: PathBuf,
    pub epochs_completed: usize,
    pub records: Vec<EpochRecord>,
    pub network: Network,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Progress {
    epochs_completed: usize,
    adam_step: u64,
    dwa: DwaState,
}

pub fn checkpoint_name(epochs_completed: usize) -> String {
    format!("epoch_{epochs_completed:05}.ckpt")
}

/// Generator for epoch `epoch`; depends only on the seed and the epoch so a
/// resumed run replays the same shuffles and augmentations.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Targets of one batch in network layout.
struct BatchTargets {
    rv: ArrayD<f64>,
    faz: ArrayD<f64>,
    heatmap: ArrayD<f64>,
    /// Per sample `[S, S, 4]`.
    grids: Vec<Array3<f64>>,
}

fn batch_targets(samples: &[Sample], cfg: &TrainConfig) -> BatchTargets {
    let (h, w) = samples[0].dim();
    let b = samples.len();
    let mut rv = ArrayD::zeros(IxDyn(&[b, 1, h, w]));
    let mut faz = ArrayD::zeros(IxDyn(&[b, 1, h, w]));
    let mut heatmap = ArrayD::zeros(IxDyn(&[b, 1, h, w]));
    let mut grids = Vec::with_capacity(b);
    for (i, s) in samples.iter().enumerate() {
        let a = &s.annotations;
        rv.slice_mut(s![i, 0, .., ..]).assign(&a.vessel_mask.mapv(f64::from));
        faz.slice_mut(s![i, 0, .., ..]).assign(&a.faz_mask.mapv(f64::from));
        let hm = encode_heatmap(&a.junctions, h, w, cfg.codec.sigma);
        heatmap.slice_mut(s![i, 0, .., ..]).assign(&hm.values.mapv(f64::from));
        grids.push(encode_grid(&a.junctions, h, w, cfg.codec.cell_size).cells.mapv(f64::from));
    }
    BatchTargets { rv, faz, heatmap, grids }
}

fn to_f64(t: &Tensor) -> ArrayD<f64> {
    t.mapv(f64::from).into_dyn()
}

fn to_tensor(a: ArrayD<f64>, scale: f64) -> Tensor {
    a.mapv(|v| (v * scale) as f32)
        .into_dimensionality()
        .expect("four-dimensional gradient")
}

/// Losses of one batch and the gradient of `Σ λ_n L_n` with respect to the
/// network outputs.
fn batch_losses(out: &BatchOutput, t: &BatchTargets, weights: &[f64], cfg: &TrainConfig) -> Result<(TaskLossVector, BatchOutput)> {
    let (rv, d_rv) = bce_loss_grad(to_f64(&out.rv).view(), t.rv.view())?;
    let (faz, d_faz) = bce_loss_grad(to_f64(&out.faz).view(), t.faz.view())?;
    let (hm, d_hm) = mse_loss_grad(to_f64(&out.heatmap).view(), t.heatmap.view())?;
    let b = out.len();
    let mut grid_total = 0.0;
    let mut d_grid = Tensor::zeros(out.grid.raw_dim());
    for (i, target) in t.grids.iter().enumerate() {
        let pred = out.grid.slice(s![i, .., .., ..]).permuted_axes([1, 2, 0]).mapv(f64::from);
        let (l, g) = grid_loss_grad(pred.view(), target.view(), &cfg.grid_loss)?;
        grid_total += l;
        let g = g.permuted_axes([2, 0, 1]).mapv(|v| (v * weights[2] / b as f64) as f32);
        d_grid.slice_mut(s![i, .., .., ..]).assign(&g);
    }
    let losses = TaskLossVector {
        rv,
        faz,
        rvj_heatmap: hm,
        rvj_grid: grid_total / b as f64,
    };
    let grads = BatchOutput {
        rv: to_tensor(d_rv, weights[0]),
        faz: to_tensor(d_faz, weights[1]),
        heatmap: to_tensor(d_hm, weights[2]),
        grid: d_grid,
    };
    Ok((losses, grads))
}

fn adam_tensors(state: &AdamState) -> Vec<(String, ArrayD<f32>)> {
    let m = state.m.iter().enumerate().map(|(i, t)| (format!("optimizer.m.{i}"), t.clone()));
    let v = state.v.iter().enumerate().map(|(i, t)| (format!("optimizer.v.{i}"), t.clone()));
    m.chain(v).collect()
}

fn save_state(path: &Path, net: &Network, adam: &Adam, dwa: &DwaState, epochs_completed: usize, cfg: &TrainConfig) -> Result<()> {
    let progress = Progress {
        epochs_completed,
        adam_step: adam.state.step,
        dwa: dwa.clone(),
    };
    let extra = serde_json::json!({
        "progress": progress,
        "config": cfg,
    });
    save_checkpoint(path, net, extra, &adam_tensors(&adam.state))
}

struct Resumed {
    net: Network,
    adam: Adam,
    progress: Progress,
}

fn resume(path: &Path, cfg: &TrainConfig) -> Result<Resumed> {
    let ck = load_checkpoint(path)?;
    let mut net = ck.network(Some(&cfg.network_config()))?;
    net.set_fusion_mode(cfg.fusion_mode);
    let progress: Progress = serde_json::from_value(ck.manifest.extra["progress"].clone())
        .map_err(|e| Error::IncompatibleCheckpoint(format!("checkpoint has no training progress: {e}")))?;
    let mut adam = Adam::default();
    adam.state.step = progress.adam_step;
    let mut i = 0;
    while let (Some(m), Some(v)) = (ck.tensor(&format!("optimizer.m.{i}")), ck.tensor(&format!("optimizer.v.{i}"))) {
        adam.state.m.push(m.clone());
        adam.state.v.push(v.clone());
        i += 1;
    }
    let mut trainable = 0;
    net.visit(&mut |p| trainable += p.trainable as usize);
    if progress.adam_step > 0 && i != trainable {
        return Err(Error::IncompatibleCheckpoint(format!(
            "optimizer state covers {i} tensors, network has {trainable}"
        )));
    }
    Ok(Resumed { net, adam, progress })
}

/// Keeps the log records of completed epochs and drops anything after them.
fn truncate_log(path: &Path, epochs_completed: usize) -> Result<Vec<EpochRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpochRecord = serde_json::from_str(&line)?;
        if rec.epoch < epochs_completed {
            kept.push(rec);
        }
    }
    let mut f = File::create(path)?;
    for r in &kept {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(kept)
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Trains on `cfg.train_split` of `cfg.dataset_root`.
pub fn train(cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = Dataset::open(&cfg.dataset_root)?;
    let samples = dataset.load_split(&cfg.train_split)?;
    train_on(cfg, &samples, opts)
}

/// Trains on samples already in memory; checkpoints and logs still go to
/// `cfg.checkpoint_dir`.
pub fn train_on(cfg: &TrainConfig, samples: &[Sample], opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::NoData(format!("split `{}` has no training samples", cfg.train_split)));
    }
    let dim = samples[0].dim();
    if let Some(s) = samples.iter().find(|s| s.dim() != dim) {
        return Err(Error::Geometry(format!("sample {} is {:?}, expected {:?}", s.id, s.dim(), dim)));
    }
    let dir = &cfg.checkpoint_dir;
    fs::create_dir_all(dir)?;
    let log_path = dir.join(LOG_FILE);

    let (mut net, mut adam, mut dwa, start, mut records) = match &opts.resume_from {
        Some(path) => {
            let r = resume(path, cfg)?;
            let records = truncate_log(&log_path, r.progress.epochs_completed)?;
            (r.net, r.adam, r.progress.dwa, r.progress.epochs_completed, records)
        }
        None => {
            File::create(&log_path)?;
            (
                Network::new(cfg.network_config(), cfg.seed)?,
                Adam::default(),
                DwaState::new(TaskLossVector::TASKS, cfg.dwa_temperature),
                0,
                Vec::new(),
            )
        }
    };

    let mut manifest = RunManifest {
        config: cfg.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        log: log_path.clone(),
        final_checkpoint: None,
        parallel: cfg!(feature = "parallel"),
    };
    write_manifest(dir, &manifest)?;

    let end = opts.stop_after_epoch.map_or(cfg.epochs, |k| k.min(cfg.epochs));
    let mut last_checkpoint = opts.resume_from.clone();
    let aug = if cfg.augment { Some(cfg.augmentation) } else { None };

    for epoch in start..end {
        let lr = cosine_lr(cfg.lr_initial, epoch, cfg.epochs);
        let weights = dwa.weights.clone();
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let sample_seeds: Vec<u64> = order.iter().map(|_| rng.random()).collect();

        let mut sum = TaskLossVector::default();
        for (chunk, seeds) in order.chunks(cfg.batch_size).zip(sample_seeds.chunks(cfg.batch_size)) {
            let batch: Vec<Sample> = par::map_indexed(chunk.len(), |k| {
                let s = &samples[chunk[k]];
                match &aug {
                    Some(p) => augment(s, p, &mut ChaCha8Rng::seed_from_u64(seeds[k])),
                    None => s.clone(),
                }
            });
            let targets = batch_targets(&batch, cfg);
            let x = net.input_tensor(&batch.iter().map(|s| &s.triplet).collect::<Vec<_>>())?;
            net.zero_grad();
            let out = net.forward_train(&x)?;
            let (losses, grads) = batch_losses(&out, &targets, &weights, cfg)?;
            if !losses.is_finite() {
                return Err(Error::NumericDivergence {
                    epoch,
                    detail: format!("{losses:?}"),
                });
            }
            net.backward(&grads);
            adam.step(&mut net, lr);
            sum = sum.add(&losses.scaled(batch.len() as f64));
        }

        let mean = sum.scaled(1.0 / samples.len() as f64);
        let task_losses = mean.task_losses();
        let record = EpochRecord {
            epoch,
            lr,
            losses: mean,
            task_losses,
            total: task_losses.iter().zip(&weights).map(|(l, w)| l * w).sum(),
            weights,
        };
        if !record.total.is_finite() {
            return Err(Error::NumericDivergence {
                epoch,
                detail: "non-finite epoch loss".into(),
            });
        }
        let mut log = OpenOptions::new().append(true).open(&log_path)?;
        writeln!(log, "{}", serde_json::to_string(&record)?)?;
        if opts.verbose {
            eprintln!(
                "epoch {:>5}  lr {:.3e}  rv {:.4}  faz {:.4}  rvj {:.4}  total {:.4}",
                epoch, lr, task_losses[0], task_losses[1], task_losses[2], record.total
            );
        }
        records.push(record);
        // A zero-loss epoch makes the descent ratio undefined; the weights
        // then stay uniform for the next epoch.
        match dwa.update(&task_losses) {
            Ok(()) | Err(Error::DegenerateHistory { .. }) => {}
            Err(e) => return Err(e),
        }

        let done = epoch + 1;
        if done % cfg.checkpoint_every == 0 || done == end {
            let path = dir.join(checkpoint_name(done));
            save_state(&path, &net, &adam, &dwa, done, cfg)?;
            last_checkpoint = Some(path);
        }
    }

    let checkpoint = match last_checkpoint {
        Some(p) => p,
        None => {
            let path = dir.join(checkpoint_name(start));
            save_state(&path, &net, &adam, &dwa, start, cfg)?;
            path
        }
    };
    let epochs_completed = end.max(start);
    if epochs_completed == cfg.epochs {
        let fin = dir.join(FINAL_CHECKPOINT);
        fs::copy(&checkpoint, &fin)?;
        manifest.final_checkpoint = Some(fin);
        write_manifest(dir, &manifest)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        epochs_completed,
        records,
        network: net,
    })
}

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(m)?)?;
    Ok(())
}
