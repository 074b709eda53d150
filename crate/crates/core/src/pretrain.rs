//! The self-supervised training loop.
//!
//! Every step runs in a fixed order: build the four views of each image,
//! run the query branch on `v1`/`v3` and the momentum branch on `v2`/`v4`,
//! evaluate the four-term loss against the current queues, update the query
//! parameters, move the momentum parameters towards them, and only then push
//! the new keys into the queues.
//!
//! Per-step randomness is derived from `(epoch, batch index)`, so a run
//! resumed from a checkpoint replays the same views and batch order as an
//! uninterrupted one.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;

use crate::augment::make_views;
use crate::checkpoint::Checkpoint;
use crate::config::{Config, QueueInit};
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{impash_loss_and_grad, ImpashBatch, InfoNce, LossValue};
use crate::memory::FeatureQueue;
use crate::model::{forward_momentum, forward_query, init_momentum, momentum_update, ModelBundle, MomentumBundle};
use crate::optim::Sgd;
use crate::seed::{self, SeedTree};

pub const METRICS_FILE: &str = "metrics.tsv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic.ckpt";
const METRICS_HEADER: &str = "step\tepoch\tlr\tq1k1\tq1k2\tq2k1\tq2k2\ttotal";

/// Cosine annealing: `base_lr * 0.5 * (1 + cos(pi * epoch / epochs))`.
pub fn lr_at(epoch: f64, config: &Config) -> f64 {
    let p = &config.pretrain;
    if p.epochs == 0 {
        return p.base_lr;
    }
    let t = (epoch / p.epochs as f64).clamp(0.0, 1.0);
    p.base_lr * 0.5 * (1.0 + (PI * t).cos())
}

/// Everything that evolves during pretraining.
#[derive(Debug, Clone)]
pub struct PretrainState {
    pub config: Config,
    pub seeds: SeedTree,
    pub query: ModelBundle,
    pub momentum: MomentumBundle,
    pub optimizer: Sgd,
    /// Negatives for the terms whose positive is an InfoMin key.
    pub queue1: FeatureQueue,
    /// Negatives for the terms whose positive is a PatchShuffling key.
    pub queue2: FeatureQueue,
    pub epoch: u64,
    pub step: u64,
}

impl PretrainState {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let seeds = SeedTree::new(config.seed);
        let query = ModelBundle::new(&config.model, seeds.init)?;
        let momentum = init_momentum(&query, config.pretrain.alpha);
        let optimizer = Sgd::new(&query.params, config.pretrain.sgd_momentum, config.pretrain.weight_decay);
        let dim = config.model.projection_dim;
        let k = config.pretrain.queue_size;
        Ok(Self {
            config: config.clone(),
            seeds,
            queue1: FeatureQueue::new(k, dim, seed::derive_index(seeds.queue, 1))?,
            queue2: FeatureQueue::new(k, dim, seed::derive_index(seeds.queue, 2))?,
            query,
            momentum,
            optimizer,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut state = Self::new(&ck.config)?;
        state.query.params.check_structure(&ck.query)?;
        if ck.queue1.dim() != state.queue1.dim() || ck.queue1.capacity() != state.queue1.capacity() {
            return Err(Error::Checkpoint("queue shape does not match the stored config".into()));
        }
        state.query.params = ck.query;
        state.momentum.params = ck.momentum;
        state.optimizer.velocity = ck.velocity;
        state.queue1 = ck.queue1;
        state.queue2 = ck.queue2;
        state.epoch = ck.epoch;
        state.step = ck.step;
        Ok(state)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            query: self.query.params.clone(),
            momentum: self.momentum.params.clone(),
            velocity: self.optimizer.velocity.clone(),
            queue1: self.queue1.clone(),
            queue2: self.queue2.clone(),
        }
    }

    /// Seed for the views of batch `batch` in epoch `epoch`.
    pub fn step_seed(&self, epoch: u64, batch: u64) -> u64 {
        seed::derive_index(seed::derive_index(self.seeds.augment, epoch), batch)
    }
}

/// Fill both queues with momentum keys of augmented images from
/// `manifest`, cycling through it in seeded order until every slot has been
/// written once.
pub fn warm_queues(state: &mut PretrainState, manifest: &DatasetManifest) -> Result<()> {
    if manifest.is_empty() {
        return Err(Error::InvalidInput("cannot warm queues from an empty manifest".into()));
    }
    let warm_seed = seed::derive(state.seeds.queue, "warm");
    let b = state.config.pretrain.batch_size.min(state.queue1.capacity());
    let mut round = 0;
    while state.queue1.fill_count() < state.queue1.capacity() {
        for (bi, idx) in epoch_batches(manifest.len(), b, warm_seed, round).iter().enumerate() {
            let remaining = state.queue1.capacity() - state.queue1.fill_count();
            if remaining == 0 {
                break;
            }
            let idx = &idx[..idx.len().min(remaining)];
            let images = load_batch(manifest, idx)?;
            let batch_seed = seed::derive_index(seed::derive_index(warm_seed, round), bi as u64);
            let views = images
                .iter()
                .enumerate()
                .map(|(i, img)| make_views(img, seed::derive_index(batch_seed, i as u64), &state.config.augment))
                .collect::<Result<Vec<_>>>()?;
            let arch = &state.momentum.arch;
            let v2 = arch.images_to_tensor(&views.iter().map(|v| &v.v2).collect::<Vec<_>>())?;
            let v4 = arch.images_to_tensor(&views.iter().map(|v| &v.v4).collect::<Vec<_>>())?;
            let (k1, k2) = forward_momentum(&state.momentum, &v2, &v4)?;
            state.queue1.enqueue(k1.view())?;
            state.queue2.enqueue(k2.view())?;
        }
        round += 1;
    }
    Ok(())
}

/// One optimisation step on `batch` at learning rate `lr`. Image `i` gets
/// its views from `derive_index(seed, i)`.
///
/// On a non-finite loss nothing is modified and [`Error::NonFiniteLoss`] is
/// returned.
pub fn pretrain_step(state: &mut PretrainState, batch: &[Image], seed: u64, lr: f64) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let cfg = &state.config;
    // (1) views
    let views = batch
        .iter()
        .enumerate()
        .map(|(i, img)| make_views(img, seed::derive_index(seed, i as u64), &cfg.augment))
        .collect::<Result<Vec<_>>>()?;
    let arch = &state.query.arch;
    let stack = |pick: fn(&crate::augment::ViewQuadruple) -> &Image| {
        let imgs: Vec<&Image> = views.iter().map(pick).collect();
        arch.images_to_tensor(&imgs)
    };
    let v1 = stack(|v| &v.v1)?;
    let v2 = stack(|v| &v.v2)?;
    let v3 = stack(|v| &v.v3)?;
    let v4 = stack(|v| &v.v4)?;

    // (2) query and momentum forward passes
    let pass = forward_query(&state.query, v1, v3)?;
    let (k1, k2) = forward_momentum(&state.momentum, &v2, &v4)?;

    // (3) loss against the queues as they were before this step
    let nce = InfoNce::new(cfg.pretrain.temperature);
    let (loss, dq1, dq2) = impash_loss_and_grad(
        &nce,
        ImpashBatch {
            q1: pass.q1.view(),
            q2: pass.q2.view(),
            k1_pos: k1.view(),
            k2_pos: k2.view(),
            negatives1: state.queue1.view(),
            negatives2: state.queue2.view(),
        },
    )?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            detail: format!("{loss:?}"),
        });
    }

    // (4) gradient step on the query parameters only
    let grads = pass.backward(&state.query, &dq1, &dq2)?;
    state.optimizer.step(&mut state.query.params, &grads, lr)?;

    // (5) momentum update from the new query parameters
    momentum_update(&mut state.momentum, &state.query)?;

    // (6) enqueue the keys
    state.queue1.enqueue(k1.view())?;
    state.queue2.enqueue(k2.view())?;
    state.step += 1;
    Ok(loss)
}

/// Batches for one epoch: a seeded shuffle of `0..n`, cut into chunks of
/// `batch_size` with the remainder dropped. A set smaller than one batch
/// yields a single short batch.
pub fn epoch_batches(n: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive_index(shuffle_seed, epoch)));
    if n < batch_size {
        return if n == 0 { Vec::new() } else { vec![order] };
    }
    order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint instead of a fresh initialisation.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs (for pausing a run).
    pub stop_after: Option<u64>,
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: LossValue,
}

impl StepRecord {
    fn to_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.epoch, self.lr, l.q1k1, l.q1k2, l.q2k1, l.q2k2, l.total
        )
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return None;
        }
        let num = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            step: f[0].parse().ok()?,
            epoch: f[1].parse().ok()?,
            lr: num(2)?,
            loss: LossValue {
                q1k1: num(3)?,
                q1k2: num(4)?,
                q2k1: num(5)?,
                q2k2: num(6)?,
                total: num(7)?,
            },
        })
    }
}

/// Read a metrics log written by [`run_pretraining`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            StepRecord::parse(l).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected 8 tab-separated fields".into(),
            })
        })
        .collect()
}

pub fn checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

fn load_batch(manifest: &DatasetManifest, idx: &[usize]) -> Result<Vec<Image>> {
    idx.iter().map(|&i| Image::load(&manifest.entries[i].path)).collect()
}

/// Pretrain on every entry of `manifest`, writing `metrics.tsv`, periodic
/// `epoch_NNNN.ckpt` files and `final.ckpt` under `out_dir`. Returns the
/// path of the last checkpoint written.
pub fn run_pretraining(config: &Config, manifest: &DatasetManifest, out_dir: &Path, opts: &RunOptions) -> Result<PathBuf> {
    if manifest.is_empty() {
        return Err(Error::InvalidInput("pretraining manifest is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config != *config {
                return Err(Error::Config(format!(
                    "{} was written with a different configuration",
                    path.display()
                )));
            }
            PretrainState::from_checkpoint(ck)?
        }
        None => {
            let mut state = PretrainState::new(config)?;
            if config.pretrain.queue_init == QueueInit::Keys {
                warm_queues(&mut state, manifest)?;
            }
            state
        }
    };

    // Keep the log consistent with the state: drop lines past the resume point.
    let log_path = out_dir.join(METRICS_FILE);
    let mut log = format!("{METRICS_HEADER}\n");
    if opts.resume.is_some() && log_path.exists() {
        for rec in read_metrics(&log_path)? {
            if rec.step < state.step {
                let _ = writeln!(log, "{}", rec.to_line());
            }
        }
    }
    fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;

    let p = &config.pretrain;
    let last_epoch = opts.stop_after.map_or(p.epochs, |s| s.min(p.epochs));
    let mut last_ckpt = None;
    while state.epoch < last_epoch {
        let epoch = state.epoch;
        let batches = epoch_batches(manifest.len(), p.batch_size, state.seeds.shuffle, epoch);
        let n_batches = batches.len() as f64;
        let mut epoch_total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let images = load_batch(manifest, idx)?;
            let lr = lr_at(epoch as f64 + b as f64 / n_batches, config);
            let step_seed = state.step_seed(epoch, b as u64);
            let loss = match pretrain_step(&mut state, &images, step_seed, lr) {
                Ok(l) => l,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    let diag = out_dir.join(DIAGNOSTIC_CHECKPOINT);
                    state.to_checkpoint().save(&diag)?;
                    return Err(Error::NonFiniteLoss {
                        step: state.step,
                        detail: format!("{e}; state before the step saved to {}", diag.display()),
                    });
                }
                Err(e) => return Err(e),
            };
            epoch_total += loss.total;
            let rec = StepRecord {
                step: state.step - 1,
                epoch,
                lr,
                loss,
            };
            let _ = writeln!(log, "{}", rec.to_line());
        }
        state.epoch += 1;
        fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
        info!(
            "epoch {}/{} mean loss {:.4}",
            state.epoch,
            p.epochs,
            epoch_total / n_batches.max(1.0)
        );
        let periodic = p.checkpoint_interval > 0 && state.epoch % p.checkpoint_interval == 0;
        if periodic || state.epoch == last_epoch {
            let path = out_dir.join(checkpoint_name(state.epoch));
            state.to_checkpoint().save(&path)?;
            last_ckpt = Some(path);
        }
    }
    if state.epoch >= p.epochs {
        let path = out_dir.join(FINAL_CHECKPOINT);
        state.to_checkpoint().save(&path)?;
        return Ok(path);
    }
    match last_ckpt {
        Some(path) => Ok(path),
        None => {
            let path = out_dir.join(checkpoint_name(state.epoch));
            state.to_checkpoint().save(&path)?;
            Ok(path)
        }
    }
}
