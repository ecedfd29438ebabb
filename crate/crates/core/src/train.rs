//! Seeded mini-batch training.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::heads::{total_loss, LossBreakdown};
use crate::model::Model;
use crate::scene::SyntheticScene;
use crate::tensor::{AdamW, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch} (scene {scene})")]
    Divergence { epoch: usize, batch: usize, scene: String },
    #[error("no training scenes")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Mean per-scene loss components of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const LOSS_LOG_HEADER: &str = "epoch,lr,total,cls,kp,mask,flow";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!("{},{:e},{:e},{:e},{:e},{:e},{:e}", self.epoch, self.lr, l.total, l.cls, l.kp, l.mask, l.flow)
    }
}

pub fn loss_log_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for l in logs {
        let _ = writeln!(s, "{}", l.csv_row());
    }
    s
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `loss.csv` and one checkpoint per epoch when set.
    pub out_dir: Option<PathBuf>,
    /// Scenes of a batch are differentiated concurrently when `> 1`.
    /// Gradients are still summed in batch order, so results do not depend
    /// on the worker count.
    pub workers: usize,
}

/// Seed of the data order of one epoch; independent of the model.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Scene indices of every batch of `epoch`.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Loss and parameter gradients of one scene.
pub fn scene_gradients(model: &Model, scene: &SyntheticScene) -> Result<(LossBreakdown, Vec<Tensor>), TensorError> {
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let cam = tape.constant(scene.cam.features.clone());
    let lidar = tape.constant(scene.lidar.features.clone());
    let out = model.forward(&p, cam, lidar)?;
    let cfg = &model.config;
    let (loss, parts) =
        total_loss(&out.predictions, &scene.gt_map, Some(&scene.gt_flow.flow), &cfg.grid, model.slots(), &cfg.loss)?;
    if !parts.total.is_finite() {
        return Err(TensorError::NonFinite { op: "loss" });
    }
    let grads = tape.backward(loss)?;
    Ok((parts, p.grads(&grads)))
}

/// Mean loss of `scenes` under the current parameters.
pub fn evaluate_loss(model: &Model, scenes: &[SyntheticScene]) -> Result<LossBreakdown, TensorError> {
    let mut acc = LossBreakdown::default();
    for s in scenes {
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let out =
            model.forward(&p, tape.constant(s.cam.features.clone()), tape.constant(s.lidar.features.clone()))?;
        let cfg = &model.config;
        acc += total_loss(&out.predictions, &s.gt_map, Some(&s.gt_flow.flow), &cfg.grid, model.slots(), &cfg.loss)?.1;
    }
    Ok(acc.scaled(1.0 / scenes.len().max(1) as f64))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

/// Trains `model` for `config.train.epochs` epochs. `on_epoch` sees each
/// epoch's log as soon as it is complete.
pub fn train(
    model: &mut Model,
    scenes: &[SyntheticScene],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::Empty);
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tc = model.config.train.clone();
    let mut opt = AdamW::new(tc.optim, &model.params);
    let mut logs = Vec::with_capacity(tc.epochs);
    for epoch in 1..=tc.epochs {
        let lr = opt.lr();
        let mut acc = LossBreakdown::default();
        for (b, batch) in batch_order(scenes.len(), tc.batch_size, model.config.seed, epoch).into_iter().enumerate() {
            let run = |&i: &usize| scene_gradients(model, &scenes[i]);
            let results: Vec<_> = if opts.workers > 1 {
                batch.par_iter().with_max_len(1).map(run).collect()
            } else {
                batch.iter().map(run).collect()
            };
            let mut sum: Option<Vec<Tensor>> = None;
            for (&i, r) in batch.iter().zip(results) {
                let (parts, grads) = match r {
                    Ok(v) => v,
                    Err(TensorError::NonFinite { .. }) => {
                        return Err(TrainError::Divergence { epoch, batch: b, scene: scenes[i].id.clone() })
                    }
                    Err(e) => return Err(e.into()),
                };
                acc += parts;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(s) => {
                        for (a, g) in s.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let mut grads = sum.expect("non-empty batch");
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            match opt.step(&mut model.params, &grads) {
                Ok(_) => {}
                Err(TensorError::NonFinite { .. }) => {
                    return Err(TrainError::Divergence { epoch, batch: b, scene: scenes[batch[0]].id.clone() })
                }
                Err(e) => return Err(e.into()),
            }
        }
        opt.end_epoch();
        let log = EpochLog { epoch, lr, loss: acc.scaled(1.0 / scenes.len() as f64) };
        log::info!("epoch {epoch}: {}", log.csv_row());
        logs.push(log);
        if let Some(dir) = &opts.out_dir {
            let path = dir.join("loss.csv");
            fs::write(&path, loss_log_csv(&logs)).map_err(io_err(&path))?;
            Checkpoint::of(model, epoch as u32).save(&dir.join(checkpoint_name(epoch)))?;
        }
        on_epoch(&log);
    }
    Ok(logs)
}
