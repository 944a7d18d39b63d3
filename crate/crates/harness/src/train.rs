//! Training loop.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clfseg_core::layers::BATCH_NORM_MOMENTUM;
use clfseg_core::graph::BatchStats;
use clfseg_core::{ClfSeg, Forward, Mode, ParamStore, Tensor};
use clfseg_data::io::{self, MaskKind};
use clfseg_data::{augment, epoch_order, split, stack_batch, synth, Sample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{io_err, HarnessError, Result};
use crate::eval::evaluate;
use crate::optim::{rmsprop_step, RmsState};

pub const LOG_FILE: &str = "train.log";
pub const LOG_HEADER: &str = "epoch\ttrain_loss\tval_dsc\tval_iou";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const SPLIT_FILE: &str = "split.txt";

const AUGMENT_SALT: u64 = 0x6175_676d_656e_7400;

pub struct Datasets {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    /// Split manifest when the data came from a directory.
    pub split: Option<clfseg_data::Split>,
}

/// Averages RGB down to one channel when the network expects grey input.
fn match_channels(mut s: Sample, channels: usize) -> Sample {
    if channels == 1 && s.channels() == 3 {
        let sh = s.image.shape().to_vec();
        let data = s.image.data().chunks(3).map(|p| p.iter().sum::<f64>() / 3.0).collect();
        s.image = Tensor::new(&[sh[0], sh[1], 1], data).expect("grey buffer");
    }
    s
}

/// Training and validation samples described by `cfg`.
pub fn load_datasets(cfg: &TrainConfig) -> Result<Datasets> {
    let size = (cfg.height, cfg.width);
    match &cfg.data_dir {
        Some(dir) => {
            let all = io::load_dir(dir, size, cfg.in_channels, MaskKind::from_classes(cfg.classes))?;
            let ids: Vec<String> = all.iter().map(|s| s.id.clone()).collect();
            let sp = split(&ids, &cfg.split_spec())?;
            let pick = |names: &[String]| -> Vec<Sample> {
                all.iter().filter(|s| names.contains(&s.id)).cloned().collect()
            };
            let (train, val) = (pick(&sp.train), pick(&sp.val));
            if train.is_empty() {
                return Err(HarnessError::EmptyDataset);
            }
            Ok(Datasets { train, val, split: Some(sp) })
        }
        None => {
            if cfg.height != cfg.width || cfg.classes != 1 {
                return Err(HarnessError::Invalid(
                    "the synthetic task needs a square, single-class network".into(),
                ));
            }
            let gen = |i| match_channels(synth::synth_sample(i, cfg.height, cfg.synth_seed, cfg.synth_difficulty), cfg.in_channels);
            let n = cfg.synth_count;
            Ok(Datasets {
                train: (0..n).map(gen).collect(),
                val: (n..n + cfg.synth_val_count).map(gen).collect(),
                split: None,
            })
        }
    }
}

/// Model, parameters and optimizer state of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ClfSeg,
    pub params: ParamStore,
    pub optimizer: RmsState,
    pub epoch: u64,
    pub step: u64,
    pub best_val_dsc: f64,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = ClfSeg::new(config.network())?;
        let params = model.init_params(config.seed);
        Ok(Self {
            config: config.clone(),
            model,
            params,
            optimizer: RmsState::new(),
            epoch: 0,
            step: 0,
            best_val_dsc: f64::NEG_INFINITY,
        })
    }

    pub fn from_checkpoint(config: &TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        ckpt.check_network(&config.network())?;
        Ok(Self {
            config: config.clone(),
            model: ClfSeg::new(ckpt.network)?,
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            epoch: ckpt.epoch,
            step: ckpt.step,
            best_val_dsc: ckpt.best_val_dsc,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: self.model.config().clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            step: self.step,
            best_val_dsc: self.best_val_dsc,
        }
    }

    /// One optimizer step on a batch; returns the loss before the update.
    /// A non-finite loss leaves the parameters untouched.
    pub fn step(&mut self, images: Tensor, masks: Tensor) -> Result<f64> {
        let classes = self.model.config().classes;
        let loss_cfg = self.config.loss_config();
        let (loss, grads, stats) = {
            let mut f = Forward::new(&self.params, Mode::Train);
            let x = f.input(images);
            let t = f.input(masks);
            let logits = self.model.logits(&mut f, x)?;
            let loss = loss_cfg.from_logits(&mut f.graph, logits, t, classes)?;
            let value = f.value(loss).item();
            if !value.is_finite() {
                return Err(HarnessError::NonFiniteLoss {
                    loss: value,
                    epoch: self.epoch,
                    step: self.step,
                });
            }
            let g = f.graph.backward(loss)?;
            (value, f.param_grads(&g), f.batch_stats().to_vec())
        };
        let c = &self.config;
        rmsprop_step(&mut self.params, &grads, &mut self.optimizer, c.learning_rate, c.rmsprop_decay, c.rmsprop_eps)?;
        self.params.apply_batch_stats(&stats, BATCH_NORM_MOMENTUM)?;
        self.step += 1;
        Ok(loss)
    }
}

/// Sets every batch-norm running mean and variance to the average of its
/// batch statistics over `samples`, visited in order in batches of
/// `batch_size`.
pub fn refresh_batch_norm(model: &ClfSeg, params: &mut ParamStore, samples: &[Sample], batch_size: usize) -> Result<()> {
    let mut acc: Vec<(String, BatchStats)> = Vec::new();
    let mut batches = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let idx: Vec<usize> = (0..chunk.len()).collect();
        let (x, _) = stack_batch(chunk, &idx)?;
        let mut f = Forward::new(params, Mode::Train);
        let xv = f.input(x);
        model.logits(&mut f, xv)?;
        let stats = f.batch_stats();
        if acc.is_empty() {
            acc = stats
                .iter()
                .map(|(n, s)| {
                    let zero = BatchStats {
                        mean: vec![0.0; s.mean.len()],
                        var: vec![0.0; s.var.len()],
                    };
                    (n.clone(), zero)
                })
                .collect();
        }
        for ((_, a), (_, s)) in acc.iter_mut().zip(stats) {
            a.mean.iter_mut().zip(&s.mean).for_each(|(x, y)| *x += y);
            a.var.iter_mut().zip(&s.var).for_each(|(x, y)| *x += y);
        }
        batches += 1;
    }
    let n = batches.max(1) as f64;
    for (_, a) in &mut acc {
        a.mean.iter_mut().chain(a.var.iter_mut()).for_each(|v| *v /= n);
    }
    Ok(params.apply_batch_stats(&acc, 0.0)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_dsc: Option<f64>,
    pub val_iou: Option<f64>,
}

impl LogRow {
    pub fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
        format!("{}\t{}\t{}\t{}", self.epoch, self.train_loss, opt(self.val_dsc), opt(self.val_iou))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Progress {
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub best: Checkpoint,
    pub log: Vec<LogRow>,
    /// The observer asked to stop before the configured end.
    pub interrupted: bool,
}

fn augment_rng(seed: u64, epoch: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ AUGMENT_SALT);
    rng.set_stream((epoch << 32) | index as u64);
    rng
}

/// Batches of one epoch in visiting order, augmented when enabled.
pub fn epoch_batches(cfg: &TrainConfig, train: &[Sample], epoch: u64) -> Vec<Vec<Sample>> {
    let order = epoch_order(train.len(), cfg.seed, epoch);
    order
        .chunks(cfg.batch_size)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment::augment(&train[i], &mut augment_rng(cfg.seed, epoch, i))
                    } else {
                        train[i].clone()
                    }
                })
                .collect()
        })
        .collect()
}

fn append_log(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    writeln!(f, "{line}").map_err(io_err(path))
}

/// Runs the configured number of epochs (or until `max_steps`, or until the
/// observer stops it). With `out_dir`, appends one log row per epoch and
/// writes `last.ckpt` after every epoch and `best.ckpt` whenever validation
/// Dice improves.
pub fn train(
    cfg: &TrainConfig,
    data: &Datasets,
    out_dir: Option<&Path>,
    resume: Option<Checkpoint>,
    observer: &mut dyn FnMut(&Progress) -> Control,
) -> Result<TrainOutcome> {
    if data.train.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let mut trainer = match resume {
        Some(c) => Trainer::from_checkpoint(cfg, c)?,
        None => Trainer::new(cfg)?,
    };
    let log_path: Option<PathBuf> = out_dir.map(|d| d.join(LOG_FILE));
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let log = dir.join(LOG_FILE);
        if trainer.epoch == 0 || !log.exists() {
            fs::write(&log, format!("{LOG_HEADER}\n")).map_err(io_err(&log))?;
        }
        cfg.save(&dir.join("config.toml"))?;
        if let Some(sp) = &data.split {
            sp.write_manifest(&dir.join(SPLIT_FILE))?;
        }
    }
    let mut best = trainer.checkpoint();
    let mut log = Vec::new();
    let mut interrupted = false;
    let limit = |t: &Trainer| cfg.max_steps > 0 && t.step >= cfg.max_steps;

    while trainer.epoch < cfg.epochs && !limit(&trainer) && !interrupted {
        let epoch = trainer.epoch;
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in epoch_batches(cfg, &data.train, epoch) {
            let idx: Vec<usize> = (0..batch.len()).collect();
            let (x, y) = stack_batch(&batch, &idx)?;
            let loss = trainer.step(x, y)?;
            total += loss;
            batches += 1;
            let p = Progress {
                epoch,
                step: trainer.step,
                loss,
            };
            if observer(&p) == Control::Stop {
                interrupted = true;
                break;
            }
            if limit(&trainer) {
                break;
            }
        }
        trainer.epoch += 1;
        if cfg.bn_refresh {
            refresh_batch_norm(&trainer.model, &mut trainer.params, &data.train, cfg.batch_size)?;
        }
        let (val_dsc, val_iou) = if data.val.is_empty() {
            (None, None)
        } else {
            let r = evaluate(&trainer.model, &trainer.params, &data.val)?;
            (Some(r.summary.dsc), Some(r.summary.iou))
        };
        let improved = match val_dsc {
            Some(d) => d > trainer.best_val_dsc,
            None => true,
        };
        if let Some(d) = val_dsc {
            trainer.best_val_dsc = trainer.best_val_dsc.max(d);
        }
        let row = LogRow {
            epoch,
            train_loss: total / batches.max(1) as f64,
            val_dsc,
            val_iou,
        };
        if let Some(path) = &log_path {
            append_log(path, &row.to_line())?;
        }
        log.push(row);
        let ckpt = trainer.checkpoint();
        if improved {
            best = ckpt.clone();
            if let Some(dir) = out_dir {
                best.save(&dir.join(BEST_CKPT))?;
            }
        }
        if let Some(dir) = out_dir {
            ckpt.save(&dir.join(LAST_CKPT))?;
        }
    }
    Ok(TrainOutcome {
        trainer,
        best,
        log,
        interrupted,
    })
}

/// Log rows as the text written to `train.log`.
pub fn log_text(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.to_line());
    }
    s
}
