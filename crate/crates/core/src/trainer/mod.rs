//! Autoregressive fine-tuning: batching, masked loss, AdamW with a
//! warm-restart cosine schedule, metrics logging and resumable checkpoints.

mod config;
mod optim;

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use config::{Method, ModelShape, TrainConfig, MAX_EPOCHS};
pub use optim::{lr_at, AdamW};

use crate::error::{Error, Result};
use crate::evalkit::{accuracy, EvalOptions};
use crate::model::{read_checkpoint, write_checkpoint, Forward, Model};
use crate::tasks::{sample_rng, Sample, Vocab, PAD};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Keeps the shuffle stream apart from the model-init stream of one seed.
const SHUFFLE_SALT: u64 = 0x5eed_5bff_1e00_0000;

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch}.ckpt")
}

/// Right-padded next-token batch. Inputs drop each row's last token; the
/// target at position `i` is token `i + 1`, counted only on completion tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn new(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::param("empty batch"));
        }
        let seq = samples
            .iter()
            .map(|s| s.prompt_ids.len() + s.completion_ids.len())
            .max()
            .unwrap_or(0)
            - 1;
        if seq == 0 {
            return Err(Error::param("batch rows need at least two tokens"));
        }
        let n = samples.len() * seq;
        let (mut inputs, mut targets, mut mask) = (vec![PAD; n], vec![PAD; n], vec![false; n]);
        for (r, s) in samples.iter().enumerate() {
            let ids = s.ids();
            let lm = s.loss_mask();
            for i in 0..ids.len() - 1 {
                inputs[r * seq + i] = ids[i];
                targets[r * seq + i] = ids[i + 1];
                mask[r * seq + i] = lm[i + 1];
            }
        }
        Ok(Batch {
            rows: samples.len(),
            seq,
            inputs,
            targets,
            mask,
        })
    }
}

/// Position within a run, stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainState {
    config: TrainConfig,
    step: usize,
    epoch: usize,
    batch: usize,
    adam_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f32,
    pub lr: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub last_loss: Option<f32>,
    /// Validation accuracy after each completed epoch of this invocation.
    pub val_acc: Vec<f64>,
    /// Set when the run stopped early at the requested step.
    pub interrupted: bool,
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    opt: AdamW,
    vocab: Vocab,
    step: usize,
    epoch: usize,
    batch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let vocab = Vocab::standard();
        let model = cfg.build_model(vocab.len())?;
        Self::with_model(cfg, model)
    }

    pub fn with_model(cfg: TrainConfig, model: Model) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            opt: AdamW::from_config(&cfg),
            cfg,
            model,
            vocab: Vocab::standard(),
            step: 0,
            epoch: 0,
            batch: 0,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ck = read_checkpoint(path)?;
        let state: TrainState = ck
            .train
            .ok_or_else(|| Error::State(format!("{} holds no training state", path.display())))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| Error::Format {
                    path: path.display().to_string(),
                    msg: format!("training state: {e}"),
                })
            })?;
        let mut t = Self::with_model(state.config, ck.model)?;
        t.opt.restore(state.adam_steps, t.model.params(), &ck.extra)?;
        t.step = state.step;
        t.epoch = state.epoch;
        t.batch = state.batch;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One forward, backward and update at the scheduled learning rate.
    /// Returns the loss before the update.
    pub fn train_step(&mut self, samples: &[&Sample]) -> Result<f32> {
        let lr = lr_at(self.step, &self.cfg);
        let batch = Batch::new(samples)?;
        let diverged = |step, max_grad, cause: String| Error::Diverged {
            step,
            lr,
            max_grad,
            cause,
        };
        let mut fw = Forward::new(&self.model, batch.rows, true)?;
        let logits = match fw.run(&batch.inputs, batch.seq) {
            Err(Error::NonFinite { op }) => return Err(diverged(self.step, f32::NAN, format!("{op} in forward pass"))),
            other => other?,
        };
        let loss = fw.tape_mut().cross_entropy(logits, &batch.targets, &batch.mask)?;
        let value = fw.tape().value(loss).data()[0];
        if !value.is_finite() {
            return Err(diverged(self.step, f32::NAN, format!("loss is {value}")));
        }
        let (grads, vars) = fw.into_gradients(loss)?;
        let params = self.model.params_mut();
        params.zero_grad();
        params.absorb(&grads, &vars)?;
        drop(grads);

        let (mut sq, mut max_grad) = (0.0f64, 0.0f32);
        for (_, p) in params.iter() {
            for &g in p.tensor.grad().unwrap_or(&[]) {
                sq += f64::from(g) * f64::from(g);
                max_grad = max_grad.max(g.abs());
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(diverged(self.step, max_grad, "non-finite gradient".into()));
        }
        let scale = if norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        self.opt.update(params, lr, scale);
        params.zero_grad();
        self.step += 1;
        Ok(value)
    }

    /// Accuracy on `val` (truncated to `val_limit`) at the configured
    /// temperature.
    pub fn val_accuracy(&self, val: &[Sample]) -> Result<f64> {
        let n = if self.cfg.val_limit == 0 {
            val.len()
        } else {
            val.len().min(self.cfg.val_limit)
        };
        let opts = EvalOptions {
            temperature: self.cfg.val_temperature,
            seed: self.cfg.seed,
        };
        accuracy(&self.model, &val[..n], &self.vocab, &opts)
    }

    /// Sample order for `epoch`, a pure function of seed and epoch.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut sample_rng(self.cfg.seed ^ SHUFFLE_SALT, epoch as u64));
        order
    }

    /// Write model, optimizer moments and run position.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let state = TrainState {
            config: self.cfg.clone(),
            step: self.step,
            epoch: self.epoch,
            batch: self.batch,
            adam_steps: self.opt.steps(),
        };
        let value = serde_json::to_value(&state).map_err(|e| Error::State(e.to_string()))?;
        write_checkpoint(
            path,
            &self.model,
            Some(&value),
            &self.opt.state_blobs(self.model.params())?,
        )
    }

    /// Train until `cfg.epochs` are done, or until `stop_at` steps when given,
    /// in which case `last.ckpt` is written for a later resume. Metrics go to
    /// `out/metrics.csv`; rows past the current step from an earlier
    /// interrupted run are dropped first.
    pub fn run(&mut self, train: &[Sample], val: &[Sample], out: &Path, stop_at: Option<usize>) -> Result<RunSummary> {
        if train.is_empty() {
            return Err(Error::param("training set is empty"));
        }
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let mut log = MetricsLog::open(&out.join(METRICS_FILE), self.step)?;
        let bs = self.cfg.batch_size;
        let n_batches = train.len().div_ceil(bs);
        let mut summary = RunSummary {
            steps: self.step,
            last_loss: None,
            val_acc: Vec::new(),
            interrupted: false,
        };
        while self.epoch < self.cfg.epochs {
            let order = self.epoch_order(self.epoch, train.len());
            while self.batch < n_batches {
                if stop_at == Some(self.step) {
                    self.save(out.join(LAST_CHECKPOINT))?;
                    summary.steps = self.step;
                    summary.interrupted = true;
                    return Ok(summary);
                }
                let idx = &order[self.batch * bs..((self.batch + 1) * bs).min(train.len())];
                let samples: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
                let step = self.step;
                let lr = lr_at(step, &self.cfg);
                let loss = self.train_step(&samples)?;
                self.batch += 1;
                summary.last_loss = Some(loss);
                let epoch_end = self.batch == n_batches;
                let val_acc = if epoch_end && !val.is_empty() {
                    Some(self.val_accuracy(val)?)
                } else {
                    None
                };
                if let Some(a) = val_acc {
                    summary.val_acc.push(a);
                }
                if epoch_end || step.is_multiple_of(self.cfg.log_every) {
                    log.write(&LogRow {
                        step,
                        epoch: self.epoch,
                        loss,
                        lr,
                        val_acc,
                    })?;
                }
                if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every) {
                    self.save(out.join(LAST_CHECKPOINT))?;
                }
            }
            self.epoch += 1;
            self.batch = 0;
            self.save(out.join(epoch_checkpoint_name(self.epoch)))?;
        }
        summary.steps = self.step;
        Ok(summary)
    }
}

struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl MetricsLog {
    /// Open for appending, keeping only rows logged before `step`.
    fn open(path: &Path, step: usize) -> Result<Self> {
        let kept = if path.exists() { read_log(path)? } else { Vec::new() };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer
            .write_record(["step", "epoch", "loss", "lr", "val_acc"])
            .map_err(|e| log_error(path, e))?;
        let mut log = MetricsLog {
            path: path.to_path_buf(),
            writer,
        };
        for row in kept.iter().filter(|r| r.step < step) {
            log.write(row)?;
        }
        Ok(log)
    }

    fn write(&mut self, row: &LogRow) -> Result<()> {
        self.writer.serialize(row).map_err(|e| log_error(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn log_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Rows of a metrics CSV written by [`Trainer::run`].
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    let path = path.as_ref();
    let file = OpenOptions::new()
        .read(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(|e| log_error(path, e)))
        .collect()
}
