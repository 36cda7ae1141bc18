//! SGD training: loss, optimizer, epoch loop, checkpoints and evaluation.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{LayerGraph, Param};
use crate::model::weights::{read_body, write_body, write_record, Reader};
use crate::model::{build_model, Model, ModelSpec};
use crate::tensor::ops::BnMode;
use crate::tensor::{Real, Tensor};

mod config;
pub mod data;

pub use config::{lr_at, Schedule, TrainConfig, CIFAR_MILESTONES, IMAGENET_DECAY};
pub use data::{augment, augment_with, load_cifar, parse_cifar, ChannelStats, CifarKind, Dataset, Split};

/// Mean softmax cross-entropy of `(n, k, 1, 1)` logits, its gradient with
/// respect to the logits, and the number of correct top-1 predictions.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>, usize)> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 || s.n != labels.len() {
        return Err(Error::InvalidShape(format!(
            "logits {s} do not match {} labels",
            labels.len()
        )));
    }
    let k = s.c;
    let mut grad = Vec::with_capacity(s.numel());
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        if label >= k {
            return Err(Error::Training(format!("label {label} outside [0, {k})")));
        }
        let z: Vec<f64> = row.iter().map(|v| v.to_f64().expect("float")).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        loss += sum.ln() + max - z[label];
        let argmax = z
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > z[best] { i } else { best });
        correct += usize::from(argmax == label);
        for (i, &v) in z.iter().enumerate() {
            let p = (v - max).exp() / sum;
            let g = (p - f64::from(u8::from(i == label))) / labels.len() as f64;
            grad.push(T::lit(g));
        }
    }
    let loss = loss / labels.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((loss, Tensor::new(s, grad)?, correct))
}

/// One momentum step on a single parameter:
/// `v ← m·v + (g + wd·p)`, `p ← p − lr·v`. Parameters with `decay == false`
/// skip the weight-decay term.
pub fn sgd_step<T: Real>(param: &mut Param<T>, velocity: &mut Tensor<T>, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if velocity.shape() != param.value.shape() || param.grad.shape() != param.value.shape() {
        return Err(Error::ShapeMismatch {
            context: format!("sgd step on {}", param.name),
            expected: param.value.shape(),
            actual: velocity.shape(),
        });
    }
    if !param.grad.is_finite() {
        return Err(Error::NonFinite(format!("gradient of {}", param.name)));
    }
    let (lr, m) = (T::lit(lr), T::lit(momentum));
    let wd = T::lit(if param.decay { weight_decay } else { 0.0 });
    let p = param.value.data_mut();
    let g = param.grad.data();
    for ((p, v), &g) in p.iter_mut().zip(velocity.data_mut()).zip(g) {
        *v = m * *v + (g + wd * *p);
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Momentum buffers for every parameter of a graph, in visit order.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(graph: &LayerGraph<T>, momentum: f64, weight_decay: f64) -> Self {
        let mut velocity = Vec::new();
        graph.visit_params(&mut |p| velocity.push(Tensor::zeros(p.value.shape())));
        Sgd {
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// Updates every parameter, or none if any gradient is non-finite.
    pub fn step(&mut self, graph: &mut LayerGraph<T>, lr: f64) -> Result<()> {
        let mut bad = None;
        graph.visit_params(&mut |p| {
            if bad.is_none() && !p.grad.is_finite() {
                bad = Some(p.name.clone());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!("gradient of {name}; step skipped")));
        }
        let mut i = 0;
        let mut status = Ok(());
        let (m, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        graph.visit_params_mut(&mut |p| {
            if status.is_ok() {
                status = match velocity.get_mut(i) {
                    Some(v) => sgd_step(p, v, lr, m, wd),
                    None => Err(Error::Training("optimizer state does not match the model".into())),
                };
            }
            i += 1;
        });
        status
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps completed so far, over all epochs.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,step,lr,loss,train_acc,test_acc";

    pub fn csv_row(&self) -> String {
        let test = self.test_acc.map_or(String::new(), |a| format!("{a:.6}"));
        format!(
            "{},{},{},{:.9},{:.6},{}",
            self.epoch, self.step, self.lr, self.loss, self.train_acc, test
        )
    }
}

/// Index batches of one epoch; a pure function of `(seed, epoch)`. A trailing
/// batch of one sample is dropped because batch norm cannot train on it.
pub fn epoch_batches(len: usize, batch: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, u64::MAX)));
    }
    order
        .chunks(batch.max(1))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// SplitMix-style hash of `(seed, epoch, step)` used to seed per-step RNGs.
fn mix(seed: u64, epoch: u64, step: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSCK";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Model, optimizer and position in the run.
#[derive(Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub cfg: TrainConfig,
    pub sgd: Sgd<T>,
    /// Next epoch to run.
    pub epoch: usize,
    pub step: u64,
    pub stats: ChannelStats,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig, stats: ChannelStats) -> Result<Self> {
        cfg.validate()?;
        let sgd = Sgd::new(&model.graph, cfg.momentum, cfg.weight_decay);
        Ok(Trainer {
            model,
            cfg,
            sgd,
            epoch: 0,
            step: 0,
            stats,
        })
    }

    /// Forward, backward and update on one batch.
    pub fn train_step(&mut self, x: &Tensor<T>, labels: &[usize], lr: f64) -> Result<StepStats> {
        self.model.graph.zero_grad();
        let logits = self.model.forward(x, BnMode::Train)?;
        let (loss, grad, correct) = softmax_cross_entropy(&logits, labels)
            .map_err(|e| Error::Training(format!("epoch {} step {}: {e}", self.epoch, self.step)))?;
        self.model.backward(&grad)?;
        self.sgd.step(&mut self.model.graph, lr)?;
        self.step += 1;
        Ok(StepStats {
            loss,
            correct,
            samples: labels.len(),
        })
    }

    /// Runs epoch `self.epoch` over `data` and advances the counter.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        let epoch = self.epoch;
        let lr = lr_at(&self.cfg, epoch);
        let batches = epoch_batches(data.len(), self.cfg.batch_size, self.cfg.seed, epoch, self.cfg.shuffle);
        if batches.is_empty() {
            return Err(Error::Training("dataset too small for one batch".into()));
        }
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for (i, idx) in batches.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, epoch as u64, i as u64));
            let side = data.side;
            let augment_on = self.cfg.augment;
            let (x, labels) = data.batch::<T>(idx, &self.stats, |img| {
                if augment_on {
                    augment(img, side, &mut rng)
                } else {
                    img.to_vec()
                }
            });
            let s = self.train_step(&x, &labels, lr)?;
            loss_sum += s.loss * s.samples as f64;
            correct += s.correct;
            seen += s.samples;
        }
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch,
            step: self.step,
            lr,
            loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc: None,
        })
    }

    /// Trains until `cfg.total_epochs`, evaluating on `test` after each epoch.
    /// With `out_dir`, appends to the metrics CSV and rewrites the checkpoint
    /// after every epoch.
    pub fn run(&mut self, train: &Dataset, test: Option<&Dataset>, out_dir: Option<&Path>) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::new();
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(MetricsLog::open(&dir.join(METRICS_FILE))?)
            }
            None => None,
        };
        while self.epoch < self.cfg.total_epochs {
            let mut m = self.train_epoch(train)?;
            if let Some(test) = test {
                m.test_acc = Some(evaluate(&mut self.model, test, &self.stats, 256)?);
            }
            if let (Some(dir), Some(log)) = (out_dir, log.as_mut()) {
                log.append(&m)?;
                self.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
            }
            history.push(m);
        }
        Ok(history)
    }

    /// `"SSCK" | epoch u32 | step u64 | normalization stats | weights |
    /// velocity records`.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        for v in self.stats.mean.iter().chain(&self.stats.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        write_body(&self.model, &mut out);
        let mut i = 0;
        self.model.graph.visit_params(&mut |p| {
            write_record(&mut out, &format!("{}.velocity", p.name), &p.dims, self.sgd.velocity[i].data());
            i += 1;
        });
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        // Write then rename so an interrupted save keeps the previous file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.checkpoint_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Restores a trainer for `spec` from checkpoint bytes.
    pub fn from_checkpoint(spec: &ModelSpec, cfg: TrainConfig, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let epoch = r.u32()? as usize;
        let step = r.u64()?;
        let mut stats = ChannelStats::IDENTITY;
        for v in stats.mean.iter_mut().chain(stats.std.iter_mut()) {
            *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
        let mut model = build_model(spec, 0)?;
        read_body(&mut model, &mut r)?;
        let mut trainer = Trainer::new(model, cfg, stats)?;
        trainer.epoch = epoch;
        trainer.step = step;
        let mut i = 0;
        let mut status = Ok(());
        let velocity = &mut trainer.sgd.velocity;
        trainer.model.graph.visit_params(&mut |p| {
            if status.is_ok() {
                status = r.record_into(&format!("{}.velocity", p.name), &p.dims, velocity[i].data_mut());
            }
            i += 1;
        });
        status?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(trainer)
    }

    pub fn load_checkpoint(spec: &ModelSpec, cfg: TrainConfig, path: &Path) -> Result<Self> {
        Self::from_checkpoint(spec, cfg, &fs::read(path)?)
    }
}

/// Reads only the model weights out of a checkpoint.
pub fn model_from_checkpoint<T: Real>(spec: &ModelSpec, bytes: &[u8]) -> Result<(Model<T>, ChannelStats)> {
    let t = Trainer::<T>::from_checkpoint(spec, TrainConfig::constant(0.0), bytes)?;
    Ok((t.model, t.stats))
}

/// Append-only metrics CSV; the header is written once.
struct MetricsLog {
    file: fs::File,
}

impl MetricsLog {
    fn open(path: &PathBuf) -> Result<Self> {
        let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "{}", EpochMetrics::CSV_HEADER)?;
        }
        Ok(MetricsLog { file })
    }

    fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(self.file, "{}", m.csv_row())?;
        self.file.flush()?;
        Ok(())
    }
}

/// Top-1 accuracy in inference mode.
pub fn evaluate<T: Real>(model: &mut Model<T>, data: &Dataset, stats: &ChannelStats, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch::<T>(chunk, stats, |b| b.to_vec());
        let logits = model.forward(&x, BnMode::Infer)?;
        correct += predictions(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Arg-max class per sample of `(n, k, 1, 1)` logits.
pub fn predictions<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape().c;
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect()
}
