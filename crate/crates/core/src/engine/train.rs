//! Epoch loop with seeded shuffling, gradient accumulation and a cosine schedule.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{Optimizer, OptimizerKind};
use super::schedule::cosine_lr;
use crate::error::{QuanError, Result};
use crate::layers::{ActivationKind, ConvMode, Param};
use crate::losses::LossWeights;
use crate::mapping::MappingStrategy;
use crate::scalar::Real;

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,lr,seconds";

/// Sums over the samples of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    pub loss_sum: f64,
    /// Correct predictions, or any per-sample score in `[0, 1]`.
    pub metric_sum: f64,
    pub count: usize,
}

impl BatchStats {
    pub fn add(&mut self, o: BatchStats) {
        self.loss_sum += o.loss_sum;
        self.metric_sum += o.metric_sum;
        self.count += o.count;
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.count.max(1) as f64
    }

    pub fn mean_metric(&self) -> f64 {
        self.metric_sum / self.count.max(1) as f64
    }
}

/// A model together with its objective.
pub trait Trainable<D: ?Sized> {
    type Elem: Real;

    fn samples(data: &D) -> usize;

    /// Forward pass over `indices`; when `train` is set, also backpropagates
    /// the batch-mean loss into the parameter gradients.
    fn run_batch(&mut self, data: &D, indices: &[usize], train: bool, rng: &mut ChaCha8Rng) -> Result<BatchStats>;

    fn params_mut(&mut self) -> Vec<&mut Param<Self::Elem>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub accumulate: usize,
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub min_lr: f64,
    /// Overrides the optimizer's default decay.
    pub weight_decay: Option<f64>,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub mapping: MappingStrategy,
    pub activation: ActivationKind,
    pub mode: ConvMode,
    /// Writes wall-clock seconds; when off the column is 0 so runs compare byte-for-byte.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            accumulate: 1,
            optimizer: OptimizerKind::SgdMomentum,
            base_lr: 0.1,
            min_lr: 0.0,
            weight_decay: None,
            seed: 0,
            loss_weights: LossWeights::default(),
            mapping: MappingStrategy::Poincare,
            activation: ActivationKind::Silu,
            mode: ConvMode::Separable,
            record_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(QuanError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.accumulate == 0 {
            return Err(QuanError::Config("batch_size and accumulate must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(QuanError::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(QuanError::Config(format!("min_lr must lie in [0, base_lr], got {}", self.min_lr)));
        }
        if let Some(wd) = self.weight_decay {
            if !(wd >= 0.0 && wd.is_finite()) {
                return Err(QuanError::Config(format!("weight_decay must be non-negative, got {wd}")));
            }
        }
        self.loss_weights.validate()
    }

    pub fn build_optimizer(&self) -> Optimizer {
        let mut opt = Optimizer::with_defaults(self.optimizer, self.base_lr);
        if let Some(wd) = self.weight_decay {
            opt.set_weight_decay(wd);
        }
        opt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.split, self.loss, self.accuracy, self.lr, self.seconds
        )
    }
}

/// Collects epoch records and optionally appends them to a CSV file.
pub struct MetricsSink {
    out: Option<(PathBuf, BufWriter<File>)>,
    pub records: Vec<EpochMetrics>,
}

impl MetricsSink {
    pub fn memory() -> Self {
        MetricsSink {
            out: None,
            records: Vec::new(),
        }
    }

    /// Creates (or truncates) `path` and writes the header row.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| QuanError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{METRICS_HEADER}").map_err(|e| QuanError::io(&path, e))?;
        w.flush().map_err(|e| QuanError::io(&path, e))?;
        Ok(MetricsSink {
            out: Some((path, w)),
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, m: EpochMetrics) -> Result<()> {
        if let Some((path, w)) = &mut self.out {
            writeln!(w, "{}", m.csv_row())
                .and_then(|_| w.flush())
                .map_err(|e| QuanError::io(&*path, e))?;
        }
        self.records.push(m);
        Ok(())
    }
}

/// Evaluates `model` over all of `data` in order.
pub fn evaluate<D: ?Sized, M: Trainable<D>>(model: &mut M, data: &D, batch_size: usize) -> Result<BatchStats> {
    let n = M::samples(data);
    let order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = BatchStats::default();
    for chunk in order.chunks(batch_size.max(1)) {
        total.add(model.run_batch(data, chunk, false, &mut rng)?);
    }
    Ok(total)
}

fn finite(stats: &BatchStats, what: &str) -> Result<()> {
    if !stats.mean_loss().is_finite() {
        return Err(QuanError::Numeric(format!("{what} loss became non-finite")));
    }
    Ok(())
}

/// Trains for `cfg.epochs` epochs. The sample order of epoch `e` is a pure
/// function of `(cfg.seed, e)`.
pub fn train_epochs<D: ?Sized, M: Trainable<D>>(
    model: &mut M,
    train: &D,
    eval: Option<&D>,
    cfg: &TrainConfig,
    sink: &mut MetricsSink,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let n = M::samples(train);
    if n == 0 {
        return Err(QuanError::Config("training set is empty".into()));
    }
    let micro_batches = n.div_ceil(cfg.batch_size);
    let steps_per_epoch = micro_batches.div_ceil(cfg.accumulate);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = cfg.build_optimizer();
    let mut step = 0usize;
    let mut history = Vec::new();
    for p in model.params_mut() {
        p.zero_grad();
    }

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle.set_stream(2 * epoch as u64);
        order.shuffle(&mut shuffle);
        let mut aug = ChaCha8Rng::seed_from_u64(cfg.seed);
        aug.set_stream(2 * epoch as u64 + 1);

        let epoch_lr = cosine_lr(step.min(total_steps), total_steps, cfg.base_lr, cfg.min_lr)?;
        let mut stats = BatchStats::default();
        let mut pending = 0usize;
        let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (i, chunk) in chunks.iter().enumerate() {
            stats.add(model.run_batch(train, chunk, true, &mut aug)?);
            pending += 1;
            if pending == cfg.accumulate || i + 1 == chunks.len() {
                let mut params = model.params_mut();
                if pending > 1 {
                    let s = 1.0 / pending as f64;
                    for p in params.iter_mut() {
                        p.grad.iter_mut().for_each(|g| *g *= s);
                    }
                }
                opt.set_lr(cosine_lr(step, total_steps, cfg.base_lr, cfg.min_lr)?);
                opt.step(&mut params)?;
                for p in params.iter_mut() {
                    p.zero_grad();
                }
                step += 1;
                pending = 0;
            }
        }
        finite(&stats, "training")?;
        let seconds = |t: Instant| if cfg.record_time { t.elapsed().as_secs_f64() } else { 0.0 };
        let rec = EpochMetrics {
            epoch: epoch + 1,
            split: Split::Train,
            loss: stats.mean_loss(),
            accuracy: stats.mean_metric(),
            lr: epoch_lr,
            seconds: seconds(start),
        };
        sink.push(rec)?;
        history.push(rec);

        if let Some(data) = eval {
            let t = Instant::now();
            let s = evaluate(model, data, cfg.batch_size)?;
            finite(&s, "evaluation")?;
            let rec = EpochMetrics {
                epoch: epoch + 1,
                split: Split::Eval,
                loss: s.mean_loss(),
                accuracy: s.mean_metric(),
                lr: epoch_lr,
                seconds: seconds(t),
            };
            sink.push(rec)?;
            history.push(rec);
        }
    }
    Ok(history)
}
