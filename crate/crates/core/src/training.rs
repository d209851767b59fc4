//! Optimizers, learning-rate schedules, and the training procedures.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Augment, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::fpenv::FlushSubnormals;
use crate::model::{Mode, Model, ParamKind};
use crate::pruning::{apply_mask_zero, compact, PruneMask};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd { lr, momentum: 0.9 }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => *lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    Multistep { milestones: Vec<usize>, decay: f64 },
    Cosine { lr_min: f64 },
}

/// Learning rate for `epoch` (0-based) of a run of `total` epochs.
pub fn schedule_lr(schedule: &Schedule, base: f64, epoch: usize, total: usize) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::Multistep { milestones, decay } => {
            let passed = milestones.iter().filter(|&&m| epoch >= m).count();
            base * decay.powi(passed as i32)
        }
        Schedule::Cosine { lr_min } => {
            let t = epoch.min(total) as f64 / total.max(1) as f64;
            lr_min + 0.5 * (base - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub seed: u64,
    /// L2 penalty on convolution and linear weights; never on slopes.
    pub weight_decay: f64,
    /// Train the slopes only.
    pub freeze_weights: bool,
    pub augment: Augment,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Input("epochs and batch size must be at least 1".into()));
        }
        if self.optimizer.lr().is_nan() || self.optimizer.lr() <= 0.0 {
            return Err(Error::Input(format!("learning rate {} must be positive", self.optimizer.lr())));
        }
        if let Schedule::Multistep { milestones, .. } = &self.schedule {
            if milestones.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Input(format!("milestones {milestones:?} must increase strictly")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Input("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    /// Validation accuracy before the first update.
    pub initial_val_acc: Option<f64>,
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    /// CSV with header `epoch,lr,train_loss,train_acc,val_acc`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        if self.records.is_empty() {
            w.write_record(["epoch", "lr", "train_loss", "train_acc", "val_acc"])
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }
}

struct Optimizer {
    cfg: OptimizerConfig,
    weight_decay: f64,
    step: u64,
    first: HashMap<String, Vec<f32>>,
    second: HashMap<String, Vec<f32>>,
}

impl Optimizer {
    fn new(cfg: &OptimizerConfig, weight_decay: f64) -> Self {
        Optimizer {
            cfg: cfg.clone(),
            weight_decay,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    fn begin_step(&mut self) {
        self.step += 1;
    }

    fn update(&mut self, name: &str, kind: ParamKind, value: &mut Tensor, grad: &Tensor, lr: f64) {
        let wd = if kind == ParamKind::Weight { self.weight_decay as f32 } else { 0.0 };
        let n = value.numel();
        let lr = lr as f32;
        match self.cfg {
            OptimizerConfig::Sgd { momentum, .. } => {
                let m = momentum as f32;
                let buf = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                for ((p, &g), v) in value.data_mut().iter_mut().zip(grad.data()).zip(buf.iter_mut()) {
                    let g = g + wd * *p;
                    *v = m * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                let (b1, b2, eps) = (beta1 as f32, beta2 as f32, eps as f32);
                let c1 = 1.0 - (beta1 as f32).powi(self.step as i32);
                let c2 = 1.0 - (beta2 as f32).powi(self.step as i32);
                let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                for (((p, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let g = g + wd * *p;
                    *mi = b1 * *mi + (1.0 - b1) * g;
                    *vi = b2 * *vi + (1.0 - b2) * g * g;
                    let mhat = *mi / c1;
                    let vhat = *vi / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

fn full_trainable(kind: ParamKind) -> bool {
    !kind.is_buffer()
}

fn slopes_trainable(kind: ParamKind) -> bool {
    kind == ParamKind::Slope
}

/// Fraction of correctly classified samples, eval-mode batch norm.
pub fn accuracy(model: &Model, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = ds.batch(chunk);
        let logits = model.predict(&x)?;
        correct += count_correct(&logits, &y);
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Seed for the shuffle and augmentation draws of one epoch.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn run(
    model: &mut Model,
    train_set: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    trainable: &dyn Fn(ParamKind) -> bool,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<RunLog> {
    cfg.validate()?;
    let _ftz = FlushSubnormals::enable();
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut log = RunLog {
        initial_val_acc: match val {
            Some(v) => Some(accuracy(model, v, 500)?),
            None => None,
        },
        records: Vec::new(),
    };
    let mut opt = Optimizer::new(&cfg.optimizer, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = schedule_lr(&cfg.schedule, cfg.optimizer.lr(), epoch, cfg.epochs);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0f64, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (mut x, y) = train_set.batch(chunk);
            if cfg.augment != Augment::None {
                x = augment(&x, cfg.augment, epoch_seed(cfg.seed, epoch) ^ (bi as u64) << 20)?;
            }
            let mut g = Graph::new();
            let input = g.constant(x);
            let fw = model.forward(&mut g, input, Mode::Train, trainable)?;
            let loss = g.softmax_cross_entropy(fw.logits, &y)?;
            let lv = g.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Divergence { epoch: epoch + 1, loss: lv });
            }
            loss_sum += lv * chunk.len() as f64;
            correct += count_correct(g.value(fw.logits), &y);
            g.backward(loss)?;
            opt.begin_step();
            for p in model.params_mut() {
                if !trainable(p.kind) {
                    continue;
                }
                if let Some(&v) = fw.vars.get(&p.name) {
                    let grad = g.grad_or_zeros(v);
                    opt.update(&p.name, p.kind, &mut p.value, &grad, lr);
                }
            }
            model.update_running_stats(&fw.bn_stats)?;
        }
        let val_acc = match val {
            Some(v) => Some(accuracy(model, v, 500)?),
            None => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
        };
        progress(&record);
        log.records.push(record);
    }
    Ok(log)
}

/// Minimizes cross-entropy over weights, biases, slopes and BN affine
/// parameters (slopes only when `cfg.freeze_weights`).
pub fn train(model: &mut Model, train_set: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<RunLog> {
    train_with_progress(model, train_set, val, cfg, &mut |_| {})
}

/// [`train`], calling `progress` after every epoch.
pub fn train_with_progress(
    model: &mut Model,
    train_set: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<RunLog> {
    if cfg.freeze_weights {
        if model.spec().rrelu_layers().is_empty() {
            return Err(Error::Contract("slopes-only training needs rotated-ReLU layers".into()));
        }
        return run(model, train_set, val, cfg, &slopes_trainable, progress);
    }
    run(model, train_set, val, cfg, &full_trainable, progress)
}

/// Updates only the slopes; batch-norm running statistics still track the data.
pub fn train_slopes_only(
    model: &mut Model,
    train_set: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<RunLog> {
    if model.spec().rrelu_layers().is_empty() {
        return Err(Error::Contract("slopes-only training needs rotated-ReLU layers".into()));
    }
    run(model, train_set, val, cfg, &slopes_trainable, &mut |_| {})
}

/// Coarse-feature training: slopes only, prune `|b| < gamma`, then train the
/// compacted network fully.
pub fn two_step_coarse(
    model: &Model,
    train_set: &Dataset,
    val: Option<&Dataset>,
    cfg1: &TrainConfig,
    cfg2: &TrainConfig,
    gamma: f32,
) -> Result<(Model, RunLog, RunLog)> {
    let mut step1 = model.clone();
    let log1 = train_slopes_only(&mut step1, train_set, val, cfg1)?;
    let mask = PruneMask::from_threshold(&step1, gamma);
    let zeroed = apply_mask_zero(&step1, &mask)?;
    let mut pruned = compact(&zeroed, &mask)?;
    let log2 = train(&mut pruned, train_set, val, &TrainConfig { freeze_weights: false, ..cfg2.clone() })?;
    Ok((pruned, log1, log2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        let cos = Schedule::Cosine { lr_min: 0.001 };
        assert_eq!(schedule_lr(&cos, 0.1, 0, 10), 0.1);
        assert!((schedule_lr(&cos, 0.1, 10, 10) - 0.001).abs() < 1e-15);
        let ms = Schedule::Multistep {
            milestones: vec![2, 4],
            decay: 0.1,
        };
        assert!((schedule_lr(&ms, 0.1, 3, 10) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            optimizer: OptimizerConfig::sgd(0.1),
            schedule: Schedule::Multistep {
                milestones: vec![3, 3],
                decay: 0.1,
            },
            seed: 0,
            weight_decay: 0.0,
            freeze_weights: false,
            augment: Augment::None,
        };
        assert!(cfg.validate().is_err());
        cfg.schedule = Schedule::Constant;
        assert!(cfg.validate().is_ok());
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
    }
}
