//! Mini-batch training: softmax cross-entropy, AdamW with decoupled weight
//! decay, per-epoch cosine annealing, global gradient-norm clipping and
//! early stopping on validation loss.
//!
//! All randomness (batch order and dropout) comes from one `ChaCha8Rng`
//! seeded with [`TrainConfig::seed`].

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{BirNetwork, Mode};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const CLIP_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs_max: usize,
    pub batch_size: usize,
    /// Epochs without val-loss improvement before stopping. Must be ≥ 1.
    pub patience: usize,
    pub clip_norm: f64,
    /// Applied to every BIR layer for the duration of training.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            epochs_max: 200,
            batch_size: 64,
            patience: 20,
            clip_norm: 1.0,
            dropout: 0.3,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) {
            return Err(Error::invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!("weight_decay must be ≥ 0, got {}", self.weight_decay)));
        }
        if self.epochs_max == 0 {
            return Err(Error::invalid("epochs_max must be ≥ 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(format!("batch_size must be ≥ 2, got {}", self.batch_size)));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be ≥ 1"));
        }
        if !positive(self.clip_norm) {
            return Err(Error::invalid(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's samples.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_acc);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (m, k) = (logits.rows(), logits.cols());
    if labels.len() != m {
        return Err(Error::DimensionMismatch {
            what: "labels".into(),
            expected: m,
            found: labels.len(),
        });
    }
    if m == 0 {
        return Err(Error::invalid("cross_entropy on an empty batch"));
    }
    let mut grad = Matrix::zeros(m, k);
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[y];
        let g = grad.row_mut(r);
        for (c, gv) in g.iter_mut().enumerate() {
            *gv = (row[c] - lse).exp() / m as f64;
        }
        g[y] -= 1.0 / m as f64;
    }
    Ok((total / m as f64, grad))
}

/// Fraction of rows whose argmax (ties to the lowest index) equals the label.
pub fn batch_accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let hits = (0..logits.rows())
        .filter(|&r| logits.argmax_row(r) == labels[r])
        .count();
    hits as f64 / labels.len() as f64
}

/// Learning rate for 0-based epoch `t` of `total`.
pub fn cosine_lr(base: f64, t: usize, total: usize) -> f64 {
    base * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()) / 2.0
}

/// Scales the gradients in place so their global norm is at most
/// `clip_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut crate::network::Gradients, clip_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip_norm {
        let scale = clip_norm / (norm + CLIP_EPS);
        for s in grads.slices_mut() {
            s.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// AdamW state laid out like [`BirNetwork::params`].
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(net: &BirNetwork, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            weight_decay,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, net: &mut BirNetwork, grads: &crate::network::Gradients, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in net
            .params_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                p[i] = p[i] * decay - lr * update;
            }
        }
    }
}

fn check_split(x: &Matrix, y: &[usize], net: &BirNetwork, what: &'static str) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::invalid(format!("{what} set is empty")));
    }
    if y.len() != x.rows() {
        return Err(Error::DimensionMismatch {
            what,
            expected: x.rows(),
            found: y.len(),
        });
    }
    if x.cols() != net.input_dim {
        return Err(Error::DimensionMismatch {
            what: "feature columns",
            expected: net.input_dim,
            found: x.cols(),
        });
    }
    Ok(())
}

/// Shuffled mini-batches; a trailing batch of one row joins the previous one.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("non-empty") = &order[start..];
    }
    out
}

/// Trains `net` in place and restores the parameters (and BatchNorm running
/// statistics) of the epoch with the lowest validation loss.
pub fn train(
    net: &mut BirNetwork,
    x_train: &Matrix,
    y_train: &[usize],
    x_val: &Matrix,
    y_val: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    net.validate()?;
    check_split(x_train, y_train, net, "train")?;
    check_split(x_val, y_val, net, "validation")?;
    if x_train.rows() < 2 {
        return Err(Error::invalid("training needs at least 2 rows for batch statistics"));
    }
    let k = net.n_classes();
    if let Some(&bad) = y_train.iter().chain(y_val).find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    for l in &mut net.layers {
        l.dropout = cfg.dropout;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(net, cfg.weight_decay);
    let mut order: Vec<usize> = (0..x_train.rows()).collect();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best_loss = f64::INFINITY;
    let mut best_net = net.clone();
    let mut since_best = 0;

    for t in 0..cfg.epochs_max {
        let lr = cosine_lr(cfg.learning_rate, t, cfg.epochs_max);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in batches(&order, cfg.batch_size) {
            let xb = x_train.select_rows(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y_train[i]).collect();
            let (logits, cache) = net.forward(&xb, Mode::Train, &mut rng)?;
            let (loss, d_logits) = cross_entropy(&logits, &yb)?;
            loss_sum += loss * batch.len() as f64;
            let mut grads = net.backward(&cache, &d_logits)?;
            clip_gradients(&mut grads, cfg.clip_norm);
            opt.step(net, &grads, lr);
        }
        let val_logits = net.predict(x_val)?;
        let (val_loss, _) = cross_entropy(&val_logits, y_val)?;
        let record = EpochRecord {
            epoch: t + 1,
            train_loss: loss_sum / x_train.rows() as f64,
            val_loss,
            val_acc: batch_accuracy(&val_logits, y_val),
        };
        history.epochs.push(record);
        if val_loss < best_loss {
            best_loss = val_loss;
            history.best_epoch = t + 1;
            best_net = net.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if history.best_epoch == 0 {
        return Err(Error::invalid("validation loss was never finite"));
    }
    *net = best_net;
    net.trained = true;
    Ok(history)
}
