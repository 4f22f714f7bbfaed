//! Mini-batch SGD with momentum, shared-length random crops and a staged
//! learning rate that advances when the epoch loss stops improving.

use std::io::Write;
use std::time::Instant;

use ndtensor::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{crop_or_extend, FrameSequence};
use crate::model::{ModelConfig, Network};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_stages: Vec<f64>,
    /// Inclusive range of crop lengths in frames.
    pub crop_range: [usize; 2],
    pub epochs: usize,
    pub seed: u64,
    /// Relative epoch-loss improvement below which an epoch counts as flat.
    pub plateau_tolerance: f64,
    pub plateau_patience: usize,
    /// Stop early once an epoch's training accuracy reaches this value.
    pub target_train_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_stages: vec![0.1, 0.01, 0.001],
            crop_range: [300, 800],
            epochs: 30,
            seed: 0,
            plateau_tolerance: 0.01,
            plateau_patience: 3,
            target_train_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size < 2 {
            out.push(format!("batch_size = {} (batch norm needs at least 2)", self.batch_size));
        }
        let [lo, hi] = self.crop_range;
        if lo > hi {
            out.push(format!("crop_range [{lo}, {hi}] has min > max"));
        }
        if lo < 8 {
            out.push(format!("crop_range minimum {lo} is below the 8 frames the frontend needs"));
        }
        if self.lr_stages.is_empty() || self.lr_stages.iter().any(|&lr| !(lr > 0.0) || !lr.is_finite()) {
            out.push(format!("lr_stages {:?} must be non-empty and positive", self.lr_stages));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            out.push(format!("weight_decay {} is negative", self.weight_decay));
        }
        if self.epochs == 0 {
            out.push("epochs must be at least 1".into());
        }
        if self.plateau_patience == 0 {
            out.push("plateau_patience must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Velocity buffers plus the learning-rate schedule state.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Real> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Vec<T>>,
    stage: usize,
    n_stages: usize,
    prev_loss: Option<f64>,
    flat_epochs: usize,
    tolerance: f64,
    patience: usize,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        OptimizerState {
            momentum: T::of(cfg.momentum),
            weight_decay: T::of(cfg.weight_decay),
            velocity: store.iter().map(|(_, p)| vec![T::zero(); p.tensor.numel()]).collect(),
            stage: 0,
            n_stages: cfg.lr_stages.len().max(1),
            prev_loss: None,
            flat_epochs: 0,
            tolerance: cfg.plateau_tolerance,
            patience: cfg.plateau_patience.max(1),
        }
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn velocity(&self, index: usize) -> &[T] {
        &self.velocity[index]
    }

    /// Records an epoch-mean loss; returns true when the stage advanced.
    /// Once the last stage is reached it stays there.
    pub fn end_epoch(&mut self, loss: f64) -> bool {
        if let Some(prev) = self.prev_loss {
            let gain = (prev - loss) / prev.abs().max(f64::MIN_POSITIVE);
            if gain < self.tolerance {
                self.flat_epochs += 1;
            } else {
                self.flat_epochs = 0;
            }
        }
        self.prev_loss = Some(loss);
        if self.flat_epochs >= self.patience && self.stage + 1 < self.n_stages {
            self.stage += 1;
            self.flat_epochs = 0;
            return true;
        }
        false
    }
}

/// `v <- mu v + (g + wd p)`, `p <- p - lr v`. Weight decay applies only to
/// parameters of kind `Weight`; buffers are skipped.
pub fn sgd_step<T: Real>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>, lr: T) -> Result<()> {
    for (param, vel) in store.iter().map(|(_, p)| p).zip(&state.velocity) {
        if vel.len() != param.tensor.numel() {
            return Err(Error::Degenerate(format!("velocity of {} has the wrong size", param.name)));
        }
        if let Some(g) = param.tensor.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NanGradient(param.name.clone()));
            }
        }
    }
    let (mu, wd) = (state.momentum, state.weight_decay);
    for (param, vel) in store.iter_mut().zip(state.velocity.iter_mut()) {
        if !param.kind.learnable() {
            continue;
        }
        let decay = if param.kind == crate::params::ParamKind::Weight { wd } else { T::zero() };
        let (p, g) = param.tensor.data_and_grad_mut();
        let Some(g) = g else { continue };
        for ((p, &g), v) in p.iter_mut().zip(g.iter()).zip(vel.iter_mut()) {
            *v = mu * *v + (g + decay * *p);
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// A rectangular batch `[M, 1, D, L]` with its labels.
#[derive(Clone, Debug)]
pub struct Batch<T: Real> {
    pub input: Tensor<T>,
    pub labels: Vec<usize>,
    pub len: usize,
}

/// Crops or extends every selected utterance to one length drawn uniformly
/// from `crop_range`.
pub fn make_batch<T: Real>(
    corpus: &[FrameSequence],
    indices: &[usize],
    crop_range: [usize; 2],
    rng: &mut impl Rng,
) -> Result<Batch<T>> {
    let first = indices.first().ok_or_else(|| Error::EmptyInput("batch with no utterances".into()))?;
    let dim = corpus[*first].dim();
    let len = rng.random_range(crop_range[0]..=crop_range[1]);
    let mut data = Vec::with_capacity(indices.len() * dim * len);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let seq = &corpus[i];
        if seq.dim() != dim {
            return Err(Error::Degenerate(format!(
                "utterance {} has {} coefficients, expected {dim}",
                seq.utterance_id,
                seq.dim()
            )));
        }
        labels.push(seq.label.ok_or_else(|| Error::Unlabelled(seq.utterance_id.clone()))?);
        data.extend(crop_or_extend(seq, len, rng).features().iter().map(|&v| T::of(v as f64)));
    }
    let input = Tensor::new(&[indices.len(), 1, dim, len], data)?;
    Ok(Batch { input, labels, len })
}

/// Shuffled index groups of `batch_size`. A trailing group of one is merged
/// into the previous group so batch norm always sees two samples.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut groups: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
        let tail = groups.pop().unwrap();
        groups.last_mut().unwrap().extend(tail);
    }
    groups
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    pub wall_ms: u64,
}

pub const LOG_HEADER: &str = "epoch,step,lr,loss,train_acc,wall_ms";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.9},{:.6},{}",
            self.epoch, self.step, self.lr, self.loss, self.train_acc, self.wall_ms
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    /// The epoch budget ran out or the accuracy target was met.
    Completed,
    /// A loss or gradient went non-finite; the network is the state before
    /// the offending step.
    Diverged { epoch: usize, step: u64, reason: String },
}

#[derive(Clone, Debug)]
pub struct TrainReport<T: Real> {
    pub network: Network<T>,
    pub history: Vec<EpochRecord>,
    pub outcome: Outcome,
}

/// Index of the largest score per row; ties go to the lower index.
pub(crate) fn argmax_rows<T: Real>(scores: &[T], classes: usize) -> Vec<usize> {
    scores
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// One optimiser step on a batch. Returns the loss and the number of
/// correctly classified samples.
pub fn train_step<T: Real>(
    net: &mut Network<T>,
    opt: &mut OptimizerState<T>,
    batch: &Batch<T>,
    lr: f64,
    anneal_lambda: Option<f64>,
) -> Result<(f64, usize)> {
    net.store.zero_grad();
    let classes = net.config().n_classes;
    let (loss, correct, emb) = {
        let (layers, mut s) = net.train_session();
        let x = s.constant(batch.input.clone());
        let emb = layers.embed_batch(&mut s, x)?;
        let scores = layers.class_scores(&mut s, emb)?;
        let loss = layers.loss(&mut s, emb, &batch.labels, anneal_lambda)?;
        let value = s.tape.value(loss).item()?.to_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(value));
        }
        let predicted = argmax_rows(s.tape.value(scores).data(), classes);
        let correct = predicted.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        s.backward(loss)?;
        (value, correct, s.tape.value(emb).clone())
    };
    sgd_step(&mut net.store, opt, T::of(lr))?;
    net.step_centers(&emb, &batch.labels)?;
    net.project();
    Ok((loss, correct))
}

/// Trains a fresh network on a labelled corpus. Per-epoch rows are written
/// to `log` as CSV when given.
pub fn train<T: Real>(
    corpus: &[FrameSequence],
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport<T>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput("training corpus".into()));
    }
    let mut seen = vec![false; model.n_classes];
    for seq in corpus {
        match seq.label {
            Some(y) if y < model.n_classes => seen[y] = true,
            Some(y) => return Err(Error::LabelOutOfRange { label: y, classes: model.n_classes }),
            None => return Err(Error::Unlabelled(seq.utterance_id.clone())),
        }
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::Degenerate("training corpus needs at least two classes".into()));
    }
    if corpus.len() < 2 {
        return Err(Error::Degenerate("training corpus needs at least two utterances".into()));
    }

    let mut net = Network::<T>::new(model)?;
    let mut opt = OptimizerState::new(&net.store, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();
    let mut history = Vec::new();
    let mut step: u64 = 0;
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io("training log", e))?;
    }

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_stages[opt.stage().min(cfg.lr_stages.len() - 1)];
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for group in epoch_batches(corpus.len(), cfg.batch_size, &mut rng) {
            let batch = make_batch::<T>(corpus, &group, cfg.crop_range, &mut rng)?;
            let good = net.store.clone();
            let anneal = net.layers.anneal_lambda(step);
            match train_step(&mut net, &mut opt, &batch, lr, anneal) {
                Ok((loss, c)) => {
                    loss_sum += loss * group.len() as f64;
                    correct += c;
                    seen += group.len();
                    step += 1;
                }
                Err(e @ (Error::NanGradient(_) | Error::NonFiniteLoss(_))) => {
                    let reason = e.to_string();
                    net.store = good;
                    return Ok(TrainReport { network: net, history, outcome: Outcome::Diverged { epoch, step, reason } });
                }
                Err(e) => return Err(e),
            }
        }
        let record = EpochRecord {
            epoch,
            step,
            lr,
            loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", record.csv_row()).map_err(|e| Error::io("training log", e))?;
        }
        opt.end_epoch(record.loss);
        let done = cfg.target_train_acc.is_some_and(|t| record.train_acc >= t);
        history.push(record);
        if done {
            break;
        }
    }
    Ok(TrainReport { network: net, history, outcome: Outcome::Completed })
}
