//! AdamW with cosine decay and linear warmup, mini-batch training, and the
//! learning-rate × dropout sweep.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{
    cross_entropy, dropout_mask, AbmilpParams, EfficientProbeParams, Head, HeadKind, LinearGapParams, Parameters,
    Pooling, ProbeParams, Tokens, DEFAULT_ABMILP_HIDDEN,
};
use crate::rng::{keyed, Stream};

/// Epoch counts for one head; warmup is counted in epochs too.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSchedule {
    pub epochs: usize,
    pub warmup_epochs: usize,
}

/// The `[probe]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr_grid: Vec<f64>,
    pub dropout_grid: Vec<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub linear: HeadSchedule,
    pub abmilp: HeadSchedule,
    pub efficient: HeadSchedule,
    pub abmilp_hidden: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr_grid: vec![1e-2, 1e-3, 1e-4],
            dropout_grid: vec![0.2, 0.4, 0.6],
            weight_decay: 0.001,
            batch_size: 256,
            linear: HeadSchedule {
                epochs: 1000,
                warmup_epochs: 200,
            },
            abmilp: HeadSchedule {
                epochs: 500,
                warmup_epochs: 100,
            },
            efficient: HeadSchedule {
                epochs: 500,
                warmup_epochs: 100,
            },
            abmilp_hidden: DEFAULT_ABMILP_HIDDEN,
        }
    }
}

impl ProbeConfig {
    pub fn schedule(&self, head: HeadKind) -> HeadSchedule {
        match head {
            HeadKind::Linear => self.linear,
            HeadKind::Abmilp => self.abmilp,
            HeadKind::Efficient => self.efficient,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() || self.dropout_grid.is_empty() {
            return Err(Error::Config("probe grids must be non-empty".into()));
        }
        if self.lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.dropout_grid.iter().any(|&p| !(0.0..1.0).contains(&p)) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) || self.batch_size == 0 || self.abmilp_hidden == 0 {
            return Err(Error::Config("weight_decay >= 0, batch_size > 0 and abmilp_hidden > 0 required".into()));
        }
        for h in HeadKind::ALL {
            let s = self.schedule(h);
            if s.epochs == 0 || s.warmup_epochs >= s.epochs {
                return Err(Error::Config(format!("{h}: need 0 <= warmup_epochs < epochs")));
            }
        }
        Ok(())
    }

    /// Single-cell config for one grid point.
    pub fn train_config(&self, head: HeadKind, base_lr: f64, dropout: f64, seed: u64) -> TrainConfig {
        let s = self.schedule(head);
        TrainConfig {
            head,
            base_lr,
            dropout,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: s.epochs,
            warmup_epochs: s.warmup_epochs,
            abmilp_hidden: self.abmilp_hidden,
            pooling: Pooling::Gap,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub head: HeadKind,
    pub base_lr: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub abmilp_hidden: usize,
    /// Only read by the linear head.
    pub pooling: Pooling,
    pub seed: u64,
}

/// Learning rate at `step`: linear ramp to `base_lr` over `warmup` steps, then
/// half-cosine decay to 0 at `total`.
pub fn cosine_lr(step: usize, warmup: usize, total: usize, base_lr: f64) -> Result<f64> {
    if warmup >= total || step > total {
        return Err(Error::invalid(format!(
            "schedule needs step {step} <= total {total} and warmup {warmup} < total"
        )));
    }
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// AdamW state: first and second moments per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Decoupled decay `p ← p − lr·wd·p`, then the bias-corrected Adam update.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64, weight_decay: f64) -> Result<()> {
        let gs = grads.tensors();
        let mut ps = params.tensors_mut();
        if ps.len() != self.m.len() || gs.len() != ps.len() || ps.iter().zip(&gs).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::ShapeMismatch("gradient and parameter tensors differ".into()));
        }
        if ps.iter().zip(&self.m).any(|(p, m)| p.len() != m.len()) {
            return Err(Error::ShapeMismatch("optimizer state belongs to other parameters".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, p) in ps.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], gs[k]);
            for i in 0..p.len() {
                p[i] -= lr * weight_decay * p[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Tokens and labels of one fold.
#[derive(Debug, Clone, Default)]
pub struct Fold {
    pub tokens: Vec<Tokens>,
    pub labels: Vec<usize>,
}

impl Fold {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, tokens: Tokens, label: usize) {
        self.tokens.push(tokens);
        self.labels.push(label);
    }
}

#[derive(Debug, Clone, Default)]
pub struct Folds {
    pub train: Fold,
    pub val: Fold,
    pub test: Fold,
}

impl Folds {
    fn check(&self) -> Result<usize> {
        for (name, f) in [("train", &self.train), ("val", &self.val)] {
            if f.is_empty() {
                return Err(Error::EmptyFold(name));
            }
        }
        Ok(self.train.tokens[0].dim())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResult {
    pub config: TrainConfig,
    /// Parameters at the best validation epoch.
    #[serde(skip)]
    pub params: Option<ProbeParams>,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Set when the loss or parameters stopped being finite; training stops there.
    pub diverged: bool,
    /// Not part of equality or serialization.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl PartialEq for TrainResult {
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config
            && self.params == o.params
            && self.train_loss == o.train_loss
            && self.val_accuracy == o.val_accuracy
            && self.best_epoch == o.best_epoch
            && self.best_val_accuracy == o.best_val_accuracy
            && self.diverged == o.diverged
    }
}

impl TrainResult {
    pub fn params(&self) -> &ProbeParams {
        self.params.as_ref().expect("trained result carries parameters")
    }
}

/// Fraction of correct argmax predictions.
pub fn accuracy(params: &ProbeParams, fold: &Fold) -> Result<f64> {
    if fold.is_empty() {
        return Err(Error::EmptyFold("evaluation"));
    }
    let mut correct = 0usize;
    for (t, &y) in fold.tokens.iter().zip(&fold.labels) {
        correct += (params.predict(t)? == y) as usize;
    }
    Ok(correct as f64 / fold.len() as f64)
}

fn initial_params(cfg: &TrainConfig, dim: usize) -> Result<ProbeParams> {
    let mut rng = keyed(cfg.seed, 0, Stream::Init);
    Ok(match cfg.head {
        HeadKind::Linear => ProbeParams::Linear(LinearGapParams::new(dim, cfg.pooling)),
        HeadKind::Abmilp => ProbeParams::Abmilp(AbmilpParams::init(dim, cfg.abmilp_hidden, &mut rng)),
        HeadKind::Efficient => ProbeParams::Efficient(EfficientProbeParams::init(dim, &mut rng)?),
    })
}

/// Trains one head with one hyperparameter setting.
pub fn train_probe(folds: &Folds, cfg: &TrainConfig) -> Result<TrainResult> {
    let dim = folds.check()?;
    if cfg.batch_size == 0 || cfg.epochs == 0 || cfg.warmup_epochs >= cfg.epochs || !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::invalid(format!("bad training config {cfg:?}")));
    }
    let start = std::time::Instant::now();
    let mut result = match initial_params(cfg, dim)? {
        ProbeParams::Linear(p) => run(p, folds, cfg, ProbeParams::Linear)?,
        ProbeParams::Abmilp(p) => run(p, folds, cfg, ProbeParams::Abmilp)?,
        ProbeParams::Efficient(p) => run(p, folds, cfg, ProbeParams::Efficient)?,
    };
    result.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(result)
}

fn run<H: Head>(mut params: H, folds: &Folds, cfg: &TrainConfig, wrap: fn(H) -> ProbeParams) -> Result<TrainResult> {
    let n = folds.train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let warmup = cfg.warmup_epochs * per_epoch;
    let mut opt = AdamW::new(&params);
    let mut result = TrainResult {
        config: *cfg,
        params: Some(wrap(params.clone())),
        train_loss: Vec::with_capacity(cfg.epochs),
        val_accuracy: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        diverged: false,
        wall_clock_secs: 0.0,
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut keyed(cfg.seed, epoch as u64, Stream::Shuffle));
        let mut drop_rng = keyed(cfg.seed, epoch as u64, Stream::Dropout);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let mask: Option<Array1<f64>> =
                    (cfg.dropout > 0.0).then(|| dropout_mask(&mut drop_rng, params.pooled_dim(), cfg.dropout));
                let fwd = params.forward(&folds.train.tokens[i], mask.as_ref())?;
                let (loss, dlogits) = cross_entropy(fwd.logits.view(), folds.train.labels[i]);
                epoch_loss += loss;
                let back = params.backward(&fwd.cache, dlogits.view())?;
                grads.add_scaled(&back.params, inv);
            }
            let lr = cosine_lr(step, warmup, total, cfg.base_lr)?;
            opt.step(&mut params, &grads, lr, cfg.weight_decay)?;
            step += 1;
        }
        let mean_loss = epoch_loss / n as f64;
        result.train_loss.push(mean_loss);
        if !mean_loss.is_finite() || !params.is_finite() {
            result.diverged = true;
            break;
        }
        let snapshot = wrap(params.clone());
        let acc = accuracy(&snapshot, &folds.val)?;
        result.val_accuracy.push(acc);
        if acc > result.best_val_accuracy {
            result.best_val_accuracy = acc;
            result.best_epoch = epoch;
            result.params = Some(snapshot);
        }
    }
    if result.val_accuracy.is_empty() {
        result.best_val_accuracy = 0.0;
    }
    Ok(result)
}

/// One sweep cell's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub base_lr: f64,
    pub dropout: f64,
    pub best_val_accuracy: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best: TrainResult,
    pub cells: Vec<SweepCell>,
}

/// Trains every (lr, dropout) cell in parallel and keeps the best validation
/// accuracy; ties go to the lower lr, then the lower dropout. Diverged cells
/// are never selected.
pub fn sweep(folds: &Folds, head: HeadKind, probe: &ProbeConfig, seed: u64) -> Result<SweepResult> {
    probe.validate()?;
    let grid: Vec<(f64, f64)> = probe
        .lr_grid
        .iter()
        .flat_map(|&lr| probe.dropout_grid.iter().map(move |&p| (lr, p)))
        .collect();
    let results: Vec<TrainResult> = grid
        .par_iter()
        .map(|&(lr, p)| train_probe(folds, &probe.train_config(head, lr, p, seed)))
        .collect::<Result<_>>()?;
    let cells = results
        .iter()
        .map(|r| SweepCell {
            base_lr: r.config.base_lr,
            dropout: r.config.dropout,
            best_val_accuracy: r.best_val_accuracy,
            diverged: r.diverged,
        })
        .collect();
    let best = results
        .into_iter()
        .filter(|r| !r.diverged && r.best_val_accuracy.is_finite())
        .reduce(|a, b| {
            let key = |r: &TrainResult| (r.best_val_accuracy, -r.config.base_lr, -r.config.dropout);
            if key(&b) > key(&a) {
                b
            } else {
                a
            }
        })
        .ok_or_else(|| Error::invalid("every sweep cell diverged"))?;
    Ok(SweepResult { best, cells })
}
