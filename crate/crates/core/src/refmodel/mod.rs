//! Reference classifier: one ReLU hidden layer, softmax output, trained with
//! mini-batch SGD on cross-entropy.
//!
//! The hidden layer is the penultimate representation fed to familiarity
//! scoring.

pub mod loo;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loo::{
    accuracy_delta, group_accuracy_matrix, make_loo_splits, AccuracyMatrix, DatasetSplit, LooConfig,
};

use crate::familiarity::ActivationMatrix;
use crate::{Error, Result};

pub const PENULTIMATE_TAG: &str = "penultimate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a lower monitored loss before stopping.
    pub patience: usize,
    /// Share of the training rows held out to monitor loss. When it rounds
    /// to zero rows, training loss is monitored instead.
    pub validation_fraction: f64,
    pub seed: u64,
    /// Selects the shuffling stream independently of initialization.
    pub shuffle_stream: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 200,
            patience: 4,
            validation_fraction: 0.1,
            seed: 0,
            shuffle_stream: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Loss the stopping rule watches: validation when a split exists.
    pub monitored_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefModel {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub classes: usize,
    /// `hidden x input`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `classes x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub config: TrainConfig,
    pub history: Vec<EpochStats>,
    /// Epoch whose weights were kept (1-based; 0 before any training).
    pub best_epoch: usize,
}

fn param_count(f: usize, h: usize, c: usize) -> usize {
    h * f + h + c * h + c
}

struct View<'a> {
    f: usize,
    h: usize,
    c: usize,
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

impl<'a> View<'a> {
    fn of(f: usize, h: usize, c: usize, p: &'a [f64]) -> Self {
        let (w1, rest) = p.split_at(h * f);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(c * h);
        Self { f, h, c, w1, b1, w2, b2 }
    }

    /// Writes pre-activations into `z`, ReLU outputs into `a`, and log
    /// probabilities into `logp`.
    fn forward(&self, x: &[f64], z: &mut [f64], a: &mut [f64], logp: &mut [f64]) {
        for j in 0..self.h {
            let row = &self.w1[j * self.f..(j + 1) * self.f];
            z[j] = self.b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            a[j] = z[j].max(0.0);
        }
        for (k, l) in logp.iter_mut().enumerate().take(self.c) {
            let row = &self.w2[k * self.h..(k + 1) * self.h];
            *l = self.b2[k] + row.iter().zip(a.iter()).map(|(w, v)| w * v).sum::<f64>();
        }
        let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logp.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        for l in logp.iter_mut() {
            *l -= lse;
        }
    }
}

struct Scratch {
    z: Vec<f64>,
    a: Vec<f64>,
    logp: Vec<f64>,
    dz: Vec<f64>,
}

impl Scratch {
    fn new(h: usize, c: usize) -> Self {
        Self {
            z: vec![0.0; h],
            a: vec![0.0; h],
            logp: vec![0.0; c],
            dz: vec![0.0; h],
        }
    }
}

/// Mean cross-entropy over `rows`; accumulates the gradient into `grad`
/// when given.
fn loss_over(
    view: &View,
    features: &DMatrix<f64>,
    labels: &[usize],
    rows: &[usize],
    mut grad: Option<&mut [f64]>,
    scratch: &mut Scratch,
) -> (f64, usize) {
    let (f, h, c) = (view.f, view.h, view.c);
    let mut x = vec![0.0; f];
    let mut loss = 0.0;
    let mut correct = 0;
    let scale = 1.0 / rows.len().max(1) as f64;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    for &i in rows {
        for (k, v) in x.iter_mut().enumerate() {
            *v = features[(i, k)];
        }
        view.forward(&x, &mut scratch.z, &mut scratch.a, &mut scratch.logp);
        let y = labels[i];
        loss -= scratch.logp[y];
        if argmax(&scratch.logp) == y {
            correct += 1;
        }
        let Some(g) = grad.as_deref_mut() else { continue };
        let (gw1, rest) = g.split_at_mut(h * f);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(c * h);
        scratch.dz.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..c {
            let d = (scratch.logp[k].exp() - if k == y { 1.0 } else { 0.0 }) * scale;
            gb2[k] += d;
            for j in 0..h {
                gw2[k * h + j] += d * scratch.a[j];
                scratch.dz[j] += d * view.w2[k * h + j];
            }
        }
        for j in 0..h {
            if scratch.z[j] <= 0.0 {
                continue;
            }
            let d = scratch.dz[j];
            gb1[j] += d;
            for k in 0..f {
                gw1[j * f + k] += d * x[k];
            }
        }
    }
    (loss * scale, correct)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn check_inputs(features: &DMatrix<f64>, labels: &[usize]) -> Result<usize> {
    if features.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.nrows(),
            found: labels.len(),
        });
    }
    if features.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("feature matrix".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(Error::Invalid("labels must contain at least two classes".into()));
    }
    if features.nrows() < classes {
        return Err(Error::Invalid(format!(
            "{} rows cannot cover {classes} classes",
            features.nrows()
        )));
    }
    Ok(classes)
}

impl RefModel {
    /// Fresh network with seeded He-uniform hidden weights, Glorot-uniform
    /// output weights, and zero biases.
    pub fn init(input_dim: usize, classes: usize, config: &TrainConfig) -> Self {
        let (f, h, c) = (input_dim, config.hidden, classes);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let a1 = (6.0 / f.max(1) as f64).sqrt();
        let a2 = (6.0 / (h + c) as f64).sqrt();
        let w1 = (0..h * f).map(|_| rng.random_range(-a1..a1)).collect();
        let w2 = (0..c * h).map(|_| rng.random_range(-a2..a2)).collect();
        Self {
            input_dim: f,
            hidden_dim: h,
            classes: c,
            w1,
            b1: vec![0.0; h],
            w2,
            b2: vec![0.0; c],
            config: config.clone(),
            history: Vec::new(),
            best_epoch: 0,
        }
    }

    /// Parameters in the order `w1, b1, w2, b2`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(param_count(self.input_dim, self.hidden_dim, self.classes));
        p.extend_from_slice(&self.w1);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.extend_from_slice(&self.b2);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        let (f, h, c) = (self.input_dim, self.hidden_dim, self.classes);
        if p.len() != param_count(f, h, c) {
            return Err(Error::DimensionMismatch {
                expected: param_count(f, h, c),
                found: p.len(),
            });
        }
        let v = View::of(f, h, c, p);
        self.w1 = v.w1.to_vec();
        self.b1 = v.b1.to_vec();
        self.w2 = v.w2.to_vec();
        self.b2 = v.b2.to_vec();
        Ok(())
    }

    fn check_width(&self, features: &DMatrix<f64>) -> Result<()> {
        if features.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: features.ncols(),
            });
        }
        Ok(())
    }

    /// Mean cross-entropy and its gradient with respect to [`Self::params`].
    pub fn loss_and_gradient(&self, features: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.check_width(features)?;
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::OutOfRange(format!("label {bad} with {} classes", self.classes)));
        }
        let p = self.params();
        let view = View::of(self.input_dim, self.hidden_dim, self.classes, &p);
        let mut grad = vec![0.0; p.len()];
        let rows: Vec<usize> = (0..features.nrows()).collect();
        let mut scratch = Scratch::new(self.hidden_dim, self.classes);
        let (loss, _) = loss_over(&view, features, labels, &rows, Some(&mut grad), &mut scratch);
        Ok((loss, grad))
    }

    /// Softmax probabilities, `N x classes`.
    pub fn predict_proba(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_width(features)?;
        let p = self.params();
        let view = View::of(self.input_dim, self.hidden_dim, self.classes, &p);
        let mut s = Scratch::new(self.hidden_dim, self.classes);
        let mut x = vec![0.0; self.input_dim];
        let mut out = DMatrix::zeros(features.nrows(), self.classes);
        for i in 0..features.nrows() {
            for (k, v) in x.iter_mut().enumerate() {
                *v = features[(i, k)];
            }
            view.forward(&x, &mut s.z, &mut s.a, &mut s.logp);
            for k in 0..self.classes {
                out[(i, k)] = s.logp[k].exp();
            }
        }
        Ok(out)
    }

    pub fn predict(&self, features: &DMatrix<f64>) -> Result<Vec<usize>> {
        let proba = self.predict_proba(features)?;
        Ok(proba
            .row_iter()
            .map(|r| argmax(r.transpose().as_slice()))
            .collect())
    }

    pub fn accuracy(&self, features: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(features)?;
        if labels.len() != pred.len() {
            return Err(Error::DimensionMismatch {
                expected: pred.len(),
                found: labels.len(),
            });
        }
        if pred.is_empty() {
            return Err(Error::Empty("no rows to evaluate".into()));
        }
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / pred.len() as f64)
    }

    /// Post-ReLU hidden activations.
    pub fn hidden(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_width(features)?;
        let mut out = DMatrix::zeros(features.nrows(), self.hidden_dim);
        for i in 0..features.nrows() {
            for j in 0..self.hidden_dim {
                let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
                let z = self.b1[j] + row.iter().enumerate().map(|(k, w)| w * features[(i, k)]).sum::<f64>();
                out[(i, j)] = z.max(0.0);
            }
        }
        Ok(out)
    }

    pub fn to_document(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_document(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Hidden-layer activations of `features`, tagged for familiarity fitting.
pub fn penultimate(model: &RefModel, features: &ActivationMatrix) -> Result<ActivationMatrix> {
    let hidden = model.hidden(&features.data)?;
    ActivationMatrix::new(features.ids.clone(), hidden, PENULTIMATE_TAG)
}

/// Train with early stopping; the weights of the epoch with the lowest
/// monitored loss are kept.
pub fn train(features: &DMatrix<f64>, labels: &[usize], config: &TrainConfig) -> Result<RefModel> {
    let classes = check_inputs(features, labels)?;
    if config.max_epochs == 0 {
        return Err(Error::OutOfRange("max_epochs must be at least 1".into()));
    }
    if config.hidden == 0 || config.batch_size == 0 {
        return Err(Error::OutOfRange("hidden width and batch size must be positive".into()));
    }
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::OutOfRange(format!("learning rate {}", config.learning_rate)));
    }
    if !(0.0..1.0).contains(&config.momentum) || !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(Error::OutOfRange("momentum and validation fraction must lie in [0, 1)".into()));
    }

    let n = features.nrows();
    let mut model = RefModel::init(features.ncols(), classes, config);
    let (f, h, c) = (model.input_dim, model.hidden_dim, model.classes);

    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed);
    split_rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut split_rng);
    let n_val = (config.validation_fraction * n as f64 + 1e-9).floor() as usize;
    let n_val = if n - n_val < 1 { 0 } else { n_val };
    let (val_rows, train_rows) = order.split_at(n_val);
    let val_rows = val_rows.to_vec();
    let mut train_rows = train_rows.to_vec();
    train_rows.sort_unstable();

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(2 + config.shuffle_stream);

    let mut p = model.params();
    let mut velocity = vec![0.0; p.len()];
    let mut grad = vec![0.0; p.len()];
    let mut scratch = Scratch::new(h, c);
    let mut best = (f64::INFINITY, p.clone(), 0usize);

    for epoch in 1..=config.max_epochs {
        train_rows.shuffle(&mut shuffle_rng);
        for batch in train_rows.chunks(config.batch_size) {
            {
                let view = View::of(f, h, c, &p);
                loss_over(&view, features, labels, batch, Some(&mut grad), &mut scratch);
            }
            for ((w, v), g) in p.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = config.momentum * *v - config.learning_rate * g;
                *w += *v;
            }
            if p.iter().any(|w| !w.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "parameters diverged in epoch {epoch}; lower the learning rate"
                )));
            }
        }
        let view = View::of(f, h, c, &p);
        let (train_loss, train_hits) = loss_over(&view, features, labels, &train_rows, None, &mut scratch);
        let (monitored, val_acc) = if val_rows.is_empty() {
            (train_loss, None)
        } else {
            let (l, hits) = loss_over(&view, features, labels, &val_rows, None, &mut scratch);
            (l, Some(hits as f64 / val_rows.len() as f64))
        };
        model.history.push(EpochStats {
            epoch,
            train_loss,
            train_accuracy: train_hits as f64 / train_rows.len() as f64,
            monitored_loss: monitored,
            validation_accuracy: val_acc,
        });
        if monitored < best.0 {
            best = (monitored, p.clone(), epoch);
        } else if epoch - best.2 >= config.patience {
            break;
        }
    }
    model.set_params(&best.1)?;
    model.best_epoch = best.2;
    Ok(model)
}

/// Repeated training: `seeds` initializations, each trained `runs_per_seed`
/// times with different shuffling. The run with the best validation accuracy
/// (lowest monitored loss on ties) is returned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Repeats {
    pub seeds: usize,
    pub runs_per_seed: usize,
}

impl Default for Repeats {
    fn default() -> Self {
        Self { seeds: 3, runs_per_seed: 3 }
    }
}

pub fn train_repeated(
    features: &DMatrix<f64>,
    labels: &[usize],
    config: &TrainConfig,
    repeats: Repeats,
) -> Result<RefModel> {
    if repeats.seeds == 0 || repeats.runs_per_seed == 0 {
        return Err(Error::OutOfRange("repeat counts must be positive".into()));
    }
    let mut best: Option<(f64, f64, RefModel)> = None;
    for s in 0..repeats.seeds {
        for r in 0..repeats.runs_per_seed {
            let cfg = TrainConfig {
                seed: config.seed.wrapping_add(s as u64),
                shuffle_stream: r as u64,
                ..config.clone()
            };
            let model = train(features, labels, &cfg)?;
            let kept = &model.history[model.best_epoch - 1];
            let acc = kept.validation_accuracy.unwrap_or(kept.train_accuracy);
            let loss = kept.monitored_loss;
            let better = match &best {
                None => true,
                Some((a, l, _)) => acc > *a || (acc == *a && loss < *l),
            };
            if better {
                best = Some((acc, loss, model));
            }
        }
    }
    Ok(best.expect("at least one run").2)
}
