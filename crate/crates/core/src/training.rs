//! Mini-batch training with Adam, step-decayed learning rate and weight decay,
//! plus evaluation helpers.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{AugmentPolicy, BatchLoader, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, averaged_metrics, Average, ConfusionMatrix, ScoredPredictions};
use crate::model::Model;
use crate::params::ParamStore;
use crate::seed::derive_seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// `param -= lr · wd · param`, applied next to the Adam update.
    #[default]
    Decoupled,
    /// `wd · param` added to the gradient before the moment updates.
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecayMode,
    pub decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub decay_interval: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub class_weights: Option<Vec<f64>>,
    /// Clip the global gradient norm to this value.
    pub grad_clip: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Averaging used for the validation F1 that picks the best epoch.
    pub average: Average,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.04,
            weight_decay_mode: WeightDecayMode::Decoupled,
            decay_factor: 0.85,
            decay_interval: 20,
            epochs: 100,
            batch_size: 16,
            max_steps: None,
            seed: 0,
            class_weights: None,
            grad_clip: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            average: Average::Macro,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() { Ok(()) } else { Err(Error::config(format!("train.{name} must be positive"))) }
        };
        positive("lr", self.lr)?;
        positive("eps", self.eps)?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay must be non-negative"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("train.decay_factor must be in (0, 1]"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("train.{name} must be in [0, 1)")));
            }
        }
        if self.decay_interval == 0 || self.batch_size == 0 {
            return Err(Error::config("train.decay_interval and train.batch_size must be positive"));
        }
        if let Some(c) = self.grad_clip {
            positive("grad_clip", c)?;
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().all(|&x| x == 0.0) {
                return Err(Error::config("train.class_weights must be non-negative and not all zero"));
            }
        }
        Ok(())
    }
}

/// Step-decayed learning rate, `lr · decay_factor^⌊epoch / decay_interval⌋`.
///
/// The power is rounded to 15 significant digits so that the decimal
/// schedule values come out exactly (`0.85² · 1e-3` is `7.225e-4`, not the
/// neighbouring double that plain multiplication produces).
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.decay_interval.max(1)) as i32;
    let lr = cfg.lr * cfg.decay_factor.powi(k);
    format!("{lr:.14e}").parse().expect("formatted float parses")
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { t: 0, beta1, beta2, eps, m: zeros(), v: zeros() }
    }

    pub fn from_config(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.beta1, cfg.beta2, cfg.eps)
    }

    /// Updates every parameter from the gradient stored in its grad slot.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64, weight_decay: f64, mode: WeightDecayMode) -> Result<()> {
        let grads: Vec<Vec<T>> = params
            .iter()
            .map(|(name, t)| {
                t.grad().map(<[T]>::to_vec).ok_or_else(|| Error::Numeric(format!("parameter {name} has no gradient")))
            })
            .collect::<Result<_>>()?;
        adam_step(params.tensors_mut(), &grads, self, lr, weight_decay, mode)
    }
}

/// One bias-corrected Adam update of `params` with `grads`.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
    mode: WeightDecayMode,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].shape() != p.shape() {
            return Err(Error::shape(format!("adam: tensor {i} has mismatched gradient or moments")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = T::from_f64(1.0 - state.beta1.powi(t));
    let c2 = T::from_f64(1.0 - state.beta2.powi(t));
    let (b1, b2, eps) = (T::from_f64(state.beta1), T::from_f64(state.beta2), T::from_f64(state.eps));
    let (lr, wd) = (T::from_f64(lr), T::from_f64(weight_decay));
    let one = T::one();
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (m, v) = (m.data_mut(), v.data_mut());
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let mut grad = g[j];
            if mode == WeightDecayMode::L2 && wd != T::zero() {
                grad += wd * *w;
            }
            m[j] = b1 * m[j] + (one - b1) * grad;
            v[j] = b2 * v[j] + (one - b2) * grad * grad;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            if mode == WeightDecayMode::Decoupled && wd != T::zero() {
                *w -= lr * wd * *w;
            }
            *w -= lr * update;
        }
    }
    Ok(())
}

fn global_norm<T: Scalar>(params: &ParamStore<T>) -> f64 {
    params
        .tensors()
        .iter()
        .filter_map(Tensor::grad)
        .flatten()
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

fn scale_grads<T: Scalar>(params: &mut ParamStore<T>, factor: f64) {
    let f = T::from_f64(factor);
    for t in params.tensors_mut() {
        if let Some(g) = t.grad() {
            let scaled = g.iter().map(|&x| x * f).collect();
            t.set_grad(scaled).expect("same length");
        }
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub train_loss: f64,
    /// Running accuracy over the epoch's training batches, in percent.
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub val_f1: Option<f64>,
}

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in history {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Numeric(e.to_string()))?;
        out.write_all(b"\n").expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Progress counters carried in checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub best_val_f1: Option<f64>,
}

pub struct TrainData<'a> {
    pub train: &'a dyn Dataset,
    pub val: Option<&'a dyn Dataset>,
    pub normalization: &'a Normalization,
    pub augment: Option<&'a AugmentPolicy>,
}

pub struct TrainOutcome<T: Scalar> {
    pub history: Vec<EpochRecord>,
    /// Parameters after the last step.
    pub last: Model<T>,
    /// Parameters of the epoch with the best validation F1, earliest on ties.
    /// Equal to `last` without validation data, and to the initialization when
    /// no epoch ran.
    pub best: Model<T>,
    pub optimizer: AdamState<T>,
    pub state: TrainState,
}

/// Trains `model` on `data.train`, evaluating on `data.val` after every epoch.
pub fn train<T: Scalar>(mut model: Model<T>, data: &TrainData<'_>, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let num_classes = model.config().num_classes;
    if data.train.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    let weights: Option<Vec<T>> = match &cfg.class_weights {
        Some(w) if w.len() != num_classes => {
            return Err(Error::config(format!("{} class weights for {num_classes} classes", w.len())));
        }
        Some(w) => Some(w.iter().map(|&x| T::from_f64(x)).collect()),
        None => None,
    };
    let loader = BatchLoader {
        data: data.train,
        norm: data.normalization,
        augment: data.augment,
        batch_size: cfg.batch_size,
        seed: derive_seed(cfg.seed, &[0xda7a]),
        shuffle: true,
    };
    let mut optimizer = AdamState::from_config(model.params(), cfg);
    let mut history = Vec::new();
    let mut best = model.clone();
    let mut state = TrainState { seed: cfg.seed, ..TrainState::default() };
    let step_limit = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..cfg.epochs {
        if state.step >= step_limit {
            break;
        }
        let lr = lr_schedule(epoch, cfg);
        let (mut loss_sum, mut seen, mut correct, mut epoch_steps) = (0.0, 0usize, 0usize, 0usize);
        for batch in loader.epoch::<T>(epoch) {
            if state.step >= step_limit {
                break;
            }
            let batch = batch?;
            let mut g = Graph::new();
            let bound = model.params().bind(&mut g);
            let x = g.constant(batch.images);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xd409, state.step as u64]));
            let out = model.forward(&mut g, &bound, x, Some(&mut rng))?;
            let loss = g.cross_entropy(out.logits, &batch.labels, weights.as_deref())?;
            let loss_value = g.value(loss).data()[0].as_f64();
            g.backward(loss)?;
            model.params_mut().collect_grads(&g, &bound);
            let norm = global_norm(model.params());
            if !loss_value.is_finite() || !norm.is_finite() {
                return Err(Error::NonFinite { step: state.step, lr, grad_norm: norm });
            }
            if let Some(clip) = cfg.grad_clip {
                if norm > clip {
                    scale_grads(model.params_mut(), clip / norm);
                }
            }
            optimizer.step(model.params_mut(), lr, cfg.weight_decay, cfg.weight_decay_mode)?;
            model.params_mut().zero_grads();

            let logits = g.value(out.logits);
            for (row, &label) in logits.data().chunks(num_classes).zip(&batch.labels) {
                correct += usize::from(argmax(row) == label);
            }
            loss_sum += loss_value * batch.labels.len() as f64;
            seen += batch.labels.len();
            state.step += 1;
            epoch_steps += 1;
        }
        if seen == 0 {
            break 'epochs;
        }
        let mut record = EpochRecord {
            epoch,
            lr,
            steps: epoch_steps,
            train_loss: loss_sum / seen as f64,
            train_acc: 100.0 * correct as f64 / seen as f64,
            val_loss: None,
            val_acc: None,
            val_f1: None,
        };
        let val = data.val.filter(|v| !v.is_empty());
        let mut improved = val.is_none();
        if let Some(val) = val {
            let eval = evaluate(&model, val, data.normalization, cfg.batch_size)?;
            let cm = eval.confusion()?;
            let f1 = averaged_metrics(&cm, cfg.average).f1;
            record.val_loss = Some(eval.mean_loss);
            record.val_acc = Some(accuracy(&cm)?);
            record.val_f1 = Some(f1);
            improved = state.best_val_f1.is_none_or(|b| f1 > b);
            if improved {
                state.best_val_f1 = Some(f1);
            }
        }
        if improved {
            best = model.clone();
            state.best_epoch = Some(epoch);
        }
        log::info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.4} train acc {:.2}%{}",
            record.train_loss,
            record.train_acc,
            record.val_f1.map_or(String::new(), |f| format!(" val f1 {f:.4}"))
        );
        history.push(record);
        state.epoch = epoch + 1;
    }
    Ok(TrainOutcome { history, last: model, best, optimizer, state })
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Row-wise softmax in f64.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let c = *logits.shape().last().expect("rank >= 1");
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

/// Evaluation-mode predictions over a whole dataset.
pub struct Evaluation {
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Penultimate features, one row per sample.
    pub features: Vec<Vec<f64>>,
    pub mean_loss: f64,
    pub num_classes: usize,
}

impl Evaluation {
    pub fn predictions(&self) -> Vec<usize> {
        self.probs.iter().map(|p| argmax(p)).collect()
    }

    pub fn confusion(&self) -> Result<ConfusionMatrix> {
        let names = (0..self.num_classes).map(|c| format!("class{c}")).collect();
        ConfusionMatrix::from_predictions(&self.labels, &self.predictions(), names)
    }

    pub fn scored(&self) -> Result<ScoredPredictions> {
        ScoredPredictions::new(self.probs.clone(), self.labels.clone())
    }
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &dyn Dataset, norm: &Normalization, batch_size: usize) -> Result<Evaluation> {
    let loader = BatchLoader { data, norm, augment: None, batch_size, seed: 0, shuffle: false };
    let num_classes = model.config().num_classes;
    let mut out = Evaluation { probs: Vec::new(), labels: Vec::new(), features: Vec::new(), mean_loss: 0.0, num_classes };
    let mut loss_sum = 0.0;
    for batch in loader.epoch::<T>(0) {
        let batch = batch?;
        let (logits, features) = model.predict(&batch.images)?;
        let probs = softmax_rows(&logits);
        for (p, &label) in probs.iter().zip(&batch.labels) {
            if label >= num_classes {
                return Err(Error::data(format!("label {label} out of range for {num_classes} classes")));
            }
            loss_sum -= p[label].max(f64::MIN_POSITIVE).ln();
        }
        out.probs.extend(probs);
        out.labels.extend(&batch.labels);
        let d = *features.shape().last().expect("features [B, d]");
        out.features.extend(features.data().chunks(d).map(|r| r.iter().map(|v| v.as_f64()).collect::<Vec<_>>()));
    }
    if !out.labels.is_empty() {
        out.mean_loss = loss_sum / out.labels.len() as f64;
    }
    Ok(out)
}
