//! Mini-batch SGD with momentum and a staircase learning rate.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape, Var};
use crate::classic::ResNet;
use crate::data::LabeledImage;
use crate::error::{contract, Result};
use crate::mgnet::{MgNet, MgNetConfig, Mode};
use crate::params::ParamStore;
use crate::recorder::update_running_stats;
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Learning rate of the first epoch.
    pub learning_rate: f64,
    /// The rate is divided by this factor every `decay_period` epochs.
    pub decay_factor: f64,
    pub decay_period: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            decay_factor: 10.0,
            decay_period: 30,
            momentum: 0.9,
            batch_size: 128,
            epochs: 120,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        contract(self.learning_rate > 0.0 && self.learning_rate.is_finite(), || {
            format!("learning rate {} must be positive", self.learning_rate)
        })?;
        contract((0.0..1.0).contains(&self.momentum), || {
            format!("momentum {} outside [0, 1)", self.momentum)
        })?;
        contract(self.batch_size >= 1, || "batch size must be at least 1".into())?;
        contract(self.decay_factor > 0.0 && self.decay_period >= 1, || {
            "decay factor must be positive and the period at least one epoch".into()
        })
    }

    /// Staircase rate of (zero-based) `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate / self.decay_factor.powi((epoch / self.decay_period) as i32)
    }
}

/// Momentum buffers `v` by parameter name, plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState<T> {
    pub step: u64,
    pub velocity: Vec<(String, Vec<T>)>,
}

impl<T: Scalar> SgdState<T> {
    /// Zero buffers for every trainable parameter.
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            step: 0,
            velocity: params
                .trainable()
                .map(|(n, v)| (n.to_string(), vec![T::zero(); v.len()]))
                .collect(),
        }
    }
}

/// `v = alpha v - eta g`, then `w = w + v`, for every parameter of `grads`.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[(String, Array<T>)],
    state: &mut SgdState<T>,
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    let (eta, alpha) = (T::lit(learning_rate), T::lit(momentum));
    for (name, g) in grads {
        let slot = match state.velocity.iter().position(|(n, _)| n == name) {
            Some(i) => i,
            None => {
                state.velocity.push((name.clone(), vec![T::zero(); g.len()]));
                state.velocity.len() - 1
            }
        };
        let v = &mut state.velocity[slot].1;
        let w = params.get_mut(name)?;
        contract(w.len() == g.len() && v.len() == g.len(), || {
            format!("{name}: gradient has {} entries, parameter {}", g.len(), w.len())
        })?;
        for ((w, v), &g) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *v = alpha * *v - eta * g;
            *w += *v;
        }
    }
    state.step += 1;
    Ok(())
}

/// A trainable image classifier recorded on a tape.
pub trait Classifier<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn classes(&self) -> usize;
    /// Logits node and the training-mode batch-norm nodes.
    fn record_logits(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<(Var, Vec<(String, Var)>)>;
}

impl<T: Scalar> Classifier<T> for MgNet<T> {
    fn params(&self) -> &ParamStore<T> {
        MgNet::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        MgNet::params_mut(self)
    }

    fn classes(&self) -> usize {
        self.config().classes
    }

    fn record_logits(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<(Var, Vec<(String, Var)>)> {
        let out = self.record(tape, x, mode)?;
        Ok((out.logits, out.batch_norms))
    }
}

impl<T: Scalar> Classifier<T> for ResNet<T> {
    fn params(&self) -> &ParamStore<T> {
        ResNet::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        ResNet::params_mut(self)
    }

    fn classes(&self) -> usize {
        self.layout().classes
    }

    fn record_logits(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<(Var, Vec<(String, Var)>)> {
        self.record(tape, x, mode)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean cross-entropy over the epoch's training samples.
    pub loss: f64,
    /// Fraction of training samples classified correctly during the epoch.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

struct BatchResult<T> {
    loss: f64,
    correct: usize,
    grads: Vec<(String, Array<T>)>,
}

fn run_batch<T: Scalar, M: Classifier<T>>(
    model: &mut M,
    batch: &[&LabeledImage<T>],
    mode: Mode,
    with_grads: bool,
) -> Result<BatchResult<T>> {
    let images: Vec<&Tensor<T>> = batch.iter().map(|s| &s.image).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let classes = model.classes();
    contract(labels.iter().all(|&l| l < classes), || {
        format!("labels must lie in 0..{classes}")
    })?;
    let mut tape = Tape::new();
    let x = tape.input(Array::batch(&images)?);
    let (logits, batch_norms) = model.record_logits(&mut tape, x, mode)?;
    let loss = tape.softmax_cross_entropy(logits, &labels)?;
    let correct = tape
        .value(logits)
        .data()
        .chunks(classes)
        .zip(&labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    let grads = if with_grads {
        let g = tape.backward(loss)?;
        tape.params()
            .iter()
            .map(|(name, v)| (name.clone(), g.get_or_zero(&tape, *v)))
            .collect()
    } else {
        Vec::new()
    };
    if mode == Mode::Train {
        update_running_stats(model.params_mut(), &tape, &batch_norms)?;
    }
    Ok(BatchResult {
        loss: tape.value(loss).data()[0].to_f64_lossy(),
        correct,
        grads,
    })
}

/// Sample order of `epoch` (zero-based): a fresh ChaCha8 shuffle seeded
/// from the run seed and the epoch, so interrupted runs resume exactly.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded(seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

/// Trains epochs `start_epoch..cfg.epochs`, calling `on_epoch` after each
/// one (for logging and checkpoints). Deterministic given the seed.
pub fn train_from<T, M, F>(
    model: &mut M,
    cfg: &TrainConfig,
    data: &[LabeledImage<T>],
    state: &mut SgdState<T>,
    start_epoch: usize,
    mut on_epoch: F,
) -> Result<Vec<EpochMetrics>>
where
    T: Scalar,
    M: Classifier<T>,
    F: FnMut(&EpochMetrics, &M, &SgdState<T>) -> Result<()>,
{
    cfg.validate()?;
    contract(!data.is_empty(), || "cannot train on an empty dataset".into())?;
    let mut history = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledImage<T>> = chunk.iter().map(|&i| &data[i]).collect();
            let r = run_batch(model, &batch, Mode::Train, true)?;
            sgd_momentum_step(model.params_mut(), &r.grads, state, lr, cfg.momentum)?;
            loss_sum += r.loss * batch.len() as f64;
            correct += r.correct;
        }
        let m = EpochMetrics {
            epoch: epoch + 1,
            learning_rate: lr,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        on_epoch(&m, model, state)?;
        history.push(m);
    }
    Ok(history)
}

/// Trains from scratch; returns the per-epoch history.
pub fn train<T: Scalar, M: Classifier<T>>(
    model: &mut M,
    cfg: &TrainConfig,
    data: &[LabeledImage<T>],
) -> Result<Vec<EpochMetrics>> {
    let mut state = SgdState::new(model.params());
    train_from(model, cfg, data, &mut state, 0, |_, _, _| Ok(()))
}

/// Builds an MgNet from `model_cfg` (seeded by the run seed) and trains it.
pub fn train_mgnet<T: Scalar>(
    model_cfg: &MgNetConfig,
    cfg: &TrainConfig,
    data: &[LabeledImage<T>],
) -> Result<(MgNet<T>, Vec<EpochMetrics>)> {
    model_cfg.validate()?;
    let mut net = MgNet::new(model_cfg.clone(), cfg.seed)?;
    let history = train(&mut net, cfg, data)?;
    Ok((net, history))
}

/// Evaluation-mode loss and accuracy.
pub fn evaluate<T: Scalar, M: Classifier<T>>(
    model: &mut M,
    data: &[LabeledImage<T>],
    batch_size: usize,
) -> Result<Evaluation> {
    contract(!data.is_empty(), || "cannot evaluate on an empty dataset".into())?;
    contract(batch_size >= 1, || "batch size must be at least 1".into())?;
    let (mut loss_sum, mut correct) = (0.0, 0);
    for chunk in data.chunks(batch_size) {
        let batch: Vec<&LabeledImage<T>> = chunk.iter().collect();
        let r = run_batch(model, &batch, Mode::Eval, false)?;
        loss_sum += r.loss * batch.len() as f64;
        correct += r.correct;
    }
    Ok(Evaluation {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        samples: data.len(),
    })
}
