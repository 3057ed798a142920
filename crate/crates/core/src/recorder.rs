//! Tape plumbing shared by the models: parameter registration, convolution
//! and batch-norm layers, running statistics.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Padding;

/// Batch-norm ε.
pub const BN_EPS: f64 = 1e-5;

/// Weight of the current batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-norm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are updated afterwards.
    Train,
    /// Running statistics.
    Eval,
}

pub(crate) struct Recorder<'a, T> {
    pub params: &'a ParamStore<T>,
    pub tape: &'a mut Tape<T>,
    vars: HashMap<String, Var>,
    mode: Mode,
    batch_norm: bool,
    /// Training-mode batch-norm nodes by parameter prefix.
    pub batch_norms: Vec<(String, Var)>,
}

impl<'a, T: Scalar> Recorder<'a, T> {
    /// Registers every trainable parameter on the tape, in store order.
    pub fn new(params: &'a ParamStore<T>, tape: &'a mut Tape<T>, mode: Mode, batch_norm: bool) -> Self {
        let mut vars = HashMap::new();
        for (name, value) in params.trainable() {
            vars.insert(name.to_string(), tape.param(name, value.clone()));
        }
        Self {
            params,
            tape,
            vars,
            mode,
            batch_norm,
            batch_norms: Vec::new(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("model has no parameter {name}")))
    }

    /// `{prefix}.w` with the optional bias `{prefix}.b`.
    pub fn conv(&mut self, x: Var, prefix: &str, stride: usize) -> Result<Var> {
        let w = self.var(&format!("{prefix}.w"))?;
        let b = self.vars.get(&format!("{prefix}.b")).copied();
        self.tape.conv(x, w, b, stride, Padding::Zero)
    }

    /// Identity when batch norm is off.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        if !self.batch_norm {
            return Ok(x);
        }
        let gamma = self.var(&format!("{prefix}.gamma"))?;
        let beta = self.var(&format!("{prefix}.beta"))?;
        let eps = T::lit(BN_EPS);
        match self.mode {
            Mode::Train => {
                let y = self.tape.batch_norm(x, gamma, beta, eps)?;
                self.batch_norms.push((prefix.to_string(), y));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.params.get(&format!("{prefix}.mean"))?.data().to_vec();
                let var = self.params.get(&format!("{prefix}.var"))?.data().to_vec();
                self.tape.batch_norm_frozen(x, gamma, beta, mean, var, eps)
            }
        }
    }

    /// Global average pooling followed by the `head` affine map.
    pub fn head(&mut self, features: Var) -> Result<Var> {
        let pooled = self.tape.global_avg_pool(features)?;
        let (w, b) = (self.var("head.w")?, self.var("head.b")?);
        self.tape.linear(pooled, w, b)
    }
}

/// Folds the batch statistics of a training pass into the running averages
/// `{prefix}.mean` / `{prefix}.var` (unbiased variance).
pub fn update_running_stats<T: Scalar>(
    params: &mut ParamStore<T>,
    tape: &Tape<T>,
    batch_norms: &[(String, Var)],
) -> Result<()> {
    let m = T::lit(BN_MOMENTUM);
    for (prefix, node) in batch_norms {
        let Some((mean, var)) = tape.batch_stats(*node) else {
            continue;
        };
        let (n, _, h, w) = tape.value(*node).dims4()?;
        let count = n * h * w;
        let unbias = if count > 1 {
            T::count(count) / T::count(count - 1)
        } else {
            T::one()
        };
        let run_mean = params.get_mut(&format!("{prefix}.mean"))?;
        for (r, &b) in run_mean.data_mut().iter_mut().zip(mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        let run_var = params.get_mut(&format!("{prefix}.var"))?;
        for (r, &b) in run_var.data_mut().iter_mut().zip(var) {
            *r = (T::one() - m) * *r + m * b * unbias;
        }
    }
    Ok(())
}
