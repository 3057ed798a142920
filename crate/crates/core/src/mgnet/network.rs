use crate::autodiff::{Array, Tape, Var};
use crate::error::{contract, Result};
use crate::params::ParamStore;
use crate::recorder::{update_running_stats, Mode, Recorder};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::{Padding, Tensor};

use super::skeleton::{mgnet_skeleton, v_mgnet_skeleton, LevelOps, Trace};
use super::{ExtractorStrategy, FInit, MgNetConfig, PiVariant, Smoothing};

/// Nodes recorded by one batched forward pass.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub logits: Var,
    /// Features fed to the head: `u^J`, or `u^1` for a V-MgNet.
    pub features: Var,
    pub trace: Trace<Var>,
    /// Training-mode batch-norm nodes by parameter prefix.
    pub batch_norms: Vec<(String, Var)>,
}

/// A configured MgNet with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MgNet<T> {
    cfg: MgNetConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> MgNet<T> {
    /// He-initialized network, deterministic in `seed`.
    pub fn new(cfg: MgNetConfig, seed: u64) -> Result<Self> {
        let specs = cfg.param_specs()?;
        let params = ParamStore::from_specs(&specs, &mut seeded(seed))?;
        Ok(Self { cfg, params })
    }

    /// Network whose parameters are copied from `params` (checked by name
    /// and shape).
    pub fn from_params(cfg: MgNetConfig, params: &ParamStore<T>) -> Result<Self> {
        let mut net = Self::new(cfg, 0)?;
        net.params.load_from(params)?;
        Ok(net)
    }

    pub fn config(&self) -> &MgNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Sets the multistep weights `alpha^(l,i)` (a point of the simplex).
    pub fn set_multistep_weights(&mut self, level: usize, i: usize, weights: &[f64]) -> Result<()> {
        contract(weights.len() == i, || format!("step {i} combines {i} iterates"))?;
        let sum: f64 = weights.iter().sum();
        contract(
            weights.iter().all(|&w| w >= 0.0) && (sum - 1.0).abs() < 1e-12,
            || format!("weights {weights:?} are not on the simplex"),
        )?;
        if i == 1 {
            return Ok(());
        }
        // softmax(ln w) = w, exactly so for one-hot w
        let logits = weights.iter().map(|&w| T::lit(w.ln())).collect();
        self.params.set(&format!("l{level}.step{i}.logits"), logits)
    }

    /// Puts every multistep combination on its most recent iterate, which
    /// reduces the model to single-step smoothing.
    pub fn set_multistep_degenerate(&mut self) -> Result<()> {
        for l in 1..=self.cfg.levels {
            for i in 2..=self.cfg.nu[l - 1] {
                let mut w = vec![0.0; i];
                w[i - 1] = 1.0;
                self.set_multistep_weights(l, i, &w)?;
            }
        }
        Ok(())
    }

    /// Records the network on `tape` for an `[n, c, h, w]` input node.
    ///
    /// Every trainable parameter is registered on the tape, in store order,
    /// before the first operation.
    pub fn record(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<BatchOutput> {
        let (_, c, _, _) = tape.value(x).dims4()?;
        contract(c == self.cfg.in_channels, || {
            format!("input has {c} channels, the network expects {}", self.cfg.in_channels)
        })?;
        let mut ops = NetOps::new(self, tape, mode);
        let f1 = ops.f_in(x)?;
        let (features, trace) = if self.cfg.is_v_cycle() {
            v_mgnet_skeleton(&mut ops, f1, &self.cfg.nu, &self.cfg.nu_up, self.cfg.smoothing)?
        } else {
            let trace = mgnet_skeleton(&mut ops, f1, &self.cfg.nu, self.cfg.smoothing)?;
            (*trace.output(), trace)
        };
        let logits = ops.rec.head(features)?;
        Ok(BatchOutput {
            logits,
            features,
            trace,
            batch_norms: ops.rec.batch_norms,
        })
    }

    /// Mean cross-entropy of a labelled batch.
    pub fn record_loss(
        &self,
        tape: &mut Tape<T>,
        images: Array<T>,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(Var, BatchOutput)> {
        let x = tape.input(images);
        let out = self.record(tape, x, mode)?;
        let loss = tape.softmax_cross_entropy(out.logits, labels)?;
        Ok((loss, out))
    }

    /// Folds the batch statistics of a training pass into the running
    /// averages (unbiased variance).
    pub fn update_running_stats(&mut self, tape: &Tape<T>, batch_norms: &[(String, Var)]) -> Result<()> {
        update_running_stats(&mut self.params, tape, batch_norms)
    }

    /// Evaluation-mode forward pass of one sample: the head features
    /// (`u^J`, or `u^1` for a V-MgNet) and the down-sweep trace.
    pub fn forward(&self, f: &Tensor<T>) -> Result<(Tensor<T>, Trace<Tensor<T>>)> {
        let mut tape = Tape::new();
        let x = tape.input(Array::batch(&[f])?);
        let out = self.record(&mut tape, x, Mode::Eval)?;
        let one = |v: &Var| -> Result<Tensor<T>> { Ok(tape.value(*v).unbatch()?.remove(0)) };
        let trace = Trace {
            f: out.trace.f.iter().map(one).collect::<Result<_>>()?,
            u: out
                .trace
                .u
                .iter()
                .map(|l| l.iter().map(one).collect::<Result<Vec<_>>>())
                .collect::<Result<_>>()?,
        };
        Ok((one(&out.features)?, trace))
    }

    /// `f_in` alone, in evaluation mode.
    pub fn f_in(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.input(Array::batch(&[f])?);
        let y = {
            let mut ops = NetOps::new(self, &mut tape, Mode::Eval);
            ops.f_in(x)?
        };
        Ok(tape.value(y).unbatch()?.remove(0))
    }

    /// Class probabilities from head features: spatial average, affine map,
    /// softmax.
    pub fn classify(&self, features: &Tensor<T>) -> Result<Vec<T>> {
        contract(features.channels() == self.cfg.c_u, || {
            format!("head expects {} channels, got {}", self.cfg.c_u, features.channels())
        })?;
        let pooled = features.channel_means();
        let w = self.params.get("head.w")?.data();
        let b = self.params.get("head.b")?.data();
        let logits: Vec<T> = (0..self.cfg.classes)
            .map(|k| {
                let mut acc = b[k];
                for (j, &p) in pooled.iter().enumerate() {
                    acc += w[k * self.cfg.c_u + j] * p;
                }
                acc
            })
            .collect();
        Ok(crate::tensor::softmax(&logits))
    }

    /// Evaluation-mode class probabilities for a batch of samples.
    pub fn predict_proba(&self, images: &[&Tensor<T>]) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::new();
        let x = tape.input(Array::batch(images)?);
        let out = self.record(&mut tape, x, Mode::Eval)?;
        let logits = tape.value(out.logits);
        Ok(logits
            .data()
            .chunks(self.cfg.classes)
            .map(crate::tensor::softmax)
            .collect())
    }
}

struct NetOps<'a, T> {
    cfg: &'a MgNetConfig,
    rec: Recorder<'a, T>,
}

impl<'a, T: Scalar> NetOps<'a, T> {
    fn new(net: &'a MgNet<T>, tape: &'a mut Tape<T>, mode: Mode) -> Self {
        Self {
            cfg: &net.cfg,
            rec: Recorder::new(&net.params, tape, mode, net.cfg.use_batchnorm),
        }
    }

    fn f_in(&mut self, x: Var) -> Result<Var> {
        let y = self.rec.conv(x, "theta0", 1)?;
        let y = self.rec.batch_norm(y, "theta0.bn")?;
        let y = self.rec.tape.relu(y)?;
        match self.cfg.f_in {
            FInit::ConvRelu => Ok(y),
            FInit::ConvReluMaxpool => self.rec.tape.max_pool(y, 1, 2),
        }
    }

    /// `relu(bn_e(eta(relu(bn_r(r)))))`.
    fn extractor(&mut self, r: Var, eta: &str, bn_prefix: &str) -> Result<Var> {
        let y = self.rec.batch_norm(r, &format!("{bn_prefix}.bn_r"))?;
        let y = self.rec.tape.relu(y)?;
        let y = self.rec.conv(y, eta, 1)?;
        let y = self.rec.batch_norm(y, &format!("{bn_prefix}.bn_e"))?;
        self.rec.tape.relu(y)
    }

    fn zeros_like_coarse(&mut self, u: Var) -> Result<Var> {
        let (n, c, h, w) = self.rec.tape.value(u).dims4()?;
        Ok(self.rec.tape.input(Array::zeros(&[n, c, h.div_ceil(2), w.div_ceil(2)])))
    }
}

impl<T: Scalar> LevelOps for NetOps<'_, T> {
    type Value = Var;

    fn zero_feature(&mut self, f1: &Var) -> Result<Var> {
        let (n, _, h, w) = self.rec.tape.value(*f1).dims4()?;
        Ok(self.rec.tape.input(Array::zeros(&[n, self.cfg.c_u, h, w])))
    }

    fn data_feature(&mut self, level: usize, u: &Var) -> Result<Option<Var>> {
        if !self.cfg.has_data_feature(level) {
            return Ok(None);
        }
        let w = self.rec.var(&format!("l{level}.A.w"))?;
        self.rec.tape.conv(*u, w, None, 1, Padding::Zero).map(Some)
    }

    fn extract(&mut self, level: usize, i: usize, r: &Var) -> Result<Var> {
        let eta = match self.cfg.extractor {
            ExtractorStrategy::Variable => format!("l{level}.eta{i}"),
            ExtractorStrategy::Constant | ExtractorStrategy::Scaled => format!("l{level}.eta"),
        };
        let y = self.extractor(*r, &eta, &format!("l{level}.B{i}"))?;
        if self.cfg.extractor == ExtractorStrategy::Scaled {
            let alpha = self.rec.var(&format!("l{level}.alpha{i}"))?;
            return self.rec.tape.scale(y, alpha);
        }
        Ok(y)
    }

    fn restrict(&mut self, level: usize, r: &Var) -> Result<Var> {
        let w = self.rec.var(&format!("l{level}.R.w"))?;
        self.rec.tape.conv(*r, w, None, 2, Padding::Zero)
    }

    fn interpolate(&mut self, level: usize, u: &Var) -> Result<Var> {
        match self.cfg.pi {
            PiVariant::Pi0 => self.zeros_like_coarse(*u),
            PiVariant::Pi1 => {
                let w = self.rec.var(&format!("l{level}.pi.w"))?;
                self.rec.tape.conv(*u, w, None, 2, Padding::Zero)
            }
            PiVariant::Pi2 => {
                let w = self.rec.var(&format!("l{level}.pi.w"))?;
                self.rec.tape.depthwise(*u, w, 2, Padding::Zero)
            }
        }
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.rec.tape.add(*a, *b)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.rec.tape.sub(*a, *b)
    }

    fn blend(&mut self, level: usize, i: usize, a: &Var, b: &Var) -> Result<Var> {
        debug_assert_eq!(self.cfg.smoothing, Smoothing::ChebyshevSemi);
        let w = self.rec.var(&format!("l{level}.omega{i}"))?;
        self.rec.tape.blend(*a, *b, w)
    }

    fn combine(&mut self, level: usize, i: usize, candidates: &[Var]) -> Result<Var> {
        let w = if i == 1 {
            self.rec.tape.input(Array::from_vec(vec![T::one()]))
        } else {
            let logits = self.rec.var(&format!("l{level}.step{i}.logits"))?;
            self.rec.tape.softmax_vec(logits)?
        };
        let weights = self.rec.tape.value(w).data();
        let sum: T = weights.iter().copied().sum();
        contract(
            weights.iter().all(|&v| v >= T::zero()) && (sum - T::one()).abs() <= T::lit(1e-9),
            || format!("level {level} step {i}: multistep weights leave the simplex"),
        )?;
        self.rec.tape.combine(candidates, w)
    }

    fn prolongate(&mut self, level: usize, d: &Var, like: &Var) -> Result<Var> {
        let (_, _, h, w) = self.rec.tape.value(*like).dims4()?;
        let k = self.rec.var(&format!("l{level}.P.w"))?;
        self.rec.tape.conv_transpose(*d, k, 2, Padding::Zero, h, w)
    }

    fn extract_up(&mut self, level: usize, i: usize, r: &Var) -> Result<Var> {
        let prefix = format!("l{level}.up{i}");
        self.extractor(*r, &format!("{prefix}.eta"), &prefix)
    }
}
