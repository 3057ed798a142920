//! Classic CNN families written as single-grid iterations, and the full
//! ResNet-18/34 networks.
//!
//! Every block uses stride 1 and zero padding; kernels may carry biases.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape, Var};
use crate::error::{contract, Result};
use crate::params::{count_trainable, Init, ParamSpec, ParamStore};
use crate::recorder::{update_running_stats, Mode, Recorder};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::{conv2d, relu, ConvKernel, Padding, Tensor};

/// The iterative forms side by side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    ClassicPost,
    ClassicPre,
    ResNet,
    IResNet,
    SigmaResNet,
    MgResNet,
    Dense,
}

/// Where the activation sits relative to the convolution in a plain CNN
/// layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActOrder {
    /// `sigma(chi(f))`.
    PostAct,
    /// `chi(sigma(f))`.
    PreAct,
}

/// DenseNet growth rate used when none is given.
pub const DENSENET_GROWTH: usize = 12;

fn conv<T: Scalar>(f: &Tensor<T>, k: &ConvKernel<T>) -> Result<Tensor<T>> {
    conv2d(f, k, 1, Padding::Zero)
}

/// `xi(sigma(eta(f)))`.
fn branch<T: Scalar>(f: &Tensor<T>, xi: &ConvKernel<T>, eta: &ConvKernel<T>) -> Result<Tensor<T>> {
    conv(&relu(&conv(f, eta)?), xi)
}

/// Basic ResNet block `sigma(f + xi(sigma(eta(f))))`.
pub fn resnet_block<T: Scalar>(f: &Tensor<T>, xi: &ConvKernel<T>, eta: &ConvKernel<T>) -> Result<Tensor<T>> {
    Ok(relu(&f.add(&branch(f, xi, eta)?)?))
}

/// Pre-activation block `f + xi(sigma(eta(sigma(f))))`.
pub fn iresnet_block<T: Scalar>(f: &Tensor<T>, xi: &ConvKernel<T>, eta: &ConvKernel<T>) -> Result<Tensor<T>> {
    f.add(&branch(&relu(f), xi, eta)?)
}

/// `sigma(f) - xi(sigma(eta(sigma(f))))`, the ResNet iteration seen from
/// its pre-activation states.
pub fn sigma_resnet_step<T: Scalar>(
    f: &Tensor<T>,
    xi: &ConvKernel<T>,
    eta: &ConvKernel<T>,
) -> Result<Tensor<T>> {
    let s = relu(f);
    s.sub(&branch(&s, xi, eta)?)
}

/// Same map as [`sigma_resnet_step`]; in an Mg-ResNet the `xi` of a level is
/// shared by all its steps.
pub fn mg_resnet_step<T: Scalar>(
    f: &Tensor<T>,
    xi_level: &ConvKernel<T>,
    eta_i: &ConvKernel<T>,
) -> Result<Tensor<T>> {
    sigma_resnet_step(f, xi_level, eta_i)
}

/// One Mg-ResNet level: a single `xi` and one `eta` per step.
#[derive(Clone, Debug, PartialEq)]
pub struct MgResNetLevel<T> {
    pub xi: ConvKernel<T>,
    pub etas: Vec<ConvKernel<T>>,
}

impl<T: Scalar> MgResNetLevel<T> {
    /// All iterates `f^(l,0..=nu)`.
    pub fn run(&self, f: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut states = vec![f.clone()];
        for eta in &self.etas {
            let next = mg_resnet_step(states.last().expect("non-empty"), &self.xi, eta)?;
            states.push(next);
        }
        Ok(states)
    }

    pub fn param_count(&self) -> usize {
        self.xi.param_count() + self.etas.iter().map(ConvKernel::param_count).sum::<usize>()
    }
}

/// `sigma(sum_j theta_j * f_j)` over the whole history.
pub fn densenet_step<T: Scalar>(history: &[&Tensor<T>], thetas: &[ConvKernel<T>]) -> Result<Tensor<T>> {
    contract(!history.is_empty() && history.len() == thetas.len(), || {
        format!("{} history entries for {} kernels", history.len(), thetas.len())
    })?;
    let growth = thetas[0].out_channels();
    contract(thetas.iter().all(|t| t.out_channels() == growth), || {
        "every kernel must produce the growth-rate channel count".into()
    })?;
    let mut acc = conv(history[0], &thetas[0])?;
    for (f, theta) in history.iter().zip(thetas).skip(1) {
        acc = acc.add(&conv(f, theta)?)?;
    }
    Ok(relu(&acc))
}

/// Plain CNN layer.
pub fn classic_cnn_step<T: Scalar>(f: &Tensor<T>, chi: &ConvKernel<T>, order: ActOrder) -> Result<Tensor<T>> {
    match order {
        ActOrder::PostAct => Ok(relu(&conv(f, chi)?)),
        ActOrder::PreAct => conv(&relu(f), chi),
    }
}

/// Stage layout of a CIFAR-style ResNet: a 3x3 stem, then stages of basic
/// blocks whose first block halves the grid (except in the first stage).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetLayout {
    pub blocks: Vec<usize>,
    pub widths: Vec<usize>,
    pub in_channels: usize,
    pub classes: usize,
}

impl ResNetLayout {
    pub fn resnet18(classes: usize) -> Self {
        Self {
            blocks: vec![2, 2, 2, 2],
            widths: vec![64, 128, 256, 512],
            in_channels: 3,
            classes,
        }
    }

    pub fn resnet34(classes: usize) -> Self {
        Self {
            blocks: vec![3, 4, 6, 3],
            ..Self::resnet18(classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        contract(!self.blocks.is_empty() && self.blocks.len() == self.widths.len(), || {
            format!("{} stage block counts for {} widths", self.blocks.len(), self.widths.len())
        })?;
        contract(self.blocks.iter().all(|&b| b >= 1), || "every stage needs a block".into())?;
        contract(self.widths.iter().all(|&w| w >= 1) && self.in_channels >= 1, || {
            "channel counts must be positive".into()
        })?;
        contract(self.classes >= 2, || "at least two classes".into())
    }

    /// Every stored array. Convolutions followed by batch norm carry no
    /// bias; the 1x1 shortcut of a transition block has neither.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        let mut specs = Vec::new();
        let mut conv = |name: String, o: usize, i: usize, taps: usize| {
            specs.push(ParamSpec {
                name: format!("{name}.w"),
                shape: vec![o, i, taps, taps],
                trainable: true,
                init: Init::HeNormal { fan_in: i * taps * taps },
            });
            for (suffix, trainable, value) in
                [("gamma", true, 1.0), ("beta", true, 0.0), ("mean", false, 0.0), ("var", false, 1.0)]
            {
                if taps == 1 {
                    break;
                }
                specs.push(ParamSpec {
                    name: format!("{name}.bn.{suffix}"),
                    shape: vec![o],
                    trainable,
                    init: Init::Constant(value),
                });
            }
        };
        conv("stem".into(), self.widths[0], self.in_channels, 3);
        let mut c_in = self.widths[0];
        for (s, (&blocks, &w)) in self.blocks.iter().zip(&self.widths).enumerate() {
            for b in 0..blocks {
                let p = format!("s{}.b{}", s + 1, b + 1);
                conv(format!("{p}.eta"), w, c_in, 3);
                conv(format!("{p}.xi"), w, w, 3);
                if c_in != w || (b == 0 && s > 0) {
                    conv(format!("{p}.R"), w, c_in, 1);
                }
                c_in = w;
            }
        }
        specs.push(ParamSpec {
            name: "head.w".into(),
            shape: vec![self.classes, c_in],
            trainable: true,
            init: Init::Constant(0.0),
        });
        specs.push(ParamSpec {
            name: "head.b".into(),
            shape: vec![self.classes],
            trainable: true,
            init: Init::Constant(0.0),
        });
        Ok(specs)
    }
}

/// Trainable scalars of a ResNet layout.
pub fn resnet_param_count(layout: &ResNetLayout) -> Result<usize> {
    Ok(count_trainable(&layout.param_specs()?))
}

/// A ResNet with batch norm after every 3x3 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ResNet<T> {
    layout: ResNetLayout,
    params: ParamStore<T>,
}

impl<T: Scalar> ResNet<T> {
    pub fn new(layout: ResNetLayout, seed: u64) -> Result<Self> {
        let params = ParamStore::from_specs(&layout.param_specs()?, &mut seeded(seed))?;
        Ok(Self { layout, params })
    }

    pub fn layout(&self) -> &ResNetLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Records the network; returns the logits and the training-mode
    /// batch-norm nodes.
    pub fn record(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<(Var, Vec<(String, Var)>)> {
        let (_, c, _, _) = tape.value(x).dims4()?;
        contract(c == self.layout.in_channels, || {
            format!("input has {c} channels, the network expects {}", self.layout.in_channels)
        })?;
        let mut rec = Recorder::new(&self.params, tape, mode, true);
        let conv_bn = |rec: &mut Recorder<'_, T>, x: Var, name: &str, stride: usize| -> Result<Var> {
            let y = rec.conv(x, name, stride)?;
            rec.batch_norm(y, &format!("{name}.bn"))
        };
        let y = conv_bn(&mut rec, x, "stem", 1)?;
        let mut f = rec.tape.relu(y)?;
        for (s, &blocks) in self.layout.blocks.iter().enumerate() {
            for b in 0..blocks {
                let p = format!("s{}.b{}", s + 1, b + 1);
                let transition = self.params.contains(&format!("{p}.R.w"));
                let stride = if transition && s > 0 && b == 0 { 2 } else { 1 };
                let y = conv_bn(&mut rec, f, &format!("{p}.eta"), stride)?;
                let y = rec.tape.relu(y)?;
                let y = conv_bn(&mut rec, y, &format!("{p}.xi"), 1)?;
                let skip = if transition { rec.conv(f, &format!("{p}.R"), stride)? } else { f };
                let sum = rec.tape.add(skip, y)?;
                f = rec.tape.relu(sum)?;
            }
        }
        let logits = rec.head(f)?;
        Ok((logits, rec.batch_norms))
    }

    pub fn update_running_stats(&mut self, tape: &Tape<T>, batch_norms: &[(String, Var)]) -> Result<()> {
        update_running_stats(&mut self.params, tape, batch_norms)
    }

    /// Evaluation-mode class probabilities.
    pub fn predict_proba(&self, images: &[&Tensor<T>]) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::new();
        let x = tape.input(Array::batch(images)?);
        let (logits, _) = self.record(&mut tape, x, Mode::Eval)?;
        Ok(tape
            .value(logits)
            .data()
            .chunks(self.layout.classes)
            .map(crate::tensor::softmax)
            .collect())
    }
}
