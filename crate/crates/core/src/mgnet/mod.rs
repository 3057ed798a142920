//! The MgNet family: configuration, parameter layout and counting, the
//! backend-agnostic fine-to-coarse skeleton and the trainable network.

mod network;
mod skeleton;

pub use crate::recorder::Mode;
pub use network::{BatchOutput, MgNet};
pub use skeleton::{mgnet_skeleton, smooth_variant_step, v_mgnet_skeleton, LevelOps, Trace};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::params::{count_trainable, Init, ParamSpec};

/// How the `nu_l` feature-extraction steps on one level are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// `u^i = u^(i-1) + B^i (f - A u^(i-1))`.
    #[default]
    SingleStep,
    /// Simplex-weighted combination of single steps from every earlier iterate.
    MultiStep,
    /// `omega^i` times a single step plus `(1 - omega^i) u^(i-2)`.
    ChebyshevSemi,
}

/// Sharing of the extractor kernels `eta^(l,i)` along a level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorStrategy {
    /// One `eta^l` for every step.
    Constant,
    /// One `eta^l` scaled by a trainable `alpha_i` per step.
    Scaled,
    /// Independent `eta^(l,i)`.
    #[default]
    Variable,
}

/// Feature transfer `Pi` to the next level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiVariant {
    /// `Pi = 0`.
    Pi0,
    /// Full stride-2 convolution `c_u -> c_u`.
    #[default]
    Pi1,
    /// One single-channel stride-2 kernel applied to every channel.
    Pi2,
}

/// Data initialization `f_in`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FInit {
    /// `relu(theta0 * f)`.
    #[default]
    ConvRelu,
    /// `maxpool_2(relu(theta0 * f))`.
    ConvReluMaxpool,
}

/// Architecture of one MgNet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgNetConfig {
    /// Number of grid levels `J`.
    pub levels: usize,
    /// Smoothing steps per level; `nu_J = 0` leaves the coarsest level to the
    /// head.
    pub nu: Vec<usize>,
    pub c_u: usize,
    pub c_f: usize,
    pub in_channels: usize,
    pub classes: usize,
    #[serde(default)]
    pub smoothing: Smoothing,
    #[serde(default)]
    pub extractor: ExtractorStrategy,
    #[serde(default)]
    pub pi: PiVariant,
    #[serde(default)]
    pub use_batchnorm: bool,
    #[serde(default)]
    pub f_in: FInit,
    /// Kernel half-width `k` of every convolution (window `2k+1`).
    #[serde(default = "default_half_width")]
    pub half_width: usize,
    /// Up-sweep smoothing counts; non-empty turns the model into a V-MgNet.
    #[serde(default)]
    pub nu_up: Vec<usize>,
}

fn default_half_width() -> usize {
    1
}


impl MgNetConfig {
    /// Plain single-step MgNet with variable extractors and `Pi1`.
    pub fn new(levels: usize, nu: usize, c_u: usize, c_f: usize, in_channels: usize, classes: usize) -> Self {
        Self {
            levels,
            nu: vec![nu; levels],
            c_u,
            c_f,
            in_channels,
            classes,
            smoothing: Smoothing::SingleStep,
            extractor: ExtractorStrategy::Variable,
            pi: PiVariant::Pi1,
            use_batchnorm: false,
            f_in: FInit::ConvRelu,
            half_width: 1,
            nu_up: Vec::new(),
        }
    }

    /// CIFAR-scale layout with `nu` smoothings on the three finest grids
    /// (32, 16, 8) and a head-only 4x4 level, batch norm on.
    pub fn cifar(nu: usize, c_u: usize, c_f: usize, pi: PiVariant, classes: usize) -> Self {
        Self {
            nu: vec![nu, nu, nu, 0],
            pi,
            use_batchnorm: true,
            ..Self::new(4, nu, c_u, c_f, 3, classes)
        }
    }

    /// Named presets accepted on the command line.
    pub fn preset(name: &str, classes: usize) -> Option<Self> {
        let (cu, cf, pi) = match name {
            "mgnet-256-256-pi0" => (256, 256, PiVariant::Pi0),
            "mgnet-256-256-pi1" => (256, 256, PiVariant::Pi1),
            "mgnet-256-256-pi2" => (256, 256, PiVariant::Pi2),
            "mgnet-256-512-pi0" => (256, 512, PiVariant::Pi0),
            "mgnet-256-512-pi1" => (256, 512, PiVariant::Pi1),
            "mgnet-256-512-pi2" => (256, 512, PiVariant::Pi2),
            _ => return None,
        };
        Some(Self::cifar(2, cu, cf, pi, classes))
    }

    pub const PRESETS: [&'static str; 6] = [
        "mgnet-256-256-pi0",
        "mgnet-256-256-pi1",
        "mgnet-256-256-pi2",
        "mgnet-256-512-pi0",
        "mgnet-256-512-pi1",
        "mgnet-256-512-pi2",
    ];

    pub fn validate(&self) -> Result<()> {
        contract(self.levels >= 1, || "at least one level".into())?;
        contract(self.nu.len() == self.levels, || {
            format!("{} smoothing counts for {} levels", self.nu.len(), self.levels)
        })?;
        contract(self.c_u >= 1 && self.c_f >= 1 && self.in_channels >= 1, || {
            "channel counts must be positive".into()
        })?;
        contract(self.classes >= 2, || "at least two classes".into())?;
        contract(self.nu_up.is_empty() || self.nu_up.len() == self.levels, || {
            format!("{} up-sweep counts for {} levels", self.nu_up.len(), self.levels)
        })
    }

    pub fn is_v_cycle(&self) -> bool {
        !self.nu_up.is_empty()
    }

    fn taps(&self) -> usize {
        2 * self.half_width + 1
    }

    /// Whether level `l` owns a data-feature map `A^l`.
    pub fn has_data_feature(&self, level: usize) -> bool {
        level < self.levels || self.nu[level - 1] > 0
    }

    /// Every stored array in construction order.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        let t = self.taps();
        let (cu, cf) = (self.c_u, self.c_f);
        let bn = self.use_batchnorm;
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, trainable: bool, init: Init| {
            specs.push(ParamSpec {
                name,
                shape,
                trainable,
                init,
            })
        };
        let conv = |o: usize, i: usize| (vec![o, i, t, t], Init::HeNormal { fan_in: i * t * t });
        let conv_bias = |push: &mut dyn FnMut(String, Vec<usize>, bool, Init), prefix: &str, o: usize, i: usize| {
            let (shape, init) = conv(o, i);
            push(format!("{prefix}.w"), shape, true, init);
            if !bn {
                push(format!("{prefix}.b"), vec![o], true, Init::Constant(0.0));
            }
        };
        let batch_norm = |push: &mut dyn FnMut(String, Vec<usize>, bool, Init), prefix: &str, c: usize| {
            if bn {
                push(format!("{prefix}.gamma"), vec![c], true, Init::Constant(1.0));
                push(format!("{prefix}.beta"), vec![c], true, Init::Constant(0.0));
                push(format!("{prefix}.mean"), vec![c], false, Init::Constant(0.0));
                push(format!("{prefix}.var"), vec![c], false, Init::Constant(1.0));
            }
        };

        conv_bias(&mut push, "theta0", cf, self.in_channels);
        batch_norm(&mut push, "theta0.bn", cf);
        for l in 1..=self.levels {
            let nu = self.nu[l - 1];
            if self.has_data_feature(l) {
                let (shape, init) = conv(cf, cu);
                push(format!("l{l}.A.w"), shape, true, init);
            }
            if nu > 0 {
                match self.extractor {
                    ExtractorStrategy::Constant => conv_bias(&mut push, &format!("l{l}.eta"), cu, cf),
                    ExtractorStrategy::Scaled => {
                        conv_bias(&mut push, &format!("l{l}.eta"), cu, cf);
                        for i in 1..=nu {
                            push(format!("l{l}.alpha{i}"), vec![1], true, Init::Constant(1.0));
                        }
                    }
                    ExtractorStrategy::Variable => {
                        for i in 1..=nu {
                            conv_bias(&mut push, &format!("l{l}.eta{i}"), cu, cf);
                        }
                    }
                }
                for i in 1..=nu {
                    batch_norm(&mut push, &format!("l{l}.B{i}.bn_r"), cf);
                    batch_norm(&mut push, &format!("l{l}.B{i}.bn_e"), cu);
                }
                match self.smoothing {
                    Smoothing::SingleStep => {}
                    Smoothing::ChebyshevSemi => {
                        // omega^(l,1) is fixed at 1
                        for i in 2..=nu {
                            push(format!("l{l}.omega{i}"), vec![1], true, Init::Constant(1.0));
                        }
                    }
                    Smoothing::MultiStep => {
                        for i in 2..=nu {
                            push(format!("l{l}.step{i}.logits"), vec![i], true, Init::Constant(0.0));
                        }
                    }
                }
            }
            if l < self.levels {
                let (shape, init) = conv(cf, cf);
                push(format!("l{l}.R.w"), shape, true, init);
                match self.pi {
                    PiVariant::Pi0 => {}
                    PiVariant::Pi1 => {
                        let (shape, init) = conv(cu, cu);
                        push(format!("l{l}.pi.w"), shape, true, init);
                    }
                    PiVariant::Pi2 => push(
                        format!("l{l}.pi.w"),
                        vec![1, 1, t, t],
                        true,
                        Init::HeNormal { fan_in: t * t },
                    ),
                }
                if self.is_v_cycle() {
                    let (shape, init) = conv(cu, cu);
                    push(format!("l{l}.P.w"), shape, true, init);
                    for i in 1..=self.nu_up[l - 1] {
                        conv_bias(&mut push, &format!("l{l}.up{i}.eta"), cu, cf);
                        batch_norm(&mut push, &format!("l{l}.up{i}.bn_r"), cf);
                        batch_norm(&mut push, &format!("l{l}.up{i}.bn_e"), cu);
                    }
                }
            }
        }
        // zero head: predictions start uniform, loss starts at ln(classes)
        push("head.w".into(), vec![self.classes, cu], true, Init::Constant(0.0));
        push("head.b".into(), vec![self.classes], true, Init::Constant(0.0));
        Ok(specs)
    }
}

/// Number of trainable scalars: convolution weights and biases, batch-norm
/// scale and shift, variant coefficients and the head.
pub fn count_params(cfg: &MgNetConfig) -> Result<usize> {
    Ok(count_trainable(&cfg.param_specs()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(i: usize, o: usize) -> usize {
        9 * i * o
    }

    #[test]
    fn head_alone() {
        let cfg = MgNetConfig::new(1, 0, 256, 256, 3, 10);
        let specs = cfg.param_specs().unwrap();
        let head: usize = specs.iter().filter(|s| s.name.starts_with("head")).map(|s| s.numel()).sum();
        assert_eq!(head, 2570);
    }

    #[test]
    fn cifar_layout_count_by_hand() {
        let (cu, cf) = (256, 512);
        let cfg = MgNetConfig::cifar(2, cu, cf, PiVariant::Pi1, 10);
        let bn = |c: usize| 2 * c;
        let expect = conv(3, cf) + bn(cf)
            + 3 * conv(cu, cf)
            + 6 * (conv(cf, cu) + bn(cf) + bn(cu))
            + 3 * conv(cf, cf)
            + 3 * conv(cu, cu)
            + cu * 10
            + 10;
        assert_eq!(count_params(&cfg).unwrap(), expect);
    }

    #[test]
    fn constant_extractor_shares_one_kernel_per_level() {
        let mut cfg = MgNetConfig::new(2, 3, 4, 4, 1, 2);
        cfg.extractor = ExtractorStrategy::Constant;
        let specs = cfg.param_specs().unwrap();
        assert_eq!(specs.iter().filter(|s| s.name.contains(".eta")).count(), 2 * 2);
        assert_eq!(specs.iter().filter(|s| s.name.ends_with(".A.w")).count(), 2);
    }

    #[test]
    fn pi2_kernel_is_single_channel() {
        let mut cfg = MgNetConfig::new(2, 1, 8, 8, 1, 2);
        let pi1 = count_params(&cfg).unwrap();
        cfg.pi = PiVariant::Pi2;
        let pi2 = count_params(&cfg).unwrap();
        assert_eq!(pi1 - pi2, 9 * 8 * 8 - 9);
    }

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = MgNetConfig::cifar(2, 16, 32, PiVariant::Pi2, 10);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: MgNetConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let minimal: MgNetConfig =
            serde_json::from_str(r#"{"levels":2,"nu":[1,1],"c_u":4,"c_f":4,"in_channels":1,"classes":2}"#).unwrap();
        assert_eq!(minimal.half_width, 1);
        assert!(minimal.validate().is_ok());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = MgNetConfig::new(2, 1, 4, 4, 1, 2);
        cfg.nu = vec![1];
        assert!(cfg.validate().is_err());
        let mut cfg = MgNetConfig::new(2, 1, 4, 4, 1, 2);
        cfg.classes = 1;
        assert!(count_params(&cfg).is_err());
    }
}
