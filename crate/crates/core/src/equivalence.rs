//! Executable checks of the structural identities between multigrid, MgNet
//! and the residual CNN families. Each check runs both sides independently
//! and reports the largest entrywise disagreement.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classic::{mg_resnet_step, resnet_block, sigma_resnet_step};
use crate::error::{contract, Result};
use crate::grid::{interpolate_pi, Interpolation, ProlongationMode};
use crate::mgnet::{mgnet_skeleton, ExtractorStrategy, LevelOps, MgNet, MgNetConfig, PiVariant, Smoothing};
use crate::poisson::{PoissonHierarchy, SmootherSpec};
use crate::rng::seeded;
use crate::tensor::{conv2d, relu, ConvKernel, Padding, Tensor};

/// Largest discrepancy accepted by the suite. The identities are exact;
/// only the order of floating-point sums differs between the two sides.
pub const SUITE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TheoremId {
    /// Linear MgNet reproduces the fine-to-coarse multigrid sweep for any Pi.
    Mg0,
    /// MgNet with `A = xi`, `B = sigma eta sigma` is an iResNet in data space.
    Dual,
    /// ResNet states are the activations of the sigma-ResNet iteration.
    Sigma,
    /// Plain CNN layers embed into the Mg-ResNet form.
    Embed,
}

impl TheoremId {
    pub const ALL: [TheoremId; 4] = [Self::Mg0, Self::Dual, Self::Sigma, Self::Embed];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mg0 => "mg0",
            Self::Dual => "dual",
            Self::Sigma => "sigma",
            Self::Embed => "embed",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub theorem: TheoremId,
    pub max_abs_discrepancy: f64,
    /// Number of tensor pairs compared.
    pub instances_tested: usize,
    pub seed: u64,
}

impl EquivalenceReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_abs_discrepancy.is_finite() && self.max_abs_discrepancy < tolerance
    }
}

#[derive(Default)]
struct Discrepancy {
    max: f64,
    count: usize,
}

impl Discrepancy {
    fn compare(&mut self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
        let d = a.max_abs_diff(b)?;
        self.max = if d.is_nan() { f64::NAN } else { self.max.max(d) };
        self.count += 1;
        Ok(())
    }

    fn report(self, theorem: TheoremId, seed: u64) -> EquivalenceReport {
        EquivalenceReport {
            theorem,
            max_abs_discrepancy: self.max,
            instances_tested: self.count,
            seed,
        }
    }
}

/// Linear level operations of the Poisson hierarchy: `A` the level
/// operator, `B` one damped Jacobi sweep, `R` the stride-2 restriction.
struct PoissonOps<'a> {
    hierarchy: &'a PoissonHierarchy<f64>,
    smoother: SmootherSpec,
    pi: PiVariant,
    pi_kernels: &'a [ConvKernel<f64>],
}

impl LevelOps for PoissonOps<'_> {
    type Value = Tensor<f64>;

    fn zero_feature(&mut self, f1: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(Tensor::zeros(f1.height(), f1.width(), f1.channels()))
    }

    fn data_feature(&mut self, level: usize, u: &Tensor<f64>) -> Result<Option<Tensor<f64>>> {
        self.hierarchy.apply_poisson(u, level).map(Some)
    }

    fn extract(&mut self, level: usize, _i: usize, r: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.hierarchy.jacobi_smooth(r, self.smoother, level)
    }

    fn restrict(&mut self, _level: usize, r: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.hierarchy.restrict(r)
    }

    fn interpolate(&mut self, level: usize, u: &Tensor<f64>) -> Result<Tensor<f64>> {
        let variant = match self.pi {
            PiVariant::Pi0 => Interpolation::Zero { channels: u.channels() },
            PiVariant::Pi1 => Interpolation::Full(&self.pi_kernels[level - 1]),
            PiVariant::Pi2 => Interpolation::ChannelWise(&self.pi_kernels[level - 1]),
        };
        interpolate_pi(u, variant)
    }

    fn add(&mut self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
        a.add(b)
    }

    fn sub(&mut self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
        a.sub(b)
    }
}

/// Runs the multigrid sweep and the linear MgNet side by side (with
/// `f_in = id`) for `Pi = 0`, a random full `Pi` and a random channel-wise
/// `Pi`, checking `f_net = f_mg + A u_net^(l,0)` on every level and
/// `u_mg^(l,i) = u_net^(l,i) - u_net^(l,0)` on every iterate.
pub fn verify_mgnet_mg0(size: usize, levels: usize, nu: &[usize], omega: f64, seed: u64) -> Result<EquivalenceReport> {
    let hierarchy = PoissonHierarchy::<f64>::new(size, levels, ProlongationMode::Bilinear)?;
    let smoother = SmootherSpec::one(omega);
    let mut rng = seeded(seed);
    let f = Tensor::random_normal(size, size, 1, 1.0, &mut rng);
    let reference = hierarchy.mg0(&f, nu, smoother)?;
    let mut d = Discrepancy::default();
    for pi in [PiVariant::Pi0, PiVariant::Pi1, PiVariant::Pi2] {
        let pi_kernels: Vec<ConvKernel<f64>> = (1..levels)
            .map(|_| ConvKernel::random(1, 1, 1, true, 0.5, &mut rng))
            .collect();
        let mut ops = PoissonOps {
            hierarchy: &hierarchy,
            smoother,
            pi,
            pi_kernels: &pi_kernels,
        };
        let net = mgnet_skeleton(&mut ops, f.clone(), nu, Smoothing::SingleStep)?;
        for l in 0..levels {
            let u0 = &net.u[l][0];
            let shifted = reference.f[l].add(&hierarchy.apply_poisson(u0, l + 1)?)?;
            d.compare(&net.f[l], &shifted)?;
            for (u_mg, u_net) in reference.u[l].iter().zip(&net.u[l]) {
                d.compare(u_mg, &u_net.sub(u0)?)?;
            }
        }
    }
    Ok(d.report(TheoremId::Mg0, seed))
}

/// Default configuration of the dual check: three levels of three steps,
/// eight channels.
pub fn dual_default_config() -> MgNetConfig {
    MgNetConfig::new(3, 3, 8, 8, 3, 10)
}

/// Side length of the images fed to the data-space checks.
pub const DUAL_IMAGE_SIZE: usize = 8;

/// Runs an MgNet with random weights (biases included, batch norm off) and
/// independently the data-space recursion
/// `f^(l,i) = f^(l,i-1) - xi(sigma(eta^(l,i)(sigma(f^(l,i-1)))))` with
/// `f^(l+1,0) = R f^(l,nu_l)`, checking `f^(l,i) = f^l - xi^l(u^(l,i))` at
/// every iterate.
pub fn verify_dual_iresnet(cfg: &MgNetConfig, seed: u64) -> Result<EquivalenceReport> {
    contract(
        !cfg.use_batchnorm && cfg.smoothing == Smoothing::SingleStep && !cfg.is_v_cycle(),
        || "the dual check needs single-step smoothing without batch norm or up-sweep".into(),
    )?;
    contract(cfg.extractor != ExtractorStrategy::Scaled, || {
        "the dual check needs unscaled extractors".into()
    })?;
    let mut net = MgNet::<f64>::new(cfg.clone(), seed)?;
    let mut rng = seeded(seed ^ 0x9e37_79b9_7f4a_7c15);
    let names: Vec<String> = net.params().iter().map(|(n, _, _)| n.to_string()).collect();
    for name in names.iter().filter(|n| n.ends_with(".b")) {
        let n = net.params().get(name)?.len();
        let bias = Tensor::<f64>::random_normal(1, n, 1, 0.1, &mut rng).into_vec();
        net.params_mut().set(name, bias)?;
    }
    let image = Tensor::random_normal(DUAL_IMAGE_SIZE, DUAL_IMAGE_SIZE, cfg.in_channels, 1.0, &mut rng);
    let (_, trace) = net.forward(&image)?;

    let params = net.params();
    let a = |l: usize| -> Result<Option<ConvKernel<f64>>> {
        if cfg.has_data_feature(l) {
            params.kernel(&format!("l{l}.A")).map(Some)
        } else {
            Ok(None)
        }
    };
    let eta = |l: usize, i: usize| match cfg.extractor {
        ExtractorStrategy::Variable => params.kernel(&format!("l{l}.eta{i}")),
        _ => params.kernel(&format!("l{l}.eta")),
    };
    let mut d = Discrepancy::default();
    let mut f = trace.f[0].clone();
    for l in 1..=cfg.levels {
        let xi = a(l)?;
        for i in 0..=cfg.nu[l - 1] {
            if i > 0 {
                let xi = xi.as_ref().expect("levels that smooth own A");
                let inner = relu(&conv2d(&relu(&f), &eta(l, i)?, 1, Padding::Zero)?);
                f = f.sub(&conv2d(&inner, xi, 1, Padding::Zero)?)?;
            }
            let from_net = match &xi {
                Some(xi) => trace.f[l - 1].sub(&conv2d(&trace.u[l - 1][i], xi, 1, Padding::Zero)?)?,
                None => trace.f[l - 1].clone(),
            };
            d.compare(&f, &from_net)?;
        }
        if l < cfg.levels {
            f = conv2d(&f, &params.kernel(&format!("l{l}.R"))?, 2, Padding::Zero)?;
        }
    }
    Ok(d.report(TheoremId::Dual, seed))
}

/// Channel count of the sigma-transform and embedding checks.
pub const SIGMA_CHANNELS: usize = 8;
pub const EMBED_CHANNELS: usize = 3;
pub const EMBED_IMAGE_SIZE: usize = 6;

/// Runs a ResNet chain from `f^0 = sigma(g^0)` and the sigma-ResNet chain
/// from `g^0`, checking `sigma(g^i) = f^i` at every block.
///
/// The ResNet block adds its branch, the sigma-ResNet step subtracts it,
/// so the latter receives `-xi`.
pub fn verify_resnet_sigma_transform(blocks: usize, seed: u64) -> Result<EquivalenceReport> {
    let c = SIGMA_CHANNELS;
    let mut rng = seeded(seed);
    let mut g = Tensor::random_normal(DUAL_IMAGE_SIZE, DUAL_IMAGE_SIZE, c, 1.0, &mut rng);
    let mut f = relu(&g);
    let mut d = Discrepancy::default();
    for _ in 0..blocks {
        let mut eta = ConvKernel::he_normal(1, c, c, false, &mut rng);
        eta.set_bias(Some(Tensor::<f64>::random_normal(1, c, 1, 0.1, &mut rng).into_vec()))?;
        let xi = ConvKernel::random(1, c, c, true, 0.2, &mut rng);
        f = resnet_block(&f, &xi, &eta)?;
        g = sigma_resnet_step(&g, &xi.neg(), &eta)?;
        d.compare(&relu(&g), &f)?;
    }
    Ok(d.report(TheoremId::Sigma, seed))
}

/// `[id, -id]` as a 1x1 convolution from `c` to `2c` channels.
pub fn split_sign_kernel(c: usize) -> ConvKernel<f64> {
    let mut k = ConvKernel::zeros(0, c, 2 * c, false);
    for j in 0..c {
        k.set(0, 0, j, j, 1.0);
        k.set(0, 0, c + j, j, -1.0);
    }
    k
}

/// The fixed 1x1 kernel `delta([X, Y])_k = -(X_k - Y_k)` from `2c` to `c`
/// channels. With `sigma(x) - sigma(-x) = x` it satisfies
/// `delta(sigma([x, -x])) = -x`.
pub fn delta_hat_kernel(c: usize) -> ConvKernel<f64> {
    let mut k = ConvKernel::zeros(0, 2 * c, c, false);
    for j in 0..c {
        k.set(0, 0, j, j, -1.0);
        k.set(0, 0, j, c + j, 1.0);
    }
    k
}

/// `eta = [id, -id] (chi - id)` as one convolution from `c` to `2c`
/// channels, bias included.
pub fn embedding_eta(chi: &ConvKernel<f64>) -> Result<ConvKernel<f64>> {
    let c = chi.in_channels();
    contract(chi.out_channels() == c, || "chi must map c channels to c".into())?;
    let residual = chi.sub(&ConvKernel::identity(chi.half_width(), c))?;
    let mut eta = ConvKernel::zeros(chi.half_width(), c, 2 * c, true);
    let t = 2 * chi.half_width() + 1;
    for row in 0..t {
        for col in 0..t {
            for o in 0..c {
                for i in 0..c {
                    let v = residual.get(row, col, o, i);
                    eta.set(row, col, o, i, v);
                    eta.set(row, col, c + o, i, -v);
                }
            }
        }
    }
    let b = residual.bias().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; c]);
    let both: Vec<f64> = b.iter().copied().chain(b.iter().map(|v| -v)).collect();
    eta.set_bias(Some(both))?;
    Ok(eta)
}

/// Runs random plain CNN chains (`chi(sigma(f))` and `sigma(chi(f))`) next
/// to their Mg-ResNet embeddings with the shared `xi = delta`, and checks
/// the kernel identity `delta(sigma([x, -x])) = -x` on a random tensor.
pub fn verify_cnn_embedding(layers: usize, seed: u64) -> Result<EquivalenceReport> {
    let c = EMBED_CHANNELS;
    let n = EMBED_IMAGE_SIZE;
    let mut rng = seeded(seed);
    let delta = delta_hat_kernel(c);
    let minus_delta = delta.neg();
    let mut d = Discrepancy::default();

    let x = Tensor::random_normal(n, n, c, 1.0, &mut rng);
    let split = conv2d(&x, &split_sign_kernel(c), 1, Padding::Zero)?;
    d.compare(&conv2d(&relu(&split), &delta, 1, Padding::Zero)?, &x.neg())?;

    let chis: Vec<ConvKernel<f64>> = (0..layers)
        .map(|_| ConvKernel::random(1, c, c, true, 0.4, &mut rng))
        .collect();
    let start = Tensor::random_normal(n, n, c, 1.0, &mut rng);
    let (mut pre, mut pre_emb) = (start.clone(), start.clone());
    let (mut post, mut post_emb) = (start.clone(), start);
    for chi in &chis {
        let eta = embedding_eta(chi)?;
        pre = conv2d(&relu(&pre), chi, 1, Padding::Zero)?;
        pre_emb = mg_resnet_step(&pre_emb, &delta, &eta)?;
        d.compare(&pre, &pre_emb)?;
        post = relu(&conv2d(&post, chi, 1, Padding::Zero)?);
        post_emb = resnet_block(&post_emb, &minus_delta, &eta)?;
        d.compare(&post, &post_emb)?;
    }
    Ok(d.report(TheoremId::Embed, seed))
}

/// One theorem at its default size.
pub fn verify(theorem: TheoremId, seed: u64) -> Result<EquivalenceReport> {
    match theorem {
        TheoremId::Mg0 => verify_mgnet_mg0(17, 3, &[2, 2, 2], 0.8, seed),
        TheoremId::Dual => verify_dual_iresnet(&dual_default_config(), seed),
        TheoremId::Sigma => verify_resnet_sigma_transform(4, seed),
        TheoremId::Embed => verify_cnn_embedding(2, seed),
    }
}

/// Every theorem at its default size, checked in parallel.
pub fn verify_all(seed: u64) -> Result<Vec<EquivalenceReport>> {
    TheoremId::ALL.par_iter().map(|&t| verify(t, seed)).collect()
}
