//! Grid hierarchies and the operators that move data between levels:
//! prolongation, restriction, pooling and the learned interpolations.

use serde::{Deserialize, Serialize};

use crate::conv;
use crate::error::{contract, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv2d, conv2d_depthwise, ConvKernel, Padding, Tensor};

/// Nested grid sizes, finest first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridHierarchy {
    sizes: Vec<(usize, usize)>,
}

impl GridHierarchy {
    /// Odd-size chain `m_l = 2^(s-l+1) + 1`, `n_l = 2^(t-l+1) + 1` for
    /// `l = 1..=levels`.
    pub fn multigrid(s: u32, t: u32, levels: usize) -> Result<Self> {
        contract(levels >= 1, || "need at least one level".into())?;
        contract(levels as u32 <= s.min(t), || {
            format!("{levels} levels need exponents of at least {levels}, got ({s}, {t})")
        })?;
        let sizes = (0..levels as u32)
            .map(|l| ((1usize << (s - l)) + 1, (1usize << (t - l)) + 1))
            .collect();
        Ok(Self { sizes })
    }

    /// Square odd chain starting from `fine = 2^s + 1`.
    pub fn from_fine_size(fine: usize, levels: usize) -> Result<Self> {
        let s = odd_chain_exponent(fine).ok_or_else(|| {
            crate::Error::Contract(format!("grid size {fine} is not of the form 2^s + 1"))
        })?;
        Self::multigrid(s, s, levels)
    }

    /// Halving chain `m_(l+1) = ceil(m_l / 2)` used by strided networks.
    pub fn halving(height: usize, width: usize, levels: usize) -> Result<Self> {
        contract(levels >= 1, || "need at least one level".into())?;
        let mut sizes = vec![(height, width)];
        for _ in 1..levels {
            let &(h, w) = sizes.last().unwrap();
            contract(h > 1 || w > 1, || {
                format!("{height}x{width} cannot be halved {levels} times")
            })?;
            sizes.push((conv::strided_len(h, 2), conv::strided_len(w, 2)));
        }
        Ok(Self { sizes })
    }

    pub fn levels(&self) -> usize {
        self.sizes.len()
    }

    /// Size of level `level` (1-based, finest is 1).
    pub fn size(&self, level: usize) -> (usize, usize) {
        self.sizes[level - 1]
    }

    pub fn sizes(&self) -> &[(usize, usize)] {
        &self.sizes
    }

    /// Whether every coarse level is exactly the coincident-node subgrid of
    /// the level above it.
    pub fn is_odd_chain(&self) -> bool {
        self.sizes.windows(2).all(|w| {
            let ((mf, nf), (mc, nc)) = (w[0], w[1]);
            mf == 2 * mc - 1 && nf == 2 * nc - 1 && mc >= 2 && nc >= 2
        })
    }
}

/// `Some(s)` when `n == 2^s + 1` with `s >= 1`.
pub fn odd_chain_exponent(n: usize) -> Option<u32> {
    if n < 3 {
        return None;
    }
    let m = n - 1;
    m.is_power_of_two().then(|| m.trailing_zeros())
}

/// Which piecewise (bi)linear interpolant the transfer operators follow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProlongationMode {
    /// Tensor-product bilinear elements: cell centres average four corners.
    #[default]
    Bilinear,
    /// Linear elements on triangles split along the anti-diagonal: cell
    /// centres average the two anti-diagonal corners.
    Linear,
}

/// Coarse-to-fine nodal interpolation, channel by channel.
///
/// An `m x n` grid maps to `(2m-1) x (2n-1)`: coincident nodes are copied,
/// edge midpoints average their two neighbours and cell centres follow
/// `mode`.
pub fn prolongate<T: Scalar>(coarse: &Tensor<T>, mode: ProlongationMode) -> Tensor<T> {
    let (m, n, c) = coarse.shape();
    let half = T::lit(0.5);
    let quarter = T::lit(0.25);
    Tensor::from_fn(2 * m - 1, 2 * n - 1, c, |fi, fj, ch| {
        let (i, j) = (fi / 2, fj / 2);
        let v = |a: usize, b: usize| coarse.get(a, b, ch);
        match (fi % 2, fj % 2) {
            (0, 0) => v(i, j),
            (0, _) => half * (v(i, j) + v(i, j + 1)),
            (_, 0) => half * (v(i, j) + v(i + 1, j)),
            _ => match mode {
                ProlongationMode::Bilinear => {
                    quarter * (v(i, j) + v(i + 1, j) + v(i, j + 1) + v(i + 1, j + 1))
                }
                ProlongationMode::Linear => half * (v(i + 1, j) + v(i, j + 1)),
            },
        }
    })
}

/// The 3x3 restriction kernel `K_R`, the stencil of the transposed
/// prolongation.
pub fn restriction_kernel<T: Scalar>(mode: ProlongationMode) -> ConvKernel<T> {
    let (a, h, z, o) = (T::lit(0.25), T::lit(0.5), T::zero(), T::one());
    let rows = match mode {
        ProlongationMode::Bilinear => [[a, h, a], [h, o, h], [a, h, a]],
        ProlongationMode::Linear => [[z, h, h], [h, o, h], [h, h, z]],
    };
    ConvKernel::from_matrix(&rows.map(|r| r.to_vec())).expect("3x3 kernel")
}

/// Fine-to-coarse transfer `K_R *_2 f`, applied to each channel with zero
/// padding. Equals the transpose of [`prolongate`] on odd chains.
pub fn restrict_kr<T: Scalar>(fine: &Tensor<T>, mode: ProlongationMode) -> Result<Tensor<T>> {
    let (m, n, _) = fine.shape();
    contract(m % 2 == 1 && n % 2 == 1 && m >= 3 && n >= 3, || {
        format!("restriction needs an odd (2M-1)x(2N-1) grid, got {m}x{n}")
    })?;
    conv2d_depthwise(fine, &restriction_kernel(mode), 2, Padding::Zero)
}

/// Fixed or nonlinear pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    /// Convolution with the 3x3 kernel of ninths.
    Average3x3,
    /// Maximum over a `(2k+1) x (2k+1)` window.
    Max { half_width: usize },
}

/// The 3x3 averaging kernel, 1/9 in every entry.
pub fn average_kernel<T: Scalar>() -> ConvKernel<T> {
    let v = T::one() / T::lit(9.0);
    ConvKernel::from_matrix(&[vec![v; 3], vec![v; 3], vec![v; 3]]).expect("3x3 kernel")
}

/// Channelwise pooling with zero padding; output is `ceil(m/s) x ceil(n/s)`.
pub fn pool<T: Scalar>(input: &Tensor<T>, kind: PoolKind, stride: usize) -> Result<Tensor<T>> {
    contract(stride >= 1, || "stride must be at least 1".into())?;
    match kind {
        PoolKind::Average3x3 => conv2d_depthwise(input, &average_kernel(), stride, Padding::Zero),
        PoolKind::Max { half_width } => {
            let (h, w, c) = input.shape();
            let (oh, ow) = (conv::strided_len(h, stride), conv::strided_len(w, stride));
            let mut out = vec![T::zero(); oh * ow * c];
            conv::max_pool(
                c,
                h,
                w,
                half_width,
                stride,
                Padding::Zero,
                input.as_slice(),
                &mut out,
            );
            Tensor::new(oh, ow, c, out)
        }
    }
}

/// Learned (or vanishing) fine-to-coarse transfer of features.
#[derive(Clone, Copy, Debug)]
pub enum Interpolation<'a, T> {
    /// The zero map.
    Zero { channels: usize },
    /// A full stride-2 convolution mixing all channels.
    Full(&'a ConvKernel<T>),
    /// One single-channel stride-2 kernel shared by every channel.
    ChannelWise(&'a ConvKernel<T>),
}

/// Applies an interpolation to `u`; the result has `ceil(m/2) x ceil(n/2)`
/// spatial size. Zero padding throughout.
pub fn interpolate_pi<T: Scalar>(u: &Tensor<T>, variant: Interpolation<'_, T>) -> Result<Tensor<T>> {
    let (h, w, c) = u.shape();
    match variant {
        Interpolation::Zero { channels } => Ok(Tensor::zeros(
            conv::strided_len(h, 2),
            conv::strided_len(w, 2),
            channels,
        )),
        Interpolation::Full(k) => {
            contract(k.in_channels() == c && k.out_channels() == c, || {
                format!(
                    "full interpolation kernel maps {}->{} channels, features have {c}",
                    k.in_channels(),
                    k.out_channels()
                )
            })?;
            conv2d(u, k, 2, Padding::Zero)
        }
        Interpolation::ChannelWise(k) => {
            contract(k.in_channels() == 1 && k.out_channels() == 1, || {
                "channel-wise interpolation needs a single-channel kernel".into()
            })?;
            conv2d_depthwise(u, k, 2, Padding::Zero)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hierarchy_sizes() {
        let g = GridHierarchy::from_fine_size(17, 4).unwrap();
        assert_eq!(g.sizes(), &[(17, 17), (9, 9), (5, 5), (3, 3)]);
        assert!(g.is_odd_chain());
        assert!(GridHierarchy::from_fine_size(16, 2).is_err());
        assert!(GridHierarchy::from_fine_size(17, 5).is_err());
        let c = GridHierarchy::halving(32, 32, 5).unwrap();
        assert_eq!(c.sizes(), &[(32, 32), (16, 16), (8, 8), (4, 4), (2, 2)]);
        assert!(!c.is_odd_chain());
    }

    #[test]
    fn prolongation_of_two_by_two() {
        let coarse = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let bi = prolongate(&coarse, ProlongationMode::Bilinear);
        assert_eq!(bi, t(&[&[1.0, 1.5, 2.0], &[2.0, 2.5, 3.0], &[3.0, 3.5, 4.0]]));
        let li = prolongate(&coarse, ProlongationMode::Linear);
        // centre: (v(2,1) + v(1,2)) / 2 = (3 + 2) / 2
        assert_eq!(li, t(&[&[1.0, 1.5, 2.0], &[2.0, 2.5, 3.0], &[3.0, 3.5, 4.0]]));
        assert_eq!(li.get(1, 1, 0), 2.5);
    }

    #[test]
    fn linear_centre_uses_anti_diagonal() {
        let coarse = t(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(prolongate(&coarse, ProlongationMode::Bilinear).get(1, 1, 0), 0.25);
        assert_eq!(prolongate(&coarse, ProlongationMode::Linear).get(1, 1, 0), 0.0);
        let coarse = t(&[&[0.0, 1.0], &[0.0, 0.0]]);
        assert_eq!(prolongate(&coarse, ProlongationMode::Linear).get(1, 1, 0), 0.5);
    }

    #[test]
    fn constants_are_preserved() {
        let c = Tensor::<f64>::filled(4, 3, 2, 7.5);
        for mode in [ProlongationMode::Bilinear, ProlongationMode::Linear] {
            assert_eq!(prolongate(&c, mode), Tensor::filled(7, 5, 2, 7.5));
        }
    }

    #[test]
    fn restriction_kernels() {
        let bi = restriction_kernel::<f64>(ProlongationMode::Bilinear);
        assert_eq!(
            bi.window(0, 0),
            vec![vec![0.25, 0.5, 0.25], vec![0.5, 1.0, 0.5], vec![0.25, 0.5, 0.25]]
        );
        let li = restriction_kernel::<f64>(ProlongationMode::Linear);
        assert_eq!(
            li.window(0, 0),
            vec![vec![0.0, 0.5, 0.5], vec![0.5, 1.0, 0.5], vec![0.5, 0.5, 0.0]]
        );
    }

    #[test]
    fn restricting_deltas_reads_off_the_kernel() {
        for mode in [ProlongationMode::Bilinear, ProlongationMode::Linear] {
            let k = restriction_kernel::<f64>(mode);
            for (di, dj) in (3..=5).flat_map(|a| (3..=5).map(move |b| (a, b))) {
                let mut fine = Tensor::<f64>::zeros(9, 9, 1);
                fine.set(di, dj, 0, 1.0);
                let coarse = restrict_kr(&fine, mode).unwrap();
                for i in 0..5 {
                    for j in 0..5 {
                        // coarse (i, j) reads fine (2i + p - 1, 2j + q - 1)
                        let p = di as isize - 2 * i as isize + 1;
                        let q = dj as isize - 2 * j as isize + 1;
                        let expect = if (0..3).contains(&p) && (0..3).contains(&q) {
                            k.get(p as usize, q as usize, 0, 0)
                        } else {
                            0.0
                        };
                        assert_eq!(coarse.get(i, j, 0), expect);
                    }
                }
            }
            // a delta on a coincident node stays a delta
            let mut fine = Tensor::<f64>::zeros(9, 9, 1);
            fine.set(4, 4, 0, 1.0);
            let mut delta = Tensor::<f64>::zeros(5, 5, 1);
            delta.set(2, 2, 0, 1.0);
            assert_eq!(restrict_kr(&fine, mode).unwrap(), delta);
            // and prolongating it spreads the kernel pattern around the fine centre
            let spread = prolongate(&delta, mode);
            for i in 0..9 {
                for j in 0..9 {
                    let (p, q) = (i as isize - 3, j as isize - 3);
                    let expect = if (0..3).contains(&p) && (0..3).contains(&q) {
                        k.get(p as usize, q as usize, 0, 0)
                    } else {
                        0.0
                    };
                    assert_eq!(spread.get(i, j, 0), expect, "{mode:?} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn restriction_rejects_even_grids() {
        assert!(restrict_kr(&Tensor::<f64>::zeros(8, 8, 1), ProlongationMode::Bilinear).is_err());
    }

    #[test]
    fn average_and_max_pooling() {
        let k = average_kernel::<f64>();
        assert!(k.weights().iter().all(|&w| w == 1.0 / 9.0));
        let x = Tensor::from_fn(4, 4, 1, |i, j, _| (4 * i + j + 1) as f64);
        let y = pool(&x, PoolKind::Max { half_width: 1 }, 2).unwrap();
        assert_eq!(y, t(&[&[6.0, 8.0], &[14.0, 16.0]]));
        let c = Tensor::<f64>::filled(5, 5, 2, 3.0);
        for (k, s) in [(0, 1), (1, 2), (2, 3)] {
            let y = pool(&c, PoolKind::Max { half_width: k }, s).unwrap();
            assert!(y.as_slice().iter().all(|&v| v == 3.0));
        }
    }

    #[test]
    fn interpolation_variants() {
        let mut rng = crate::rng::seeded(4);
        let u = Tensor::<f64>::random_normal(6, 5, 3, 1.0, &mut rng);
        let z = interpolate_pi(&u, Interpolation::Zero { channels: 3 }).unwrap();
        assert_eq!(z, Tensor::zeros(3, 3, 3));
        let id = ConvKernel::identity(0, 1);
        let s = interpolate_pi(&u, Interpolation::ChannelWise(&id)).unwrap();
        assert_eq!(s, u.subsample(2));
        let full = ConvKernel::<f64>::identity(1, 2);
        assert!(interpolate_pi(&u, Interpolation::Full(&full)).is_err());
        let k1 = ConvKernel::<f64>::zeros(1, 3, 3, false);
        let k2 = ConvKernel::<f64>::zeros(1, 1, 1, false);
        assert_eq!(k2.param_count(), 9);
        assert_eq!(k1.param_count(), 9 * 3 * 3);
    }
}
