//! Slice-level convolution kernels shared by the eager tensor API and the tape.
//!
//! Layouts: activations are channel planes stored row-major (`[c][row][col]`),
//! weights are `[out][in][row][col]` with the window centred on the output
//! position. A weight at window position `(p, q)` reads the input at
//! `(stride*i + p - k, stride*j + q - k)`, i.e. rows run vertically and
//! columns horizontally, exactly like a cross-correlation.

use crate::scalar::Scalar;
use crate::tensor::Padding;

const NONE: usize = usize::MAX;

/// Resolves a possibly out-of-range index against a padding rule.
///
/// Returns `None` when the read falls into zero padding.
pub fn resolve_index(pos: isize, n: usize, padding: Padding) -> Option<usize> {
    if pos >= 0 && (pos as usize) < n {
        return Some(pos as usize);
    }
    match padding {
        Padding::Zero => None,
        Padding::Periodic => Some(pos.rem_euclid(n as isize) as usize),
        Padding::Reflected => {
            if n == 1 {
                return Some(0);
            }
            // mirror about the first and last samples without repeating them
            let period = 2 * (n as isize - 1);
            let m = pos.rem_euclid(period);
            Some(if m >= n as isize { (period - m) as usize } else { m as usize })
        }
    }
}

/// Output extent of a strided window sweep: `ceil(n / stride)`.
pub fn strided_len(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Shape bookkeeping for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub half_width: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn taps(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn out_height(&self) -> usize {
        strided_len(self.height, self.stride)
    }

    pub fn out_width(&self) -> usize {
        strided_len(self.width, self.stride)
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.taps() * self.taps()
    }

    fn axis_map(&self, n: usize, out_n: usize) -> Vec<usize> {
        let taps = self.taps();
        let k = self.half_width as isize;
        let mut map = Vec::with_capacity(taps * out_n);
        for p in 0..taps {
            for i in 0..out_n {
                let pos = (self.stride * i) as isize + p as isize - k;
                map.push(resolve_index(pos, n, self.padding).unwrap_or(NONE));
            }
        }
        map
    }

    fn row_map(&self) -> Vec<usize> {
        self.axis_map(self.height, self.out_height())
    }

    fn col_map(&self) -> Vec<usize> {
        self.axis_map(self.width, self.out_width())
    }

    pub(crate) fn macs(&self) -> usize {
        self.output_len() * self.in_channels * self.taps() * self.taps()
    }
}

/// Unfolds one sample into the `[in * taps^2, oh * ow]` patch matrix;
/// reads falling into zero padding become zeros.
fn im2col<T: Scalar>(g: &ConvGeometry, rows: &[usize], cols: &[usize], input: &[T], buf: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let taps = g.taps();
    let plane_in = g.height * g.width;
    for (r, dst) in buf.chunks_exact_mut(oh * ow).enumerate() {
        let (c, p, q) = (r / (taps * taps), (r / taps) % taps, r % taps);
        let plane = &input[c * plane_in..(c + 1) * plane_in];
        let col_idx = &cols[q * ow..(q + 1) * ow];
        for (i, drow) in dst.chunks_exact_mut(ow).enumerate() {
            let ri = rows[p * oh + i];
            if ri == NONE {
                drow.fill(T::zero());
                continue;
            }
            let src = &plane[ri * g.width..(ri + 1) * g.width];
            for (d, &cj) in drow.iter_mut().zip(col_idx) {
                *d = if cj == NONE { T::zero() } else { src[cj] };
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters the patch matrix back onto the input.
fn col2im_add<T: Scalar>(g: &ConvGeometry, rows: &[usize], cols: &[usize], buf: &[T], grad_in: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let taps = g.taps();
    let plane_in = g.height * g.width;
    for (r, src) in buf.chunks_exact(oh * ow).enumerate() {
        let (c, p, q) = (r / (taps * taps), (r / taps) % taps, r % taps);
        let plane = &mut grad_in[c * plane_in..(c + 1) * plane_in];
        let col_idx = &cols[q * ow..(q + 1) * ow];
        for (i, srow) in src.chunks_exact(ow).enumerate() {
            let ri = rows[p * oh + i];
            if ri == NONE {
                continue;
            }
            let dst = &mut plane[ri * g.width..(ri + 1) * g.width];
            for (&v, &cj) in srow.iter().zip(col_idx) {
                if cj != NONE {
                    dst[cj] += v;
                }
            }
        }
    }
}

impl ConvGeometry {
    /// Rows of the patch matrix.
    fn patch_rows(&self) -> usize {
        self.in_channels * self.taps() * self.taps()
    }

    /// A 1x1 unit-stride kernel reads the input planes unchanged.
    fn is_pointwise(&self) -> bool {
        self.half_width == 0 && self.stride == 1
    }

    /// The patch matrix of one sample, borrowed when no unfolding is needed.
    fn patches<'a, T: Scalar>(&self, input: &'a [T], owned: &'a mut Vec<T>) -> &'a [T] {
        if self.is_pointwise() {
            return input;
        }
        owned.resize(self.patch_rows() * self.out_height() * self.out_width(), T::zero());
        im2col(self, &self.row_map(), &self.col_map(), input, owned);
        owned
    }
}

/// `out = conv(input, weights) + bias`, overwriting `out`.
pub fn forward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weights: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    debug_assert_eq!(input.len(), g.input_len());
    debug_assert_eq!(weights.len(), g.weight_len());
    debug_assert_eq!(out.len(), g.output_len());
    let plane_out = g.out_height() * g.out_width();
    if plane_out == 0 {
        return;
    }
    for (t, o) in out.chunks_exact_mut(plane_out).enumerate() {
        o.fill(bias.map_or(T::zero(), |b| b[t]));
    }
    let mut owned = Vec::new();
    let patches = g.patches(input, &mut owned);
    let k = g.patch_rows();
    // out[t, j] += sum_r w[t, r] * patches[r, j]
    T::gemm(
        g.out_channels,
        k,
        plane_out,
        weights,
        (k as isize, 1),
        patches,
        (plane_out as isize, 1),
        T::one(),
        out,
    );
}

/// Adjoint of [`forward`] with respect to the input (bias ignored):
/// `grad_in += conv^T(grad_out)`.
///
/// This is also the strided transposed convolution used for learned
/// prolongations.
pub fn backward_input<T: Scalar>(
    g: &ConvGeometry,
    grad_out: &[T],
    weights: &[T],
    grad_in: &mut [T],
) {
    debug_assert_eq!(grad_out.len(), g.output_len());
    debug_assert_eq!(grad_in.len(), g.input_len());
    let plane_out = g.out_height() * g.out_width();
    if plane_out == 0 || grad_in.is_empty() {
        return;
    }
    let k = g.patch_rows();
    // patches[r, j] = sum_t w[t, r] * grad_out[t, j]
    let gemm = |dst: &mut [T], beta: T| {
        T::gemm(
            k,
            g.out_channels,
            plane_out,
            weights,
            (1, k as isize),
            grad_out,
            (plane_out as isize, 1),
            beta,
            dst,
        )
    };
    if g.is_pointwise() {
        gemm(grad_in, T::one());
    } else {
        let mut buf = vec![T::zero(); k * plane_out];
        gemm(&mut buf, T::zero());
        col2im_add(g, &g.row_map(), &g.col_map(), &buf, grad_in);
    }
}

/// Gradient of [`forward`] with respect to weights and bias, accumulated
/// into `grad_w` / `grad_b`.
pub fn backward_weights<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: Option<&mut [T]>,
) {
    let plane_out = g.out_height() * g.out_width();
    if let Some(gb) = grad_b {
        for (b, go) in gb.iter_mut().zip(grad_out.chunks_exact(plane_out.max(1))) {
            let mut s = T::zero();
            for &v in go {
                s += v;
            }
            *b += s;
        }
    }
    if plane_out == 0 {
        return;
    }
    let mut owned = Vec::new();
    let patches = g.patches(input, &mut owned);
    let k = g.patch_rows();
    // grad_w[t, r] += sum_j grad_out[t, j] * patches[r, j]
    T::gemm(
        g.out_channels,
        plane_out,
        k,
        grad_out,
        (plane_out as isize, 1),
        patches,
        (1, plane_out as isize),
        T::one(),
        grad_w,
    );
}

/// Windowed maximum over a `(2k+1)^2` window; out-of-range reads follow
/// `padding` (zero padding contributes zeros to the maximum).
///
/// Returns, for every output entry, the flat input index that won, or
/// `usize::MAX` when a padded zero won.
#[allow(clippy::too_many_arguments)]
pub fn max_pool<T: Scalar>(
    channels: usize,
    height: usize,
    width: usize,
    half_width: usize,
    stride: usize,
    padding: Padding,
    input: &[T],
    out: &mut [T],
) -> Vec<usize> {
    let g = ConvGeometry {
        in_channels: channels,
        out_channels: channels,
        height,
        width,
        half_width,
        stride,
        padding,
    };
    let (oh, ow) = (g.out_height(), g.out_width());
    let rows = g.row_map();
    let cols = g.col_map();
    let taps = g.taps();
    let mut arg = vec![NONE; channels * oh * ow];
    for c in 0..channels {
        let base = c * height * width;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = NONE;
                for p in 0..taps {
                    for q in 0..taps {
                        let (r, s) = (rows[p * oh + i], cols[q * ow + j]);
                        let (v, idx) = if r == NONE || s == NONE {
                            (T::zero(), NONE)
                        } else {
                            let idx = base + r * width + s;
                            (input[idx], idx)
                        };
                        // first maximum in scan order wins ties
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * oh + i) * ow + j;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    arg
}

pub(crate) const NO_SOURCE: usize = NONE;
