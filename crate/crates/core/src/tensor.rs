//! Dense image-shaped tensors and the convolution, activation and loss
//! primitives the rest of the crate is built from.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvGeometry};
use crate::error::{contract, Result};
use crate::scalar::Scalar;

/// How reads outside the grid are resolved by a convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Zero,
    Periodic,
    /// Mirror about the edge sample without repeating it.
    Reflected,
}

/// Rank-3 array `height x width x channels`.
///
/// Values are stored one channel plane after another, each plane row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        contract(height > 0 && width > 0 && channels > 0, || {
            format!("tensor dimensions must be positive, got {height}x{width}x{channels}")
        })?;
        contract(data.len() == height * width * channels, || {
            format!(
                "tensor {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )
        })?;
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty tensor shape");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a tensor from `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut t = Self::zeros(height, width, channels);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    t.data[(c * height + i) * width + j] = f(i, j, c);
                }
            }
        }
        t
    }

    /// Single-channel tensor from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        contract(rows.iter().all(|r| r.len() == w), || {
            "ragged rows".to_string()
        })?;
        Self::new(h, w, 1, rows.concat())
    }

    /// Standard normal entries scaled by `std`.
    pub fn random_normal<R: Rng + ?Sized>(
        height: usize,
        width: usize,
        channels: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let s = T::lit(std);
        Self::from_fn(height, width, channels, |_, _, _| T::sample_normal(rng) * s)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    fn offset(&self, row: usize, col: usize, channel: usize) -> usize {
        debug_assert!(row < self.height && col < self.width && channel < self.channels);
        (channel * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> T {
        self.data[self.offset(row, col, channel)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: T) {
        let o = self.offset(row, col, channel);
        self.data[o] = value;
    }

    pub fn plane(&self, channel: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    /// Copies one channel out as a single-channel tensor.
    pub fn channel(&self, channel: usize) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.plane(channel).to_vec(),
        }
    }

    /// Stacks equally sized tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        contract(!parts.is_empty(), || "nothing to concatenate".into())?;
        let (h, w) = (parts[0].height, parts[0].width);
        contract(parts.iter().all(|p| p.height == h && p.width == w), || {
            "channel concatenation needs equal spatial sizes".into()
        })?;
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        let c = parts.iter().map(|p| p.channels).sum();
        Self::new(h, w, c, data)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, what: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        contract(self.same_shape(other), || {
            format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )
        })?;
        Ok(Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: T, other: &Self) -> Result<Self> {
        self.zip_with(other, "axpy", |a, b| a + s * b)
    }

    pub fn neg(&self) -> Self {
        self.map(|v| -v)
    }

    /// Largest absolute entrywise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        contract(self.same_shape(other), || {
            format!(
                "max_abs_diff: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )
        })?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// Euclidean norm of the flattened tensor.
    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        contract(self.same_shape(other), || "dot: shape mismatch".into())?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial mean of every channel.
    pub fn channel_means(&self) -> Vec<T> {
        let n = T::count(self.height * self.width);
        (0..self.channels)
            .map(|c| self.plane(c).iter().copied().sum::<T>() / n)
            .collect()
    }

    /// Keeps every `stride`-th row and column starting at the first.
    pub fn subsample(&self, stride: usize) -> Self {
        let (h, w) = (
            conv::strided_len(self.height, stride),
            conv::strided_len(self.width, stride),
        );
        Self::from_fn(h, w, self.channels, |i, j, c| {
            self.get(i * stride, j * stride, c)
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

/// Multichannel `(2k+1) x (2k+1)` kernel with optional per-output bias.
///
/// Weights are stored `[out][in][row][col]`; window row `p` and column `q`
/// (both in `0..2k+1`) read the input at vertical offset `p - k` and
/// horizontal offset `q - k` from the output position.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    half_width: usize,
    in_channels: usize,
    out_channels: usize,
    weights: Vec<T>,
    bias: Option<Vec<T>>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(
        half_width: usize,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<T>,
        bias: Option<Vec<T>>,
    ) -> Result<Self> {
        let taps = 2 * half_width + 1;
        contract(in_channels > 0 && out_channels > 0, || {
            "kernel channel counts must be positive".into()
        })?;
        contract(weights.len() == taps * taps * in_channels * out_channels, || {
            format!(
                "kernel needs {} weights, got {}",
                taps * taps * in_channels * out_channels,
                weights.len()
            )
        })?;
        if let Some(b) = &bias {
            contract(b.len() == out_channels, || {
                format!("bias needs {out_channels} entries, got {}", b.len())
            })?;
        }
        Ok(Self {
            half_width,
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    pub fn zeros(half_width: usize, in_channels: usize, out_channels: usize, bias: bool) -> Self {
        let taps = 2 * half_width + 1;
        Self {
            half_width,
            in_channels,
            out_channels,
            weights: vec![T::zero(); taps * taps * in_channels * out_channels],
            bias: bias.then(|| vec![T::zero(); out_channels]),
        }
    }

    /// Channel-preserving identity: centre tap 1 on the diagonal.
    pub fn identity(half_width: usize, channels: usize) -> Self {
        let mut k = Self::zeros(half_width, channels, channels, false);
        for c in 0..channels {
            k.set(half_width, half_width, c, c, T::one());
        }
        k
    }

    /// Single-channel kernel from a square matrix of odd size.
    pub fn from_matrix(rows: &[Vec<T>]) -> Result<Self> {
        let taps = rows.len();
        contract(taps % 2 == 1 && rows.iter().all(|r| r.len() == taps), || {
            "kernel matrix must be square with odd size".into()
        })?;
        Self::new(taps / 2, 1, 1, rows.concat(), None)
    }

    /// Zero-mean Gaussian weights with variance `2 / fan_in`; zero bias.
    pub fn he_normal<R: Rng + ?Sized>(
        half_width: usize,
        in_channels: usize,
        out_channels: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let taps = 2 * half_width + 1;
        let std = (2.0 / (in_channels * taps * taps) as f64).sqrt();
        let mut k = Self::zeros(half_width, in_channels, out_channels, bias);
        for w in &mut k.weights {
            *w = T::sample_normal(rng) * T::lit(std);
        }
        k
    }

    /// Gaussian weights and bias, both scaled by `std`.
    pub fn random<R: Rng + ?Sized>(
        half_width: usize,
        in_channels: usize,
        out_channels: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut k = Self::zeros(half_width, in_channels, out_channels, bias);
        for w in &mut k.weights {
            *w = T::sample_normal(rng) * T::lit(std);
        }
        if let Some(b) = &mut k.bias {
            for v in b {
                *v = T::sample_normal(rng) * T::lit(std);
            }
        }
        k
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    pub fn taps(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [T]> {
        self.bias.as_deref_mut()
    }

    pub fn set_bias(&mut self, bias: Option<Vec<T>>) -> Result<()> {
        if let Some(b) = &bias {
            contract(b.len() == self.out_channels, || "bias length".into())?;
        }
        self.bias = bias;
        Ok(())
    }

    /// Number of trainable scalars (weights plus bias when present).
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    #[inline]
    fn index(&self, row: usize, col: usize, out: usize, input: usize) -> usize {
        let taps = self.taps();
        ((out * self.in_channels + input) * taps + row) * taps + col
    }

    /// Weight at window position `(row, col)` from input channel `input`
    /// to output channel `out`.
    pub fn get(&self, row: usize, col: usize, out: usize, input: usize) -> T {
        self.weights[self.index(row, col, out, input)]
    }

    pub fn set(&mut self, row: usize, col: usize, out: usize, input: usize, value: T) {
        let i = self.index(row, col, out, input);
        self.weights[i] = value;
    }

    /// The `(2k+1)^2` window mapping `input` to `out`.
    pub fn window(&self, out: usize, input: usize) -> Vec<Vec<T>> {
        let taps = self.taps();
        (0..taps)
            .map(|p| (0..taps).map(|q| self.get(p, q, out, input)).collect())
            .collect()
    }

    pub fn scale(&self, s: T) -> Self {
        let mut k = self.clone();
        k.weights.iter_mut().for_each(|w| *w *= s);
        if let Some(b) = &mut k.bias {
            b.iter_mut().for_each(|w| *w *= s);
        }
        k
    }

    pub fn neg(&self) -> Self {
        self.scale(-T::one())
    }

    /// Entrywise `self - other` on weights and biases (missing bias = 0).
    pub fn sub(&self, other: &Self) -> Result<Self> {
        contract(
            self.half_width == other.half_width
                && self.in_channels == other.in_channels
                && self.out_channels == other.out_channels,
            || "kernel shapes differ".into(),
        )?;
        let weights = self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(&a, &b)| a - b)
            .collect();
        let bias = match (&self.bias, &other.bias) {
            (None, None) => None,
            (a, b) => Some(
                (0..self.out_channels)
                    .map(|t| {
                        a.as_ref().map_or(T::zero(), |a| a[t]) - b.as_ref().map_or(T::zero(), |b| b[t])
                    })
                    .collect(),
            ),
        };
        Self::new(self.half_width, self.in_channels, self.out_channels, weights, bias)
    }

    pub(crate) fn geometry(&self, height: usize, width: usize, stride: usize, padding: Padding) -> ConvGeometry {
        ConvGeometry {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            height,
            width,
            half_width: self.half_width,
            stride,
            padding,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ConvKernel<U> {
        ConvKernel {
            half_width: self.half_width,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            weights: self.weights.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|v| U::lit(v.to_f64_lossy())).collect()),
        }
    }
}

/// Multichannel strided convolution
/// `[out]_t = sum_i K_{i,t} *_s [input]_i + b_t`.
///
/// The output is `ceil(h/s) x ceil(w/s) x out_channels`; output `(i, j)`
/// is centred on input `(s*i, s*j)`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &ConvKernel<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    contract(stride >= 1, || "stride must be at least 1".into())?;
    contract(!input.is_empty(), || "empty input".into())?;
    contract(input.channels == kernel.in_channels, || {
        format!(
            "conv2d: input has {} channels, kernel expects {}",
            input.channels, kernel.in_channels
        )
    })?;
    let g = kernel.geometry(input.height, input.width, stride, padding);
    let mut out = vec![T::zero(); g.output_len()];
    conv::forward(&g, &input.data, &kernel.weights, kernel.bias(), &mut out);
    Tensor::new(g.out_height(), g.out_width(), kernel.out_channels, out)
}

/// Applies one single-channel kernel to every channel independently
/// (a group convolution with as many groups as channels and shared weights).
pub fn conv2d_depthwise<T: Scalar>(
    input: &Tensor<T>,
    kernel: &ConvKernel<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    contract(kernel.in_channels == 1 && kernel.out_channels == 1, || {
        "depthwise convolution needs a single-channel kernel".into()
    })?;
    contract(stride >= 1, || "stride must be at least 1".into())?;
    let g = kernel.geometry(input.height, input.width, stride, padding);
    let plane_out = g.output_len();
    let mut out = vec![T::zero(); plane_out * input.channels];
    for c in 0..input.channels {
        conv::forward(
            &g,
            input.plane(c),
            &kernel.weights,
            kernel.bias(),
            &mut out[c * plane_out..(c + 1) * plane_out],
        );
    }
    Tensor::new(g.out_height(), g.out_width(), input.channels, out)
}

/// Adjoint of a strided convolution (bias ignored): maps a
/// `ceil(h/s) x ceil(w/s) x out_channels` tensor back to
/// `h x w x in_channels`.
pub fn conv2d_transpose<T: Scalar>(
    coarse: &Tensor<T>,
    kernel: &ConvKernel<T>,
    stride: usize,
    padding: Padding,
    fine_height: usize,
    fine_width: usize,
) -> Result<Tensor<T>> {
    let g = kernel.geometry(fine_height, fine_width, stride, padding);
    contract(
        coarse.channels == kernel.out_channels
            && coarse.height == g.out_height()
            && coarse.width == g.out_width(),
        || {
            format!(
                "transpose convolution: {:?} is not the strided image of {fine_height}x{fine_width}",
                coarse.shape()
            )
        },
    )?;
    let mut out = vec![T::zero(); g.input_len()];
    conv::backward_input(&g, &coarse.data, &kernel.weights, &mut out);
    Tensor::new(fine_height, fine_width, kernel.in_channels, out)
}

/// Rectified linear unit, `max(0, x)` entrywise.
pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Normalised exponential with max-shift.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Probabilities below this are clamped before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-sum_i y_i log p_i` with `p` clamped at [`PROB_FLOOR`].
pub fn cross_entropy<T: Scalar>(prediction: &[T], label: &[T]) -> Result<T> {
    contract(prediction.len() == label.len(), || {
        format!(
            "cross_entropy: prediction has {} entries, label {}",
            prediction.len(),
            label.len()
        )
    })?;
    let floor = T::lit(PROB_FLOOR);
    Ok(prediction
        .iter()
        .zip(label)
        .filter(|(_, &y)| y != T::zero())
        .map(|(&p, &y)| -y * p.max(floor).ln())
        .sum())
}

/// One-hot encoding of `label` among `classes`.
pub fn one_hot<T: Scalar>(label: usize, classes: usize) -> Vec<T> {
    (0..classes)
        .map(|i| if i == label { T::one() } else { T::zero() })
        .collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = seeded(1);
        let x = Tensor::<f64>::random_normal(5, 5, 1, 1.0, &mut rng);
        let y = conv2d(&x, &ConvKernel::identity(1, 1), 1, Padding::Zero).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn stride_two_output_size_is_ceiling() {
        let x = Tensor::<f64>::zeros(5, 5, 1);
        let y = conv2d(&x, &ConvKernel::identity(1, 1), 2, Padding::Zero).unwrap();
        assert_eq!(y.shape(), (3, 3, 1));
        let x = Tensor::<f64>::zeros(32, 7, 2);
        let y = conv2d(&x, &ConvKernel::identity(1, 2), 2, Padding::Zero).unwrap();
        assert_eq!(y.shape(), (16, 4, 2));
    }

    #[test]
    fn constant_field_under_laplacian_stencil() {
        let ka = ConvKernel::from_matrix(&[
            vec![0.0, -1.0, 0.0],
            vec![-1.0, 4.0, -1.0],
            vec![0.0, -1.0, 0.0],
        ])
        .unwrap();
        let u = Tensor::<f64>::filled(5, 5, 1, 1.0);
        let y = conv2d(&u, &ka, 1, Padding::Zero).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                // missing neighbours at the border each add +1
                let missing = [i == 0, i == 4, j == 0, j == 4].iter().filter(|&&b| b).count();
                assert_eq!(y.get(i, j, 0), missing as f64);
            }
        }
        assert_eq!(y.get(2, 2, 0), 0.0);
        assert_eq!(y.get(0, 2, 0), 1.0);
        assert_eq!(y.get(0, 0, 0), 2.0);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f64>::zeros(4, 4, 2);
        let k = ConvKernel::identity(1, 3);
        assert!(matches!(
            conv2d(&x, &k, 1, Padding::Zero),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn reflected_padding_skips_edge_sample() {
        assert_eq!(conv::resolve_index(-1, 5, Padding::Reflected), Some(1));
        assert_eq!(conv::resolve_index(-2, 5, Padding::Reflected), Some(2));
        assert_eq!(conv::resolve_index(5, 5, Padding::Reflected), Some(3));
        assert_eq!(conv::resolve_index(-1, 5, Padding::Periodic), Some(4));
        assert_eq!(conv::resolve_index(5, 5, Padding::Periodic), Some(0));
        assert_eq!(conv::resolve_index(-1, 5, Padding::Zero), None);
        assert_eq!(conv::resolve_index(-3, 1, Padding::Reflected), Some(0));
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::new(1, 3, 1, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).as_slice(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::filled(3, 3, 2, -0.5);
        assert_eq!(relu(&neg), Tensor::zeros(3, 3, 2));
    }

    #[test]
    fn relu_splits_identity() {
        let mut rng = seeded(3);
        let x = Tensor::<f64>::random_normal(4, 6, 3, 2.0, &mut rng);
        let back = relu(&x).sub(&relu(&x.neg())).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1000.0, 1000.0]), vec![0.5, 0.5]);
        let p = softmax(&[1.0f64.ln(), 3.0f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        let l = cross_entropy(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        // clamped rather than infinite
        let l = cross_entropy(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((l - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!(cross_entropy(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_tied_index() {
        assert_eq!(argmax(&[0.25, 0.5, 0.5, 0.1]), 1);
        assert_eq!(argmax(&[0.2; 5]), 0);
    }
}
