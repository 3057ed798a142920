//! Reverse-mode differentiation over a recorded tape of batched primitives.
//!
//! Values are dense [`Array`]s; image batches use the `[n, c, h, w]` layout
//! so one sample is exactly the channel-plane layout of [`Tensor`]. Every
//! node keeps only its structural description, so the whole forward pass can
//! be replayed from the leaves and compared against the recorded values.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvGeometry, NO_SOURCE};
use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Padding, Tensor};

/// Dense row-major array with an explicit shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Array<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        contract(n == data.len(), || {
            format!("shape {shape:?} needs {n} values, got {}", data.len())
        })?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Stacks equally shaped tensors into an `[n, c, h, w]` batch.
    pub fn batch(samples: &[&Tensor<T>]) -> Result<Self> {
        contract(!samples.is_empty(), || "empty batch".into())?;
        let (h, w, c) = samples[0].shape();
        let mut data = Vec::with_capacity(samples.len() * h * w * c);
        for s in samples {
            contract(s.shape() == (h, w, c), || {
                format!("batch mixes shapes {:?} and {:?}", (h, w, c), s.shape())
            })?;
            data.extend_from_slice(s.as_slice());
        }
        Ok(Self {
            shape: vec![samples.len(), c, h, w],
            data,
        })
    }

    /// Splits an `[n, c, h, w]` batch back into tensors.
    pub fn unbatch(&self) -> Result<Vec<Tensor<T>>> {
        let (n, c, h, w) = self.dims4()?;
        (0..n)
            .map(|i| Tensor::new(h, w, c, self.data[i * c * h * w..(i + 1) * c * h * w].to_vec()))
            .collect()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Contract(format!("expected [n, c, h, w], got {:?}", self.shape))),
        }
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, k] => Ok((n, k)),
            _ => Err(Error::Contract(format!("expected [n, k], got {:?}", self.shape))),
        }
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        contract(self.shape == other.shape, || {
            format!("shape mismatch {:?} vs {:?}", self.shape, other.shape)
        })?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Structural description of one recorded primitive.
#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    /// `w: [out, in, t, t]`, optional `b: [out]`.
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    },
    /// Adjoint of `Conv` (no bias) mapping back to `height x width`.
    ConvTranspose {
        x: Var,
        w: Var,
        stride: usize,
        padding: Padding,
        height: usize,
        width: usize,
    },
    /// One `[1, 1, t, t]` kernel shared by every channel.
    Depthwise {
        x: Var,
        w: Var,
        stride: usize,
        padding: Padding,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `s * x` with `s` a one-element node.
    Scale { x: Var, s: Var },
    /// `w * a + (1 - w) * b`, exact at `w = 0` and `w = 1`.
    Blend { a: Var, b: Var, w: Var },
    /// `sum_j w_j parts_j` with `w` a vector node.
    Combine { parts: Vec<Var>, w: Var },
    SoftmaxVec(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    },
    BatchNormFrozen {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
    },
    MaxPool {
        x: Var,
        half_width: usize,
        stride: usize,
    },
    GlobalAvgPool(Var),
    /// `x: [n, k_in]`, `w: [k_out, k_in]`, `b: [k_out]`.
    Linear { x: Var, w: Var, b: Var },
    /// Mean cross-entropy of softmax(logits) against integer labels.
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
    MeanSquare(Var),
    /// `sum_i c_i x_i` against a fixed coefficient vector.
    Probe { x: Var, coeffs: Vec<T> },
}

/// Intermediates kept from the forward pass for the reverse pass.
#[derive(Clone, Debug)]
enum Saved<T> {
    None,
    Indices(Vec<usize>),
    Stats { mean: Vec<T>, inv_std: Vec<T>, var: Vec<T> },
    Probs(Vec<T>),
}

/// Recorded forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    ops: Vec<Op<T>>,
    values: Vec<Array<T>>,
    saved: Vec<Saved<T>>,
    params: Vec<(String, Var)>,
}

/// Reverse-pass result: one optional gradient per node.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Array<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zero-filled when disconnected.
    pub fn get_or_zero(&self, tape: &Tape<T>, v: Var) -> Array<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(tape.value(v).shape()))
    }
}

fn scalar_of<T: Scalar>(a: &Array<T>) -> Result<T> {
    contract(a.len() == 1, || format!("expected a scalar node, got shape {:?}", a.shape))?;
    Ok(a.data[0])
}

fn kernel_geometry<T: Scalar>(
    x: &Array<T>,
    w: &Array<T>,
    stride: usize,
    padding: Padding,
) -> Result<(usize, ConvGeometry)> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, i, t) = match w.shape[..] {
        [o, i, t, t2] if t == t2 && t % 2 == 1 => (o, i, t),
        _ => {
            return Err(Error::Contract(format!(
                "kernel shape {:?} is not [out, in, 2k+1, 2k+1]",
                w.shape
            )))
        }
    };
    contract(c == i, || format!("input has {c} channels, kernel expects {i}"))?;
    contract(stride >= 1, || "stride must be at least 1".into())?;
    Ok((
        n,
        ConvGeometry {
            in_channels: i,
            out_channels: o,
            height: h,
            width: wd,
            half_width: t / 2,
            stride,
            padding,
        },
    ))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
            saved: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.values[v.0]
    }

    /// Registered parameters in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Array<T>) -> Var {
        self.ops.push(Op::Leaf);
        self.values.push(value);
        self.saved.push(Saved::None);
        Var(self.ops.len() - 1)
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Array<T>) -> Var {
        let v = self.input(value);
        self.params.push((name.into(), v));
        v
    }

    fn record(&mut self, op: Op<T>) -> Result<Var> {
        let (value, saved) = evaluate(&op, &self.values)?;
        self.ops.push(op);
        self.values.push(value);
        self.saved.push(saved);
        Ok(Var(self.ops.len() - 1))
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        self.record(Op::Conv {
            x,
            w,
            b,
            stride,
            padding,
        })
    }

    pub fn conv_transpose(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: Padding,
        height: usize,
        width: usize,
    ) -> Result<Var> {
        self.record(Op::ConvTranspose {
            x,
            w,
            stride,
            padding,
            height,
            width,
        })
    }

    pub fn depthwise(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        self.record(Op::Depthwise {
            x,
            w,
            stride,
            padding,
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        self.record(Op::Scale { x, s })
    }

    pub fn blend(&mut self, a: Var, b: Var, w: Var) -> Result<Var> {
        self.record(Op::Blend { a, b, w })
    }

    pub fn combine(&mut self, parts: &[Var], w: Var) -> Result<Var> {
        self.record(Op::Combine {
            parts: parts.to_vec(),
            w,
        })
    }

    pub fn softmax_vec(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SoftmaxVec(x))
    }

    /// Batch normalization with batch statistics (training mode).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.record(Op::BatchNorm { x, gamma, beta, eps })
    }

    /// Batch normalization with fixed statistics (evaluation mode).
    pub fn batch_norm_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
    ) -> Result<Var> {
        self.record(Op::BatchNormFrozen {
            x,
            gamma,
            beta,
            mean,
            var,
            eps,
        })
    }

    /// Batch mean and biased variance of a training-mode batch norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.saved[v.0] {
            Saved::Stats { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn max_pool(&mut self, x: Var, half_width: usize, stride: usize) -> Result<Var> {
        self.record(Op::MaxPool {
            x,
            half_width,
            stride,
        })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.record(Op::GlobalAvgPool(x))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.record(Op::Linear { x, w, b })
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.record(Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
        })
    }

    pub fn mean_square(&mut self, x: Var) -> Result<Var> {
        self.record(Op::MeanSquare(x))
    }

    pub fn probe(&mut self, x: Var, coeffs: Vec<T>) -> Result<Var> {
        self.record(Op::Probe { x, coeffs })
    }

    /// Smallest nonzero `|z|` over every ReLU input on the tape (`inf` if
    /// none). Exact zeros are skipped: they are outputs of an earlier ReLU or
    /// zero states, and only move once some nonzero input crosses its kink.
    pub fn min_abs_relu_input(&self) -> T {
        self.ops
            .iter()
            .filter_map(|op| match op {
                Op::Relu(x) => Some(*x),
                _ => None,
            })
            .flat_map(|x| self.values[x.0].data.iter().map(|v| v.abs()))
            .filter(|v| *v != T::zero())
            .fold(T::infinity(), T::min)
    }

    /// Re-evaluates every recorded node from the leaves.
    pub fn replay(&self) -> Result<Vec<Array<T>>> {
        let mut values: Vec<Array<T>> = Vec::with_capacity(self.values.len());
        for (op, recorded) in self.ops.iter().zip(&self.values) {
            let v = match op {
                Op::Leaf => recorded.clone(),
                _ => evaluate(op, &values)?.0,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// True when [`replay`](Self::replay) reproduces every recorded value
    /// bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let replayed = self.replay()?;
        Ok(replayed.iter().zip(&self.values).all(|(a, b)| {
            a.shape == b.shape
                && a.data
                    .iter()
                    .zip(&b.data)
                    .all(|(x, y)| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits())
        }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        scalar_of(&self.values[loss.0])?;
        let mut grads: Vec<Option<Array<T>>> = vec![None; self.ops.len()];
        grads[loss.0] = Some(Array::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Array<T>, grads: &mut [Option<Array<T>>]) -> Result<()> {
        let vals = &self.values;
        let mut acc = |v: Var, delta: Array<T>| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let (xv, wv) = (&vals[x.0], &vals[w.0]);
                let (n, geo) = kernel_geometry(xv, wv, *stride, *padding)?;
                let (il, ol) = (geo.input_len(), geo.output_len());
                let mut gx = Array::zeros(xv.shape());
                let mut gw = Array::zeros(wv.shape());
                let mut gb = b.map(|b| Array::zeros(vals[b.0].shape()));
                per_sample(&geo, n, &mut gx.data, il, |s, gi| {
                    conv::backward_input(&geo, &g.data[s * ol..(s + 1) * ol], &wv.data, gi)
                });
                let nb = gb.as_ref().map_or(0, Array::len);
                let partials = map_samples(&geo, n, |s| {
                    let mut part = vec![T::zero(); gw.len() + nb];
                    let (pw, pb) = part.split_at_mut(gw.len());
                    let go = &g.data[s * ol..(s + 1) * ol];
                    let pb = if nb > 0 { Some(pb) } else { None };
                    conv::backward_weights(&geo, &xv.data[s * il..(s + 1) * il], go, pw, pb);
                    part
                });
                // fixed summation order keeps gradients independent of threading
                for part in partials {
                    let (pw, pb) = part.split_at(gw.len());
                    gw.data.iter_mut().zip(pw).for_each(|(a, &v)| *a += v);
                    if let Some(gb) = gb.as_mut() {
                        gb.data.iter_mut().zip(pb).for_each(|(a, &v)| *a += v);
                    }
                }
                acc(*x, gx);
                acc(*w, gw);
                if let (Some(b), Some(gb)) = (b, gb) {
                    acc(*b, gb);
                }
            }
            Op::ConvTranspose {
                x,
                w,
                stride,
                padding,
                ..
            } => {
                let (xv, wv) = (&vals[x.0], &vals[w.0]);
                // the fine output plays the role of the forward input
                let (n, geo) = kernel_geometry(g, wv, *stride, *padding)?;
                let (il, ol) = (geo.input_len(), geo.output_len());
                let mut gx = Array::zeros(xv.shape());
                let mut gw = Array::zeros(wv.shape());
                for s in 0..n {
                    let gf = &g.data[s * il..(s + 1) * il];
                    conv::forward(&geo, gf, &wv.data, None, &mut gx.data[s * ol..(s + 1) * ol]);
                    conv::backward_weights(&geo, gf, &xv.data[s * ol..(s + 1) * ol], &mut gw.data, None);
                }
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::Depthwise {
                x,
                w,
                stride,
                padding,
            } => {
                let (xv, wv) = (&vals[x.0], &vals[w.0]);
                let (n, c, h, wd) = xv.dims4()?;
                let geo = depthwise_geometry(wv, h, wd, *stride, *padding)?;
                let (il, ol) = (geo.input_len(), geo.output_len());
                let mut gx = Array::zeros(xv.shape());
                let mut gw = Array::zeros(wv.shape());
                for p in 0..n * c {
                    let go = &g.data[p * ol..(p + 1) * ol];
                    conv::backward_input(&geo, go, &wv.data, &mut gx.data[p * il..(p + 1) * il]);
                    conv::backward_weights(&geo, &xv.data[p * il..(p + 1) * il], go, &mut gw.data, None);
                }
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::Relu(x) => {
                let xv = &vals[x.0];
                let data = g
                    .data
                    .iter()
                    .zip(&xv.data)
                    .map(|(&gv, &z)| if z > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*x, Array::new(xv.shape.clone(), data)?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.zip_map(g, |v, _| -v)?);
            }
            Op::Scale { x, s } => {
                let sv = scalar_of(&vals[s.0])?;
                let xv = &vals[x.0];
                let ds: T = g.data.iter().zip(&xv.data).map(|(&a, &b)| a * b).sum();
                acc(*x, g.zip_map(g, |v, _| sv * v)?);
                acc(*s, Array::new(vals[s.0].shape.clone(), vec![ds])?);
            }
            Op::Blend { a, b, w } => {
                let wv = scalar_of(&vals[w.0])?;
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                let dw: T = g
                    .data
                    .iter()
                    .zip(av.data.iter().zip(&bv.data))
                    .map(|(&gv, (&x, &y))| gv * (x - y))
                    .sum();
                acc(*a, g.zip_map(g, |v, _| wv * v)?);
                acc(*b, g.zip_map(g, |v, _| (T::one() - wv) * v)?);
                acc(*w, Array::new(vals[w.0].shape.clone(), vec![dw])?);
            }
            Op::Combine { parts, w } => {
                let wv = &vals[w.0];
                let mut dw = Vec::with_capacity(parts.len());
                for (j, p) in parts.iter().enumerate() {
                    let pv = &vals[p.0];
                    dw.push(g.data.iter().zip(&pv.data).map(|(&a, &b)| a * b).sum());
                    let wj = wv.data[j];
                    acc(*p, g.zip_map(g, |v, _| wj * v)?);
                }
                acc(*w, Array::new(wv.shape.clone(), dw)?);
            }
            Op::SoftmaxVec(x) => {
                let p = &self.values[idx];
                let dot: T = g.data.iter().zip(&p.data).map(|(&a, &b)| a * b).sum();
                let data = g.data.iter().zip(&p.data).map(|(&gv, &pv)| pv * (gv - dot)).collect();
                acc(*x, Array::new(vals[x.0].shape.clone(), data)?);
            }
            Op::BatchNorm { x, gamma, beta, .. } => {
                let Saved::Stats { mean, inv_std, .. } = &self.saved[idx] else {
                    unreachable!("batch norm saves its statistics")
                };
                let xv = &vals[x.0];
                let gm = &vals[gamma.0].data;
                let (n, c, h, wd) = xv.dims4()?;
                let plane = h * wd;
                let m = T::count(n * plane);
                let mut gx = Array::zeros(xv.shape());
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let (mu, is) = (mean[ch], inv_std[ch]);
                    let (mut sg, mut sgx) = (T::zero(), T::zero());
                    for s in 0..n {
                        let o = (s * c + ch) * plane;
                        for k in o..o + plane {
                            let xh = (xv.data[k] - mu) * is;
                            sg += g.data[k];
                            sgx += g.data[k] * xh;
                        }
                    }
                    dgamma[ch] = sgx;
                    dbeta[ch] = sg;
                    let scale = gm[ch] * is / m;
                    for s in 0..n {
                        let o = (s * c + ch) * plane;
                        for k in o..o + plane {
                            let xh = (xv.data[k] - mu) * is;
                            gx.data[k] = scale * (m * g.data[k] - sg - xh * sgx);
                        }
                    }
                }
                acc(*x, gx);
                acc(*gamma, Array::from_vec(dgamma));
                acc(*beta, Array::from_vec(dbeta));
            }
            Op::BatchNormFrozen {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let xv = &vals[x.0];
                let gm = &vals[gamma.0].data;
                let (n, c, h, wd) = xv.dims4()?;
                let plane = h * wd;
                let mut gx = Array::zeros(xv.shape());
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let is = T::one() / (var[ch] + *eps).sqrt();
                    for s in 0..n {
                        let o = (s * c + ch) * plane;
                        for k in o..o + plane {
                            gx.data[k] = g.data[k] * gm[ch] * is;
                            dgamma[ch] += g.data[k] * (xv.data[k] - mean[ch]) * is;
                            dbeta[ch] += g.data[k];
                        }
                    }
                }
                acc(*x, gx);
                acc(*gamma, Array::from_vec(dgamma));
                acc(*beta, Array::from_vec(dbeta));
            }
            Op::MaxPool { x, .. } => {
                let Saved::Indices(arg) = &self.saved[idx] else {
                    unreachable!("max pool saves its argmax")
                };
                let xv = &vals[x.0];
                let mut gx = Array::zeros(xv.shape());
                for (&src, &gv) in arg.iter().zip(&g.data) {
                    if src != NO_SOURCE {
                        gx.data[src] += gv;
                    }
                }
                acc(*x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let xv = &vals[x.0];
                let (_, _, h, wd) = xv.dims4()?;
                let plane = h * wd;
                let inv = T::one() / T::count(plane);
                let data = (0..xv.len()).map(|k| g.data[k / plane] * inv).collect();
                acc(*x, Array::new(xv.shape.clone(), data)?);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&vals[x.0], &vals[w.0]);
                let (n, kin) = xv.dims2()?;
                let (kout, _) = wv.dims2()?;
                let mut gx = Array::zeros(xv.shape());
                let mut gw = Array::zeros(wv.shape());
                let mut gb = Array::zeros(vals[b.0].shape());
                for s in 0..n {
                    for o in 0..kout {
                        let gv = g.data[s * kout + o];
                        gb.data[o] += gv;
                        for i in 0..kin {
                            gx.data[s * kin + i] += gv * wv.data[o * kin + i];
                            gw.data[o * kin + i] += gv * xv.data[s * kin + i];
                        }
                    }
                }
                acc(*x, gx);
                acc(*w, gw);
                acc(*b, gb);
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let Saved::Probs(p) = &self.saved[idx] else {
                    unreachable!("cross-entropy saves its probabilities")
                };
                let lv = &vals[logits.0];
                let (n, k) = lv.dims2()?;
                let scale = scalar_of(g)? / T::count(n);
                let mut data: Vec<T> = p.iter().map(|&v| v * scale).collect();
                for (s, &y) in labels.iter().enumerate() {
                    data[s * k + y] -= scale;
                }
                acc(*logits, Array::new(lv.shape.clone(), data)?);
            }
            Op::MeanSquare(x) => {
                let xv = &vals[x.0];
                let scale = T::lit(2.0) * scalar_of(g)? / T::count(xv.len());
                acc(*x, xv.zip_map(xv, |v, _| scale * v)?);
            }
            Op::Probe { x, coeffs } => {
                let gv = scalar_of(g)?;
                acc(*x, Array::new(vals[x.0].shape.clone(), coeffs.iter().map(|&c| c * gv).collect())?);
            }
        }
        Ok(())
    }
}

fn depthwise_geometry<T: Scalar>(
    w: &Array<T>,
    height: usize,
    width: usize,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    let t = match w.shape[..] {
        [1, 1, t, t2] if t == t2 && t % 2 == 1 => t,
        _ => {
            return Err(Error::Contract(format!(
                "shared channel kernel must be [1, 1, 2k+1, 2k+1], got {:?}",
                w.shape
            )))
        }
    };
    contract(stride >= 1, || "stride must be at least 1".into())?;
    Ok(ConvGeometry {
        in_channels: 1,
        out_channels: 1,
        height,
        width,
        half_width: t / 2,
        stride,
        padding,
    })
}

/// Runs `f(sample, chunk)` over the `chunk_len` chunks of `out`, in
/// parallel when the convolution is large enough to pay for it.
fn per_sample<T: Scalar>(
    geo: &ConvGeometry,
    n: usize,
    out: &mut [T],
    chunk_len: usize,
    f: impl Fn(usize, &mut [T]) + Sync,
) {
    if chunk_len == 0 {
        return;
    }
    if n > 1 && geo.macs() >= PAR_MACS {
        out.par_chunks_mut(chunk_len).enumerate().for_each(|(s, o)| f(s, o));
    } else {
        out.chunks_mut(chunk_len).enumerate().for_each(|(s, o)| f(s, o));
    }
}

/// `f` applied to every sample index, results in sample order.
fn map_samples<R: Send>(geo: &ConvGeometry, n: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    if n > 1 && geo.macs() >= PAR_MACS {
        (0..n).into_par_iter().map(&f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Per-sample work (multiply-adds) above which batches are split across
/// threads.
const PAR_MACS: usize = 1 << 14;

fn same_shape<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<()> {
    contract(a.shape == b.shape, || {
        format!("shape mismatch {:?} vs {:?}", a.shape, b.shape)
    })
}

fn evaluate<T: Scalar>(op: &Op<T>, vals: &[Array<T>]) -> Result<(Array<T>, Saved<T>)> {
    let plain = |a: Array<T>| Ok((a, Saved::None));
    match op {
        Op::Leaf => Err(Error::Contract("leaves are not evaluated".into())),
        Op::Conv {
            x,
            w,
            b,
            stride,
            padding,
        } => {
            let (xv, wv) = (&vals[x.0], &vals[w.0]);
            let (n, geo) = kernel_geometry(xv, wv, *stride, *padding)?;
            let bias = match b {
                Some(b) => {
                    let bv = &vals[b.0];
                    contract(bv.len() == geo.out_channels, || {
                        format!("bias has {} entries for {} channels", bv.len(), geo.out_channels)
                    })?;
                    Some(bv.data.as_slice())
                }
                None => None,
            };
            let (il, ol) = (geo.input_len(), geo.output_len());
            let mut out = Array::zeros(&[n, geo.out_channels, geo.out_height(), geo.out_width()]);
            per_sample(&geo, n, &mut out.data, ol, |s, o| {
                conv::forward(&geo, &xv.data[s * il..(s + 1) * il], &wv.data, bias, o)
            });
            plain(out)
        }
        Op::ConvTranspose {
            x,
            w,
            stride,
            padding,
            height,
            width,
        } => {
            let (xv, wv) = (&vals[x.0], &vals[w.0]);
            let (n, c, h, wd) = xv.dims4()?;
            let fine = Array::zeros(&[1, wv.shape.get(1).copied().unwrap_or(0), *height, *width]);
            let (_, geo) = kernel_geometry(&fine, wv, *stride, *padding)?;
            contract(
                c == geo.out_channels && h == geo.out_height() && wd == geo.out_width(),
                || format!("{:?} is not the strided image of {height}x{width}", xv.shape),
            )?;
            let (il, ol) = (geo.input_len(), geo.output_len());
            let mut out = Array::zeros(&[n, geo.in_channels, *height, *width]);
            for s in 0..n {
                conv::backward_input(&geo, &xv.data[s * ol..(s + 1) * ol], &wv.data, &mut out.data[s * il..(s + 1) * il]);
            }
            plain(out)
        }
        Op::Depthwise {
            x,
            w,
            stride,
            padding,
        } => {
            let (xv, wv) = (&vals[x.0], &vals[w.0]);
            let (n, c, h, wd) = xv.dims4()?;
            let geo = depthwise_geometry(wv, h, wd, *stride, *padding)?;
            let (il, ol) = (geo.input_len(), geo.output_len());
            let mut out = Array::zeros(&[n, c, geo.out_height(), geo.out_width()]);
            for p in 0..n * c {
                conv::forward(&geo, &xv.data[p * il..(p + 1) * il], &wv.data, None, &mut out.data[p * ol..(p + 1) * ol]);
            }
            plain(out)
        }
        Op::Relu(x) => plain(vals[x.0].zip_map(&vals[x.0], |v, _| if v > T::zero() { v } else { T::zero() })?),
        Op::Add(a, b) => plain(vals[a.0].zip_map(&vals[b.0], |x, y| x + y)?),
        Op::Sub(a, b) => plain(vals[a.0].zip_map(&vals[b.0], |x, y| x - y)?),
        Op::Scale { x, s } => {
            let sv = scalar_of(&vals[s.0])?;
            plain(vals[x.0].zip_map(&vals[x.0], |v, _| sv * v)?)
        }
        Op::Blend { a, b, w } => {
            let wv = scalar_of(&vals[w.0])?;
            let (av, bv) = (&vals[a.0], &vals[b.0]);
            same_shape(av, bv)?;
            if wv == T::one() {
                plain(av.clone())
            } else if wv == T::zero() {
                plain(bv.clone())
            } else {
                plain(av.zip_map(bv, |x, y| wv * x + (T::one() - wv) * y)?)
            }
        }
        Op::Combine { parts, w } => {
            let wv = &vals[w.0];
            contract(!parts.is_empty() && wv.len() == parts.len(), || {
                format!("{} weights for {} parts", wv.len(), parts.len())
            })?;
            let first = &vals[parts[0].0];
            for p in parts {
                same_shape(first, &vals[p.0])?;
            }
            let nonzero: Vec<usize> = (0..parts.len()).filter(|&j| wv.data[j] != T::zero()).collect();
            if let [j] = nonzero[..] {
                if wv.data[j] == T::one() {
                    return plain(vals[parts[j].0].clone());
                }
            }
            let mut out = Array::zeros(first.shape());
            for j in nonzero {
                let wj = wv.data[j];
                for (o, &v) in out.data.iter_mut().zip(&vals[parts[j].0].data) {
                    *o += wj * v;
                }
            }
            plain(out)
        }
        Op::SoftmaxVec(x) => {
            let xv = &vals[x.0];
            plain(Array::new(xv.shape.clone(), crate::tensor::softmax(&xv.data))?)
        }
        Op::BatchNorm { x, gamma, beta, eps } => {
            let xv = &vals[x.0];
            let (n, c, h, wd) = xv.dims4()?;
            let (gm, bt) = (&vals[gamma.0].data, &vals[beta.0].data);
            contract(gm.len() == c && bt.len() == c, || format!("batch norm over {c} channels"))?;
            let plane = h * wd;
            let m = T::count(n * plane);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let mut inv_std = vec![T::zero(); c];
            let mut out = Array::zeros(xv.shape());
            for ch in 0..c {
                let idx = |s: usize| (s * c + ch) * plane;
                let mut sum = T::zero();
                for s in 0..n {
                    sum += xv.data[idx(s)..idx(s) + plane].iter().copied().sum::<T>();
                }
                let mu = sum / m;
                let mut sq = T::zero();
                for s in 0..n {
                    for &v in &xv.data[idx(s)..idx(s) + plane] {
                        sq += (v - mu) * (v - mu);
                    }
                }
                let v = sq / m;
                let is = T::one() / (v + *eps).sqrt();
                for s in 0..n {
                    for k in idx(s)..idx(s) + plane {
                        out.data[k] = gm[ch] * ((xv.data[k] - mu) * is) + bt[ch];
                    }
                }
                mean[ch] = mu;
                var[ch] = v;
                inv_std[ch] = is;
            }
            Ok((out, Saved::Stats { mean, inv_std, var }))
        }
        Op::BatchNormFrozen {
            x,
            gamma,
            beta,
            mean,
            var,
            eps,
        } => {
            let xv = &vals[x.0];
            let (n, c, h, wd) = xv.dims4()?;
            let (gm, bt) = (&vals[gamma.0].data, &vals[beta.0].data);
            contract(gm.len() == c && bt.len() == c && mean.len() == c && var.len() == c, || {
                format!("batch norm over {c} channels")
            })?;
            let plane = h * wd;
            let mut out = Array::zeros(xv.shape());
            for ch in 0..c {
                let is = T::one() / (var[ch] + *eps).sqrt();
                for s in 0..n {
                    let o = (s * c + ch) * plane;
                    for k in o..o + plane {
                        out.data[k] = gm[ch] * ((xv.data[k] - mean[ch]) * is) + bt[ch];
                    }
                }
            }
            plain(out)
        }
        Op::MaxPool {
            x,
            half_width,
            stride,
        } => {
            let xv = &vals[x.0];
            let (n, c, h, wd) = xv.dims4()?;
            contract(*stride >= 1, || "stride must be at least 1".into())?;
            let (oh, ow) = (conv::strided_len(h, *stride), conv::strided_len(wd, *stride));
            let mut out = Array::zeros(&[n, c, oh, ow]);
            // flat indices run over the stacked sample planes
            let arg = conv::max_pool(n * c, h, wd, *half_width, *stride, Padding::Zero, &xv.data, &mut out.data);
            Ok((out, Saved::Indices(arg)))
        }
        Op::GlobalAvgPool(x) => {
            let xv = &vals[x.0];
            let (n, c, h, wd) = xv.dims4()?;
            let plane = h * wd;
            let inv = T::one() / T::count(plane);
            let data = xv.data.chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
            plain(Array::new(vec![n, c], data)?)
        }
        Op::Linear { x, w, b } => {
            let (xv, wv, bv) = (&vals[x.0], &vals[w.0], &vals[b.0]);
            let (n, kin) = xv.dims2()?;
            let (kout, kin2) = wv.dims2()?;
            contract(kin == kin2 && bv.len() == kout, || {
                format!("linear map {:?} with bias {:?} on input {:?}", wv.shape, bv.shape, xv.shape)
            })?;
            let mut out = Array::zeros(&[n, kout]);
            for s in 0..n {
                for o in 0..kout {
                    let mut acc = bv.data[o];
                    for i in 0..kin {
                        acc += wv.data[o * kin + i] * xv.data[s * kin + i];
                    }
                    out.data[s * kout + o] = acc;
                }
            }
            plain(out)
        }
        Op::SoftmaxCrossEntropy { logits, labels } => {
            let lv = &vals[logits.0];
            let (n, k) = lv.dims2()?;
            contract(labels.len() == n && labels.iter().all(|&y| y < k), || {
                format!("{} labels in 0..{k} for a batch of {n}", labels.len())
            })?;
            let mut probs = Vec::with_capacity(n * k);
            let mut loss = T::zero();
            for (s, &y) in labels.iter().enumerate() {
                let row = &lv.data[s * k..(s + 1) * k];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
                loss += lse - row[y];
                probs.extend(row.iter().map(|&z| (z - lse).exp()));
            }
            Ok((Array::scalar(loss / T::count(n)), Saved::Probs(probs)))
        }
        Op::MeanSquare(x) => {
            let xv = &vals[x.0];
            contract(!xv.is_empty(), || "mean of an empty array".into())?;
            plain(Array::scalar(xv.data.iter().map(|&v| v * v).sum::<T>() / T::count(xv.len())))
        }
        Op::Probe { x, coeffs } => {
            let xv = &vals[x.0];
            contract(coeffs.len() == xv.len(), || {
                format!("{} probe coefficients for {} values", coeffs.len(), xv.len())
            })?;
            plain(Array::scalar(xv.data.iter().zip(coeffs).map(|(&a, &b)| a * b).sum()))
        }
    }
}

/// Worst-case outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// `(group name, relative error)` per parameter group.
    pub groups: Vec<(String, f64)>,
    pub worst_relative_error: f64,
    pub min_abs_preactivation: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst_relative_error < tolerance
    }
}

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the per-group relative error.
pub const FD_FLOOR: f64 = 1e-8;

/// Compares reverse-mode gradients with central differences on every
/// parameter group.
///
/// `build` records the loss on a fresh tape from the given parameter values
/// and returns the loss node; parameters must be registered on the tape in
/// the order of `params`. Each group's error is
/// `||fd - bp|| / max(||fd|| + ||bp||, FD_FLOOR)`.
pub fn finite_diff_check<F>(params: &[(String, Array<f64>)], build: F) -> Result<GradCheckReport>
where
    F: Fn(&[(String, Array<f64>)], &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(params, &mut tape)?;
    let grads = tape.backward(loss)?;
    contract(tape.params().len() == params.len(), || {
        format!("{} parameters registered, {} supplied", tape.params().len(), params.len())
    })?;
    let min_abs = tape.min_abs_relu_input();
    let eval = |p: &[(String, Array<f64>)]| -> Result<f64> {
        let mut t = Tape::new();
        let l = build(p, &mut t)?;
        scalar_of(t.value(l))
    };
    let mut work = params.to_vec();
    let mut groups = Vec::with_capacity(params.len());
    let mut worst = 0.0f64;
    for (gi, (name, value)) in params.iter().enumerate() {
        let bp = grads.get_or_zero(&tape, tape.params()[gi].1);
        let mut diff2 = 0.0;
        let mut fd2 = 0.0;
        let mut bp2 = 0.0;
        for k in 0..value.len() {
            let orig = value.data[k];
            work[gi].1.data[k] = orig + FD_STEP;
            let up = eval(&work)?;
            work[gi].1.data[k] = orig - FD_STEP;
            let down = eval(&work)?;
            work[gi].1.data[k] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let b = bp.data[k];
            diff2 += (fd - b) * (fd - b);
            fd2 += fd * fd;
            bp2 += b * b;
        }
        let rel = diff2.sqrt() / (fd2.sqrt() + bp2.sqrt()).max(FD_FLOOR);
        worst = worst.max(rel);
        groups.push((name.clone(), rel));
    }
    Ok(GradCheckReport {
        groups,
        worst_relative_error: worst,
        min_abs_preactivation: min_abs,
    })
}
