//! Labelled images: CIFAR binary records and a synthetic blob generator.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, format_error, Result};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR10_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR100_RECORD: usize = 2 + CIFAR_PIXELS;

/// Noise level of the synthetic generator.
pub const SYNTHETIC_NOISE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage<T> {
    /// `h x w x c`, values in `[0, 1]` unless standardized.
    pub image: Tensor<T>,
    pub label: usize,
}

/// Parses CIFAR-10 binary records: one label byte, then the R, G and B
/// planes (row-major), pixels scaled by `1/255`.
pub fn parse_cifar10<T: Scalar>(bytes: &[u8]) -> Result<Vec<LabeledImage<T>>> {
    parse_records(bytes, 1, 10)
}

/// CIFAR-100 records carry a coarse and a fine label byte; the fine one is
/// kept.
pub fn parse_cifar100<T: Scalar>(bytes: &[u8]) -> Result<Vec<LabeledImage<T>>> {
    parse_records(bytes, 2, 100)
}

pub fn load_cifar10<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<LabeledImage<T>>> {
    parse_cifar10(&std::fs::read(path)?)
}

pub fn load_cifar100<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<LabeledImage<T>>> {
    parse_cifar100(&std::fs::read(path)?)
}

fn parse_records<T: Scalar>(bytes: &[u8], label_bytes: usize, classes: usize) -> Result<Vec<LabeledImage<T>>> {
    let record = label_bytes + CIFAR_PIXELS;
    let whole = bytes.len() - bytes.len() % record;
    if whole != bytes.len() {
        return Err(format_error(
            whole as u64,
            format!("truncated record: {} of {record} bytes", bytes.len() - whole),
        ));
    }
    bytes
        .chunks_exact(record)
        .enumerate()
        .map(|(i, rec)| {
            let offset = (i * record + label_bytes - 1) as u64;
            let label = rec[label_bytes - 1] as usize;
            if label >= classes {
                return Err(format_error(offset, format!("label {label} outside 0..{classes}")));
            }
            let data = rec[label_bytes..].iter().map(|&b| T::lit(b as f64 / 255.0)).collect();
            Ok(LabeledImage {
                image: Tensor::new(CIFAR_SIDE, CIFAR_SIDE, 3, data)?,
                label,
            })
        })
        .collect()
}

/// Encodes images back into CIFAR-10 records (pixels rounded to bytes).
pub fn encode_cifar10<T: Scalar>(items: &[LabeledImage<T>]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(items.len() * CIFAR10_RECORD);
    for item in items {
        contract(item.image.shape() == (CIFAR_SIDE, CIFAR_SIDE, 3), || {
            format!("CIFAR images are 32x32x3, got {:?}", item.image.shape())
        })?;
        contract(item.label < 10, || format!("label {} outside 0..10", item.label))?;
        out.push(item.label as u8);
        out.extend(
            item.image
                .as_slice()
                .iter()
                .map(|v| (v.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    Ok(out)
}

/// Parameters of [`gen_synthetic`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub seed: u64,
}

fn default_channels() -> usize {
    3
}

/// Centre of the blob of class `k`: evenly spaced on a circle of radius
/// `size / 4` around the image centre.
pub fn blob_center(k: usize, classes: usize, size: usize) -> (f64, f64) {
    let c = (size as f64 - 1.0) / 2.0;
    let r = size as f64 / 4.0;
    let angle = 2.0 * PI * k as f64 / classes as f64;
    (c + r * angle.sin(), c + r * angle.cos())
}

/// Noise-free image of class `k`.
pub fn blob_template(k: usize, classes: usize, size: usize, channels: usize) -> Tensor<f64> {
    let (cr, cc) = blob_center(k, classes, size);
    let width = (size as f64 / 8.0).max(1.0);
    Tensor::from_fn(size, size, channels, |row, col, _| {
        let d2 = (row as f64 - cr).powi(2) + (col as f64 - cc).powi(2);
        0.2 + 0.6 * (-d2 / (2.0 * width * width)).exp()
    })
}

/// Class-conditional Gaussian blobs plus pixel noise of standard deviation
/// [`SYNTHETIC_NOISE`], clamped to `[0, 1]`. Items are ordered by class.
pub fn gen_synthetic<T: Scalar>(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Vec<LabeledImage<T>>> {
    gen_synthetic_spec(&SyntheticSpec {
        classes,
        per_class,
        size,
        channels: default_channels(),
        seed,
    })
}

pub fn gen_synthetic_spec<T: Scalar>(spec: &SyntheticSpec) -> Result<Vec<LabeledImage<T>>> {
    contract(spec.classes >= 2, || "at least two classes".into())?;
    contract(spec.size >= 1 && spec.channels >= 1, || "empty images".into())?;
    let mut rng = seeded(spec.seed);
    let mut out = Vec::with_capacity(spec.classes * spec.per_class);
    for k in 0..spec.classes {
        let template = blob_template(k, spec.classes, spec.size, spec.channels);
        for _ in 0..spec.per_class {
            let mut image = template.clone();
            for v in image.as_mut_slice() {
                let noise: f64 = rng.sample(rand_distr::StandardNormal);
                *v = (*v + SYNTHETIC_NOISE * noise).clamp(0.0, 1.0);
            }
            out.push(LabeledImage {
                image: image.cast(),
                label: k,
            });
        }
    }
    Ok(out)
}

/// Per-channel mean and standard deviation over a dataset.
pub fn channel_stats<T: Scalar>(items: &[LabeledImage<T>]) -> Result<(Vec<f64>, Vec<f64>)> {
    contract(!items.is_empty(), || "no images".into())?;
    let c = items[0].image.channels();
    let mut sum = vec![0.0; c];
    let mut sum2 = vec![0.0; c];
    let mut n = 0usize;
    for item in items {
        contract(item.image.channels() == c, || "mixed channel counts".into())?;
        for (ch, (s, s2)) in sum.iter_mut().zip(&mut sum2).enumerate() {
            for v in item.image.plane(ch) {
                let v = v.to_f64_lossy();
                *s += v;
                *s2 += v * v;
            }
        }
        n += item.image.height() * item.image.width();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sum2
        .iter()
        .zip(&mean)
        .map(|(s2, m)| (s2 / n as f64 - m * m).max(0.0).sqrt().max(1e-12))
        .collect();
    Ok((mean, std))
}

/// Subtracts `mean` and divides by `std` channel by channel.
pub fn standardize<T: Scalar>(items: &mut [LabeledImage<T>], mean: &[f64], std: &[f64]) -> Result<()> {
    for item in items {
        contract(item.image.channels() == mean.len(), || "statistics do not match the channels".into())?;
        let plane = item.image.height() * item.image.width();
        for (i, v) in item.image.as_mut_slice().iter_mut().enumerate() {
            let ch = i / plane;
            *v = T::lit((v.to_f64_lossy() - mean[ch]) / std[ch]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_records() {
        let bytes = vec![0u8; 10 * CIFAR10_RECORD];
        assert_eq!(bytes.len(), 30730);
        let items = parse_cifar10::<f64>(&bytes).unwrap();
        assert_eq!(items.len(), 10);
        assert!(items.iter().all(|i| i.image.shape() == (32, 32, 3)));
    }

    #[test]
    fn label_and_scaling() {
        let mut rec = vec![255u8; CIFAR10_RECORD];
        rec[0] = 3;
        let items = parse_cifar10::<f64>(&rec).unwrap();
        assert_eq!(items[0].label, 3);
        assert!(items[0].image.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = vec![0u8; 2 * CIFAR10_RECORD + 5];
        match parse_cifar10::<f64>(&bytes) {
            Err(crate::Error::Format { offset, .. }) => assert_eq!(offset, 2 * CIFAR10_RECORD as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_label_reports_offset() {
        let mut bytes = vec![0u8; 3 * CIFAR10_RECORD];
        bytes[CIFAR10_RECORD] = 10;
        match parse_cifar10::<f64>(&bytes) {
            Err(crate::Error::Format { offset, .. }) => assert_eq!(offset, CIFAR10_RECORD as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cifar100_fine_label() {
        let mut rec = vec![0u8; CIFAR100_RECORD];
        rec[0] = 4;
        rec[1] = 77;
        rec[2] = 51;
        let items = parse_cifar100::<f64>(&rec).unwrap();
        assert_eq!(items[0].label, 77);
        assert_eq!(items[0].image.get(0, 0, 0), 51.0 / 255.0);
        rec[1] = 100;
        assert!(parse_cifar100::<f64>(&rec).is_err());
    }

    #[test]
    fn plane_order() {
        let mut rec = vec![0u8; CIFAR10_RECORD];
        rec[1 + 1024 + 32 + 2] = 255; // green, row 1, column 2
        let img = &parse_cifar10::<f64>(&rec).unwrap()[0].image;
        assert_eq!(img.get(1, 2, 1), 1.0);
        assert_eq!(img.as_slice().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn synthetic_counts() {
        let items = gen_synthetic::<f64>(2, 100, 8, 1).unwrap();
        assert_eq!(items.len(), 200);
        assert_eq!(items.iter().filter(|i| i.label == 0).count(), 100);
        assert!(gen_synthetic::<f64>(1, 10, 8, 1).is_err());
    }

    #[test]
    fn standardized_statistics() {
        let mut items = gen_synthetic::<f64>(3, 10, 6, 2).unwrap();
        let (mean, std) = channel_stats(&items).unwrap();
        standardize(&mut items, &mean, &std).unwrap();
        let (m2, s2) = channel_stats(&items).unwrap();
        for (m, s) in m2.iter().zip(&s2) {
            assert!(m.abs() < 1e-12 && (s - 1.0).abs() < 1e-9);
        }
    }
}
