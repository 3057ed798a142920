//! Binary checkpoints.
//!
//! Layout: the magic `MGNET1`, a `u32` version, then for every tensor its
//! name length (`u32`), the UTF-8 name, the rank (`u32`), each dimension
//! (`u32`) and the values as `f64`. Integers and floats are little-endian;
//! the file ends after the last tensor. Optional training state is stored
//! as ordinary tensors under reserved names.

use std::path::Path;

use crate::autodiff::Array;
use crate::error::{contract, format_error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::train::SgdState;

pub const MAGIC: &[u8; 6] = b"MGNET1";
pub const VERSION: u32 = 1;

/// Largest rank accepted when reading.
const MAX_RANK: usize = 8;
const STEP_NAME: &str = "@step";
const MOMENTUM_PREFIX: &str = "@momentum/";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Model tensors in store order.
    pub tensors: Vec<NamedTensor>,
    /// Optimizer step counter, when saved mid-training.
    pub step: Option<u64>,
    /// Momentum buffers by parameter name.
    pub momentum: Vec<NamedTensor>,
}

fn named<T: Scalar>(name: &str, shape: &[usize], data: &[T]) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        shape: shape.to_vec(),
        values: data.iter().map(|v| v.to_f64_lossy()).collect(),
    }
}

impl Checkpoint {
    /// Every stored array of `params`, running statistics included.
    pub fn from_params<T: Scalar>(params: &ParamStore<T>) -> Self {
        Self {
            tensors: params.iter().map(|(n, v, _)| named(n, v.shape(), v.data())).collect(),
            step: None,
            momentum: Vec::new(),
        }
    }

    pub fn with_state<T: Scalar>(mut self, state: &SgdState<T>) -> Self {
        self.step = Some(state.step);
        self.momentum = state
            .velocity
            .iter()
            .map(|(n, v)| named(n, &[v.len()], v))
            .collect();
        self
    }

    /// Copies every tensor named by `params` into it; names must exist
    /// with identical shapes.
    pub fn load_into<T: Scalar>(&self, params: &mut ParamStore<T>) -> Result<()> {
        let names: Vec<String> = params.iter().map(|(n, _, _)| n.to_string()).collect();
        for name in names {
            let t = self.tensors.iter().find(|t| t.name == name);
            let t = t.ok_or_else(|| crate::Error::Contract(format!("checkpoint lacks {name}")))?;
            let slot = params.get_mut(&name)?;
            contract(slot.shape() == t.shape.as_slice(), || {
                format!("{name}: model shape {:?}, checkpoint shape {:?}", slot.shape(), t.shape)
            })?;
            *slot = Array::new(t.shape.clone(), t.values.iter().map(|&v| T::lit(v)).collect())?;
        }
        Ok(())
    }

    /// The optimizer state, when one was saved.
    pub fn sgd_state<T: Scalar>(&self) -> Option<SgdState<T>> {
        Some(SgdState {
            step: self.step?,
            velocity: self
                .momentum
                .iter()
                .map(|t| (t.name.clone(), t.values.iter().map(|&v| T::lit(v)).collect()))
                .collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let step = self.step.map(|s| NamedTensor {
            name: STEP_NAME.into(),
            shape: vec![1],
            values: vec![s as f64],
        });
        let momentum = self.momentum.iter().map(|t| NamedTensor {
            name: format!("{MOMENTUM_PREFIX}{}", t.name),
            ..t.clone()
        });
        for t in self.tensors.iter().cloned().chain(step).chain(momentum) {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(format_error(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(format_error(MAGIC.len() as u64, format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::default();
        while r.pos < bytes.len() {
            let t = r.tensor()?;
            if t.name == STEP_NAME {
                ck.step = Some(t.values.first().copied().unwrap_or(0.0) as u64);
            } else if let Some(name) = t.name.strip_prefix(MOMENTUM_PREFIX) {
                ck.momentum.push(NamedTensor {
                    name: name.to_string(),
                    ..t
                });
            } else {
                ck.tensors.push(t);
            }
        }
        Ok(ck)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let rest = self.bytes.len() - self.pos;
        if n > rest {
            return Err(format_error(
                self.pos as u64,
                format!("{what}: need {n} bytes, {rest} left"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
    }

    fn tensor(&mut self) -> Result<NamedTensor> {
        let at = self.pos as u64;
        let len = self.u32("name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "name")?)
            .map_err(|_| format_error(at + 4, "tensor name is not UTF-8"))?
            .to_string();
        let rank_at = self.pos as u64;
        let rank = self.u32("rank")? as usize;
        if rank > MAX_RANK {
            return Err(format_error(rank_at, format!("{name}: rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("dimension")? as usize);
        }
        let values_at = self.pos;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| format_error(values_at as u64, format!("{name}: shape {shape:?} overflows")))?;
        let raw = self.take(count, &format!("{name} values"))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        Ok(NamedTensor { name, shape, values })
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    std::fs::write(&tmp, checkpoint.to_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
