//! The fine-to-coarse iteration shared by the network and by linear
//! multigrid, written once against an abstract set of level operations.

use crate::error::Result;

use super::Smoothing;

/// Level operations an MgNet sweep is assembled from.
///
/// Levels are 1-based; `i` counts smoothing steps from 1.
pub trait LevelOps {
    type Value: Clone;

    /// `u^(1,0) = 0` shaped like the features belonging to `f1`.
    fn zero_feature(&mut self, f1: &Self::Value) -> Result<Self::Value>;
    /// `A^l u`, or `None` when level `l` has no data-feature map.
    fn data_feature(&mut self, level: usize, u: &Self::Value) -> Result<Option<Self::Value>>;
    /// `B^(l,i) r`.
    fn extract(&mut self, level: usize, i: usize, r: &Self::Value) -> Result<Self::Value>;
    /// `R r` to level `l + 1`.
    fn restrict(&mut self, level: usize, r: &Self::Value) -> Result<Self::Value>;
    /// `Pi u` to level `l + 1`.
    fn interpolate(&mut self, level: usize, u: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    /// `omega^(l,i) a + (1 - omega^(l,i)) b` for `i >= 2`.
    fn blend(&mut self, _level: usize, _i: usize, _a: &Self::Value, _b: &Self::Value) -> Result<Self::Value> {
        Err(crate::Error::Contract("this backend has no semi-iterative weights".into()))
    }

    /// `sum_j alpha^(l,i)_j candidates_j` with simplex weights.
    fn combine(&mut self, _level: usize, _i: usize, _candidates: &[Self::Value]) -> Result<Self::Value> {
        Err(crate::Error::Contract("this backend has no multistep weights".into()))
    }

    /// `P d` from level `l + 1` onto the grid of `like` (level `l`).
    fn prolongate(&mut self, _level: usize, _d: &Self::Value, _like: &Self::Value) -> Result<Self::Value> {
        Err(crate::Error::Contract("this backend has no prolongation".into()))
    }

    /// Up-sweep extractor `B'_(l,i) r`.
    fn extract_up(&mut self, _level: usize, _i: usize, _r: &Self::Value) -> Result<Self::Value> {
        Err(crate::Error::Contract("this backend has no up-sweep extractors".into()))
    }
}

/// Every right-hand side and iterate of one sweep.
#[derive(Clone, Debug)]
pub struct Trace<V> {
    /// `f[l - 1] = f^l`.
    pub f: Vec<V>,
    /// `u[l - 1][i] = u^(l,i)` for `i = 0..=nu_l`.
    pub u: Vec<Vec<V>>,
}

impl<V> Trace<V> {
    /// Final iterate of the coarsest level, `u^J`.
    pub fn output(&self) -> &V {
        self.u.last().and_then(|l| l.last()).expect("non-empty trace")
    }

    /// `u^l = u^(l, nu_l)`.
    pub fn level_output(&self, level: usize) -> &V {
        self.u[level - 1].last().expect("u^(l,0) is always present")
    }
}

fn residual<O: LevelOps>(ops: &mut O, level: usize, f: &O::Value, u: &O::Value) -> Result<O::Value> {
    match ops.data_feature(level, u)? {
        Some(au) => ops.sub(f, &au),
        None => Ok(f.clone()),
    }
}

fn single_step<O: LevelOps>(
    ops: &mut O,
    level: usize,
    i: usize,
    f: &O::Value,
    u: &O::Value,
) -> Result<O::Value> {
    let r = residual(ops, level, f, u)?;
    let b = ops.extract(level, i, &r)?;
    ops.add(u, &b)
}

/// One smoothing step `u^(l,i)` from the history `u^(l,0..i)`.
pub fn smooth_variant_step<O: LevelOps>(
    ops: &mut O,
    variant: Smoothing,
    level: usize,
    i: usize,
    f: &O::Value,
    history: &[O::Value],
) -> Result<O::Value> {
    crate::error::contract(i >= 1 && history.len() >= i, || {
        format!("step {i} needs {i} earlier iterates, got {}", history.len())
    })?;
    match variant {
        Smoothing::SingleStep => single_step(ops, level, i, f, &history[i - 1]),
        Smoothing::ChebyshevSemi => {
            let step = single_step(ops, level, i, f, &history[i - 1])?;
            if i == 1 {
                Ok(step)
            } else {
                ops.blend(level, i, &step, &history[i - 2])
            }
        }
        Smoothing::MultiStep => {
            let candidates = history[..i]
                .iter()
                .map(|u| single_step(ops, level, i, f, u))
                .collect::<Result<Vec<_>>>()?;
            ops.combine(level, i, &candidates)
        }
    }
}

/// Fine-to-coarse sweep: `nu_l` smoothing steps per level from
/// `u^(1,0) = 0`, then `u^(l+1,0) = Pi u^l` and
/// `f^(l+1) = R (f^l - A^l u^l) + A^(l+1) u^(l+1,0)`.
pub fn mgnet_skeleton<O: LevelOps>(
    ops: &mut O,
    f1: O::Value,
    nu: &[usize],
    variant: Smoothing,
) -> Result<Trace<O::Value>> {
    let levels = nu.len();
    crate::error::contract(levels >= 1, || "at least one level".into())?;
    let mut trace = Trace {
        f: Vec::with_capacity(levels),
        u: Vec::with_capacity(levels),
    };
    let mut u0 = ops.zero_feature(&f1)?;
    let mut f = f1;
    for level in 1..=levels {
        let mut history = vec![u0];
        for i in 1..=nu[level - 1] {
            let next = smooth_variant_step(ops, variant, level, i, &f, &history)?;
            history.push(next);
        }
        if level == levels {
            trace.f.push(f);
            trace.u.push(history);
            break;
        }
        let u = history.last().expect("u^(l,0)").clone();
        let next_u0 = ops.interpolate(level, &u)?;
        let r = residual(ops, level, &f, &u)?;
        let mut next_f = ops.restrict(level, &r)?;
        if let Some(a) = ops.data_feature(level + 1, &next_u0)? {
            next_f = ops.add(&next_f, &a)?;
        }
        trace.f.push(f);
        trace.u.push(history);
        f = next_f;
        u0 = next_u0;
    }
    Ok(trace)
}

/// V-cycle variant: the fine-to-coarse sweep followed by
/// `u^(l,0) = ubar^l + P (u^(l+1) - ubar^(l+1,0))` and `nu_up_l` up-sweep
/// smoothings on the way back. Returns `u^1` and the down-sweep trace.
pub fn v_mgnet_skeleton<O: LevelOps>(
    ops: &mut O,
    f1: O::Value,
    nu: &[usize],
    nu_up: &[usize],
    variant: Smoothing,
) -> Result<(O::Value, Trace<O::Value>)> {
    crate::error::contract(nu_up.len() == nu.len(), || {
        format!("{} up-sweep counts for {} levels", nu_up.len(), nu.len())
    })?;
    let trace = mgnet_skeleton(ops, f1, nu, variant)?;
    let levels = nu.len();
    let mut coarse = trace.output().clone();
    for level in (1..levels).rev() {
        let ubar = trace.level_output(level);
        let d = ops.sub(&coarse, &trace.u[level][0])?;
        let p = ops.prolongate(level, &d, ubar)?;
        let mut u = ops.add(ubar, &p)?;
        let f = &trace.f[level - 1];
        for i in 1..=nu_up[level - 1] {
            let r = residual(ops, level, f, &u)?;
            let b = ops.extract_up(level, i, &r)?;
            u = ops.add(&u, &b)?;
        }
        coarse = u;
    }
    Ok((coarse, trace))
}
