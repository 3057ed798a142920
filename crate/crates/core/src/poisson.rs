//! Discrete 2D Poisson operator on nested odd grids and the geometric
//! multigrid built on it: damped Jacobi smoothing, Galerkin coarse
//! operators, the fine-to-coarse sweep and the `\`-cycle.
//!
//! The fine operator is the five-point stencil applied with zero padding,
//! which makes it symmetric positive definite. Coarse operators are the
//! Galerkin products `R A P` with `R = P^T`; they stay within a 3x3 stencil
//! but their coefficients vary near the boundary, so every level stores a
//! per-node stencil.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::grid::{prolongate, restrict_kr, GridHierarchy, ProlongationMode};
use crate::scalar::Scalar;
use crate::tensor::{conv2d, ConvKernel, Padding, Tensor};

/// The five-point Laplacian `K_A`.
pub fn laplacian_kernel<T: Scalar>() -> ConvKernel<T> {
    let (z, m, c) = (T::zero(), -T::one(), T::lit(4.0));
    ConvKernel::from_matrix(&[vec![z, m, z], vec![m, c, m], vec![z, m, z]]).expect("3x3")
}

/// Two fused damped-Jacobi steps from a zero guess, `K_S1`.
pub fn two_step_jacobi_kernel<T: Scalar>(omega: T) -> ConvKernel<T> {
    let z = T::zero();
    let centre = omega * (T::lit(2.0) - omega) / T::lit(4.0);
    let cross = omega * omega / T::lit(16.0);
    ConvKernel::from_matrix(&[
        vec![z, cross, z],
        vec![cross, centre, cross],
        vec![z, cross, z],
    ])
    .expect("3x3")
}

/// Linear operator on one grid level, given as a 3x3 stencil per node
/// (zero outside the grid).
#[derive(Clone, Debug, PartialEq)]
pub struct StencilOperator<T> {
    level: usize,
    height: usize,
    width: usize,
    /// `coeffs[node][3 * (dr + 1) + (dc + 1)]` multiplies `u[row + dr, col + dc]`.
    coeffs: Vec<[T; 9]>,
    kernel: Option<ConvKernel<T>>,
}

impl<T: Scalar> StencilOperator<T> {
    /// The five-point operator at level 1.
    pub fn laplacian(height: usize, width: usize) -> Self {
        let k = laplacian_kernel::<T>();
        let mut stencil = [T::zero(); 9];
        for (p, row) in k.window(0, 0).into_iter().enumerate() {
            for (q, v) in row.into_iter().enumerate() {
                stencil[3 * p + q] = v;
            }
        }
        Self {
            level: 1,
            height,
            width,
            coeffs: vec![stencil; height * width],
            kernel: Some(k),
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// The equivalent convolution kernel when the operator is one.
    pub fn kernel(&self) -> Option<&ConvKernel<T>> {
        self.kernel.as_ref()
    }

    /// Stencil at node `(row, col)`, row-major over offsets `-1..=1`.
    pub fn stencil(&self, row: usize, col: usize) -> &[T; 9] {
        &self.coeffs[row * self.width + col]
    }

    /// Main diagonal entry at every node, row-major.
    pub fn diagonal(&self) -> Vec<T> {
        self.coeffs.iter().map(|s| s[4]).collect()
    }

    fn check(&self, u: &Tensor<T>) -> Result<()> {
        contract(
            u.height() == self.height && u.width() == self.width && u.channels() == 1,
            || {
                format!(
                    "level {} operator acts on {}x{}x1, got {:?}",
                    self.level,
                    self.height,
                    self.width,
                    u.shape()
                )
            },
        )
    }

    pub fn apply(&self, u: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(u)?;
        if let Some(k) = &self.kernel {
            return conv2d(u, k, 1, Padding::Zero);
        }
        let (h, w) = (self.height, self.width);
        let src = u.as_slice();
        let mut out = vec![T::zero(); h * w];
        for i in 0..h {
            for j in 0..w {
                let s = &self.coeffs[i * w + j];
                let mut acc = T::zero();
                for dr in 0..3 {
                    let r = i as isize + dr as isize - 1;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    for dc in 0..3 {
                        let c = j as isize + dc as isize - 1;
                        if c < 0 || c >= w as isize {
                            continue;
                        }
                        acc += s[3 * dr + dc] * src[r as usize * w + c as usize];
                    }
                }
                out[i * w + j] = acc;
            }
        }
        Tensor::new(h, w, 1, out)
    }

    /// Assembled matrix acting on row-major flattened grids.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let (h, w) = (self.height, self.width);
        let mut a = DMatrix::zeros(h * w, h * w);
        for i in 0..h {
            for j in 0..w {
                let s = &self.coeffs[i * w + j];
                for dr in 0..3 {
                    for dc in 0..3 {
                        let (r, c) = (i as isize + dr as isize - 1, j as isize + dc as isize - 1);
                        if r >= 0 && r < h as isize && c >= 0 && c < w as isize {
                            a[(i * w + j, r as usize * w + c as usize)] += s[3 * dr + dc].to_f64_lossy();
                        }
                    }
                }
            }
        }
        a
    }
}

/// Galerkin coarse operator `R A P` with `R = P^T`.
///
/// Computed matrix-free by probing with nine interleaved sums of coarse unit
/// vectors; nodes in one probe are three apart, so their 3x3 images never
/// overlap.
pub fn galerkin_coarsen<T: Scalar>(
    fine: &StencilOperator<T>,
    mode: ProlongationMode,
) -> Result<StencilOperator<T>> {
    let (hf, wf) = fine.size();
    contract(
        hf % 2 == 1 && wf % 2 == 1 && hf >= 5 && wf >= 5,
        || format!("cannot coarsen a {hf}x{wf} level further"),
    )?;
    let (hc, wc) = (hf.div_ceil(2), wf.div_ceil(2));
    let mut coeffs = vec![[T::zero(); 9]; hc * wc];
    for a in 0..3 {
        for b in 0..3 {
            let probe = Tensor::from_fn(hc, wc, 1, |i, j, _| {
                if i % 3 == a && j % 3 == b {
                    T::one()
                } else {
                    T::zero()
                }
            });
            let image = restrict_kr(&fine.apply(&prolongate(&probe, mode))?, mode)?;
            for i in 0..hc {
                for j in 0..wc {
                    let v = image.get(i, j, 0);
                    // the probed node J with |I - J| <= 1 in each direction
                    let jr = (3 + a - i % 3) % 3;
                    let jc = (3 + b - j % 3) % 3;
                    let dr = match jr {
                        0 => 0isize,
                        1 => 1,
                        _ => -1,
                    };
                    let dc = match jc {
                        0 => 0isize,
                        1 => 1,
                        _ => -1,
                    };
                    let (r, c) = (i as isize + dr, j as isize + dc);
                    if r < 0 || r >= hc as isize || c < 0 || c >= wc as isize {
                        continue;
                    }
                    coeffs[i * wc + j][(3 * (dr + 1) + dc + 1) as usize] = v;
                }
            }
        }
    }
    Ok(StencilOperator {
        level: fine.level + 1,
        height: hc,
        width: wc,
        coeffs,
        kernel: None,
    })
}

/// How many damped-Jacobi sweeps one application of the smoother fuses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusedSteps {
    #[default]
    One,
    Two,
}

/// Damped Jacobi smoother started from a zero guess.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmootherSpec {
    pub omega: f64,
    pub steps: FusedSteps,
}

impl Default for SmootherSpec {
    fn default() -> Self {
        Self {
            omega: 0.8,
            steps: FusedSteps::One,
        }
    }
}

impl SmootherSpec {
    pub fn one(omega: f64) -> Self {
        Self {
            omega,
            steps: FusedSteps::One,
        }
    }

    pub fn two(omega: f64) -> Self {
        Self {
            omega,
            steps: FusedSteps::Two,
        }
    }

    pub fn validate(&self) -> Result<()> {
        contract(self.omega > 0.0 && self.omega < 2.0, || {
            format!("damping {} outside (0, 2)", self.omega)
        })
    }
}

/// Level operators, grids and transfer mode of one multigrid hierarchy.
#[derive(Clone, Debug)]
pub struct PoissonHierarchy<T> {
    grids: GridHierarchy,
    mode: ProlongationMode,
    operators: Vec<StencilOperator<T>>,
}

/// Every iterate of the fine-to-coarse sweep.
#[derive(Clone, Debug)]
pub struct Mg0Trace<T> {
    /// `f[l]` is the right-hand side on level `l + 1`.
    pub f: Vec<Tensor<T>>,
    /// `u[l][i]` is `u^{l+1, i}`, `i = 0..=nu_l`.
    pub u: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> Mg0Trace<T> {
    /// Final smoothed iterate of every level.
    pub fn finals(&self) -> Vec<&Tensor<T>> {
        self.u.iter().map(|l| l.last().expect("u^{l,0} present")).collect()
    }
}

/// Residual history of the iterated `\`-cycle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveReport {
    /// `||f - A u||_2` before the first cycle and after each cycle.
    pub residual_history: Vec<f64>,
    pub cycles_run: usize,
}

impl SolveReport {
    pub fn is_monotone(&self) -> bool {
        self.residual_history.windows(2).all(|w| w[1] <= w[0])
    }

    /// Geometric-mean residual reduction per cycle.
    pub fn mean_contraction(&self) -> f64 {
        let (first, last) = (self.residual_history[0], *self.residual_history.last().unwrap());
        if self.cycles_run == 0 || first == 0.0 {
            return 0.0;
        }
        (last / first).powf(1.0 / self.cycles_run as f64)
    }
}

impl<T: Scalar> PoissonHierarchy<T> {
    /// Builds `levels` Galerkin levels below a `fine x fine` grid,
    /// `fine = 2^s + 1`.
    pub fn new(fine: usize, levels: usize, mode: ProlongationMode) -> Result<Self> {
        let grids = GridHierarchy::from_fine_size(fine, levels)?;
        let mut operators = vec![StencilOperator::laplacian(fine, fine)];
        for _ in 1..levels {
            let next = galerkin_coarsen(operators.last().unwrap(), mode)?;
            operators.push(next);
        }
        Ok(Self {
            grids,
            mode,
            operators,
        })
    }

    /// Hierarchy coarsened all the way down to a 3x3 grid.
    pub fn full_depth(fine: usize, mode: ProlongationMode) -> Result<Self> {
        let s = crate::grid::odd_chain_exponent(fine)
            .filter(|&s| s >= 1)
            .ok_or_else(|| Error::Contract(format!("grid size {fine} is not 2^s + 1")))?;
        Self::new(fine, s as usize, mode)
    }

    pub fn levels(&self) -> usize {
        self.operators.len()
    }

    pub fn grids(&self) -> &GridHierarchy {
        &self.grids
    }

    pub fn mode(&self) -> ProlongationMode {
        self.mode
    }

    /// The level-`level` operator (1-based).
    pub fn operator(&self, level: usize) -> Result<&StencilOperator<T>> {
        self.operators
            .get(level.wrapping_sub(1))
            .ok_or_else(|| Error::Contract(format!("no level {level} in a {}-level hierarchy", self.levels())))
    }

    /// `A^l u`.
    pub fn apply_poisson(&self, u: &Tensor<T>, level: usize) -> Result<Tensor<T>> {
        self.operator(level)?.apply(u)
    }

    /// `S^l f`: damped Jacobi from a zero guess, one sweep or two fused.
    ///
    /// One sweep is `omega * f / diag(A^l)` (`omega/4 * f` on level 1); two
    /// sweeps are `S0 f + S0 (f - A S0 f)`, which on level 1 is the `K_S1`
    /// convolution.
    pub fn jacobi_smooth(&self, f: &Tensor<T>, spec: SmootherSpec, level: usize) -> Result<Tensor<T>> {
        spec.validate()?;
        let op = self.operator(level)?;
        op.check(f)?;
        let omega = T::lit(spec.omega);
        let one_step = |g: &Tensor<T>| -> Tensor<T> {
            let diag = op.diagonal();
            let mut out = g.clone();
            for (v, d) in out.as_mut_slice().iter_mut().zip(diag) {
                *v = omega * *v / d;
            }
            out
        };
        match spec.steps {
            FusedSteps::One => Ok(one_step(f)),
            FusedSteps::Two if op.kernel.is_some() => {
                conv2d(f, &two_step_jacobi_kernel(omega), 1, Padding::Zero)
            }
            FusedSteps::Two => {
                let s0 = one_step(f);
                let r = f.sub(&op.apply(&s0)?)?;
                s0.add(&one_step(&r))
            }
        }
    }

    /// `P u` from level `level + 1` to `level`.
    pub fn prolongate(&self, coarse: &Tensor<T>) -> Tensor<T> {
        prolongate(coarse, self.mode)
    }

    /// `R r` from level `level` to `level + 1`.
    pub fn restrict(&self, fine: &Tensor<T>) -> Result<Tensor<T>> {
        restrict_kr(fine, self.mode)
    }

    fn check_schedule(&self, f: &Tensor<T>, nu: &[usize]) -> Result<()> {
        contract(nu.len() == self.levels(), || {
            format!("{} smoothing counts for {} levels", nu.len(), self.levels())
        })?;
        contract(self.grids.is_odd_chain(), || "grids do not form an odd chain".into())?;
        self.operators[0].check(f)
    }

    /// Fine-to-coarse sweep: `nu_l` smoothing steps on each level from a zero
    /// guess, then the restricted residual becomes the next right-hand side.
    pub fn mg0(&self, f: &Tensor<T>, nu: &[usize], smoother: SmootherSpec) -> Result<Mg0Trace<T>> {
        self.check_schedule(f, nu)?;
        smoother.validate()?;
        let levels = self.levels();
        let mut trace = Mg0Trace {
            f: Vec::with_capacity(levels),
            u: Vec::with_capacity(levels),
        };
        let mut rhs = f.clone();
        for (l, &steps) in nu.iter().enumerate() {
            let level = l + 1;
            let (h, w) = self.grids.size(level);
            let mut iterates = vec![Tensor::zeros(h, w, 1)];
            for _ in 0..steps {
                let u = iterates.last().unwrap();
                let r = rhs.sub(&self.apply_poisson(u, level)?)?;
                let next = u.add(&self.jacobi_smooth(&r, smoother, level)?)?;
                iterates.push(next);
            }
            let next_rhs = if level < levels {
                let u = iterates.last().unwrap();
                Some(self.restrict(&rhs.sub(&self.apply_poisson(u, level)?)?)?)
            } else {
                None
            };
            trace.f.push(rhs);
            trace.u.push(iterates);
            match next_rhs {
                Some(r) => rhs = r,
                None => break,
            }
        }
        Ok(trace)
    }

    /// One `\`-cycle: the fine-to-coarse sweep followed by coarse-to-fine
    /// corrections `u^l <- u^l + P u^(l+1)`. Returns the corrected level-1
    /// iterate.
    pub fn backslash_mg(&self, f: &Tensor<T>, nu: &[usize], smoother: SmootherSpec) -> Result<Tensor<T>> {
        let trace = self.mg0(f, nu, smoother)?;
        let mut finals: Vec<Tensor<T>> = trace.finals().into_iter().cloned().collect();
        for l in (0..finals.len() - 1).rev() {
            let correction = self.prolongate(&finals[l + 1]);
            finals[l] = finals[l].add(&correction)?;
        }
        Ok(finals.swap_remove(0))
    }

    /// Iterates `u <- u + \-MG(f - A u)` from `u = 0` for `cycles` cycles,
    /// stopping early once the residual drops below `rtol * ||f||`.
    pub fn solve(
        &self,
        f: &Tensor<T>,
        nu: &[usize],
        smoother: SmootherSpec,
        cycles: usize,
        rtol: f64,
    ) -> Result<(Tensor<T>, SolveReport)> {
        self.check_schedule(f, nu)?;
        let (h, w) = self.grids.size(1);
        let mut u = Tensor::zeros(h, w, 1);
        let f_norm = f.norm().to_f64_lossy();
        let mut history = vec![f_norm];
        let mut run = 0;
        for _ in 0..cycles {
            if history.last().copied().unwrap_or(0.0) <= rtol * f_norm {
                break;
            }
            let r = f.sub(&self.apply_poisson(&u, 1)?)?;
            u = u.add(&self.backslash_mg(&r, nu, smoother)?)?;
            let res = f.sub(&self.apply_poisson(&u, 1)?)?;
            history.push(res.norm().to_f64_lossy());
            run += 1;
        }
        Ok((
            u,
            SolveReport {
                residual_history: history,
                cycles_run: run,
            },
        ))
    }
}

/// Direct solve of `A u = f` through the assembled matrix (LU), used as the
/// reference solution.
pub fn direct_solve<T: Scalar>(op: &StencilOperator<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
    op.check(f)?;
    let a = op.to_dense();
    let b = DVector::from_iterator(f.len(), f.as_slice().iter().map(|v| v.to_f64_lossy()));
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Contract("operator is singular".into()))?;
    let (h, w) = op.size();
    Tensor::new(h, w, 1, x.iter().map(|&v| T::lit(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn laplacian_on_constants_and_deltas() {
        let op = StencilOperator::<f64>::laplacian(5, 5);
        let y = op.apply(&Tensor::filled(5, 5, 1, 1.0)).unwrap();
        assert_eq!(y.get(2, 2, 0), 0.0);
        assert_eq!(y.get(0, 2, 0), 1.0);
        assert_eq!(y.get(2, 4, 0), 1.0);
        assert_eq!(y.get(4, 4, 0), 2.0);
        let mut d = Tensor::zeros(5, 5, 1);
        d.set(2, 2, 0, 1.0);
        let y = op.apply(&d).unwrap();
        let expect = Tensor::from_rows(&[
            vec![0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, -1.0, 0.0, 0.0],
            vec![0.0, -1.0, 4.0, -1.0, 0.0],
            vec![0.0, 0.0, -1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(y, expect);
    }

    #[test]
    fn size_mismatch_is_a_contract_error() {
        let h = PoissonHierarchy::<f64>::new(9, 2, ProlongationMode::Bilinear).unwrap();
        assert!(h.apply_poisson(&Tensor::zeros(5, 5, 1), 1).is_err());
        assert!(h.apply_poisson(&Tensor::zeros(5, 5, 1), 2).is_ok());
        assert!(h.apply_poisson(&Tensor::zeros(5, 5, 1), 3).is_err());
    }

    #[test]
    fn two_step_kernel_at_unit_damping() {
        let k = two_step_jacobi_kernel(1.0f64);
        assert_eq!(
            k.window(0, 0),
            vec![
                vec![0.0, 1.0 / 16.0, 0.0],
                vec![1.0 / 16.0, 0.25, 1.0 / 16.0],
                vec![0.0, 1.0 / 16.0, 0.0]
            ]
        );
    }

    #[test]
    fn one_step_is_scaling() {
        let h = PoissonHierarchy::<f64>::new(9, 1, ProlongationMode::Bilinear).unwrap();
        let mut rng = seeded(2);
        let f = Tensor::random_normal(9, 9, 1, 1.0, &mut rng);
        let s = h.jacobi_smooth(&f, SmootherSpec::one(1.0), 1).unwrap();
        assert_eq!(s, f.scale(0.25));
        assert!(h.jacobi_smooth(&f, SmootherSpec::one(2.0), 1).is_err());
        assert!(h.jacobi_smooth(&f, SmootherSpec::one(0.0), 1).is_err());
    }

    #[test]
    fn coarsest_level_cannot_be_coarsened() {
        let op = StencilOperator::<f64>::laplacian(3, 3);
        assert!(galerkin_coarsen(&op, ProlongationMode::Bilinear).is_err());
    }

    #[test]
    fn zero_rhs_gives_zero_everywhere() {
        let h = PoissonHierarchy::<f64>::new(17, 3, ProlongationMode::Bilinear).unwrap();
        let f = Tensor::zeros(17, 17, 1);
        let t = h.mg0(&f, &[2, 2, 2], SmootherSpec::default()).unwrap();
        assert!(t.u.iter().flatten().all(|u| u.max_abs() == 0.0));
        let u = h.backslash_mg(&f, &[2, 2, 2], SmootherSpec::default()).unwrap();
        assert_eq!(u.max_abs(), 0.0);
    }

    #[test]
    fn first_iterate_is_scaled_rhs() {
        let h = PoissonHierarchy::<f64>::new(9, 2, ProlongationMode::Bilinear).unwrap();
        let mut rng = seeded(8);
        let f = Tensor::random_normal(9, 9, 1, 1.0, &mut rng);
        let t = h.mg0(&f, &[1, 1], SmootherSpec::one(0.8)).unwrap();
        assert_eq!(t.u[0][1], f.scale(0.8 / 4.0));
    }
}
