//! Backward passes through the mean-field fixed point.
//!
//! The forward map for a batch of `B` ground sets of equal size `n` is
//! `Ψ ↦ σ(a)`, `a = scale(G(Ψ))`, where row `b` of `G` is the gradient
//! estimate of sample `b`. Scaling by a batch norm couples the rows, so the
//! batch is treated as one `B·n` system. With `Σ' = diag σ'(a)`, `P` the
//! Jacobian of the scaling and `H` the block-diagonal Hessian,
//!
//! * implicit: `A = I − Σ'·P·H`, solve `Aᵀu = v`, then
//!   `∇_θL = ∇_θ Σ_bj w_bj ĝ_bj` with `w = Pᵀ(Σ'u)`;
//! * unrolled: the same chain rule applied layer by layer over `K` recorded
//!   iterations.

mod linsolve;

pub use linsolve::{
    linear_solve, pseudo_inverse_solve, solve_with_fallback, DenseOperator, LinearOperator,
    LinearSolveConfig, LinearSolveMethod, LinearSolveOutcome, SolvedBy, Transposed,
};

use rayon::prelude::*;

use crate::diffcore::{ParamVector, Tensor};
use crate::error::{Error, Result};
use crate::fixedpoint::{sigmoid, sigmoid_prime, solve_fixed_point, SolveReport, SolverConfig};
use crate::multilinear::{
    scale_gradient, GradTape, GradientEstimator, MeanFieldState, ScaleInfo, ScaledBatch,
    ScalingConfig,
};

/// A batch of ground sets whose fixed points are solved jointly.
pub struct BatchProblem<'a> {
    estimators: Vec<Box<dyn GradientEstimator + 'a>>,
    scaling: ScalingConfig,
    n: usize,
}

impl<'a> BatchProblem<'a> {
    pub fn new(estimators: Vec<Box<dyn GradientEstimator + 'a>>, scaling: ScalingConfig) -> Result<Self> {
        scaling.validate()?;
        let n = estimators
            .first()
            .ok_or_else(|| Error::invalid("a batch needs at least one sample"))?
            .ground_size();
        if estimators.iter().any(|e| e.ground_size() != n) {
            return Err(Error::shape("all ground sets in a batch must have the same size"));
        }
        Ok(Self {
            estimators,
            scaling,
            n,
        })
    }

    pub fn single(estimator: impl GradientEstimator + 'a, scaling: ScalingConfig) -> Result<Self> {
        Self::new(vec![Box::new(estimator)], scaling)
    }

    pub fn len(&self) -> usize {
        self.estimators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimators.is_empty()
    }

    pub fn ground_size(&self) -> usize {
        self.n
    }

    pub fn scaling(&self) -> &ScalingConfig {
        &self.scaling
    }

    pub fn estimators(&self) -> &[Box<dyn GradientEstimator + 'a>] {
        &self.estimators
    }

    fn check(&self, psi: &[f64]) -> Result<()> {
        if psi.len() != self.len() * self.n {
            return Err(Error::shape(format!(
                "batch state has {} entries, expected {} × {}",
                psi.len(),
                self.len(),
                self.n
            )));
        }
        Ok(())
    }

    /// Row-stacked gradient estimates `G(Ψ)`.
    pub fn grads(&self, psi: &[f64]) -> Result<Tensor> {
        self.check(psi)?;
        let rows: Vec<Vec<f64>> = self
            .estimators
            .par_iter()
            .zip(psi.par_chunks(self.n))
            .map(|(e, p)| e.grad(p))
            .collect::<Result<_>>()?;
        Tensor::new(vec![self.len(), self.n], rows.concat())
    }

    pub fn scaled(&self, psi: &[f64]) -> Result<ScaledBatch> {
        scale_gradient(&self.grads(psi)?, &self.scaling, self.n)
    }

    /// Solves the joint fixed point from `psi0` (flattened, `0.5` if absent).
    pub fn solve(&self, psi0: Option<&[f64]>, cfg: &SolverConfig) -> Result<SolveReport> {
        let start = match psi0 {
            Some(p) => {
                self.check(p)?;
                MeanFieldState::new(p.to_vec())?
            }
            None => MeanFieldState::uniform(self.len() * self.n),
        };
        solve_fixed_point(|p| Ok(self.scaled(p)?.scaled.into_data()), &start, cfg)
    }

    fn hessians(&self, psi: &[f64]) -> Result<Vec<Tensor>> {
        self.estimators
            .par_iter()
            .zip(psi.par_chunks(self.n))
            .map(|(e, p)| e.hessian(p))
            .collect()
    }

    fn tapes(&self, psi: &[f64]) -> Result<Vec<GradTape<'_>>> {
        self.estimators
            .par_iter()
            .zip(psi.par_chunks(self.n))
            .map(|(e, p)| e.grad_tape(p))
            .collect()
    }

    fn estimator_bytes(&self) -> usize {
        self.estimators.iter().map(|e| e.retained_bytes()).sum()
    }
}

/// Sums per-sample parameter gradients in sample order.
fn sum_params(parts: Vec<ParamVector>) -> Result<ParamVector> {
    let mut it = parts.into_iter();
    let mut total = it.next().ok_or_else(|| Error::invalid("empty batch"))?;
    for p in it {
        total.axpy(1.0, &p)?;
    }
    Ok(total)
}

fn block_hessian_apply(hessians: &[Tensor], n: usize, x: &[f64]) -> Vec<f64> {
    hessians
        .iter()
        .zip(x.chunks(n))
        .flat_map(|(h, xb)| h.matvec(xb).expect("block size fixed at assembly"))
        .collect()
}

/// Tracks bytes held by retained intermediate buffers and their peak.
#[derive(Debug, Default, Clone)]
pub struct RetentionMeter {
    current: usize,
    peak: usize,
    cap: Option<usize>,
}

impl RetentionMeter {
    pub fn with_cap(cap: Option<usize>) -> Self {
        Self {
            cap,
            ..Default::default()
        }
    }

    pub fn retain(&mut self, bytes: usize) -> Result<()> {
        self.current += bytes;
        self.peak = self.peak.max(self.current);
        match self.cap {
            Some(cap) if self.current > cap => Err(Error::RetentionBudget {
                retained: self.current,
                cap,
            }),
            _ => Ok(()),
        }
    }

    pub fn release(&mut self, bytes: usize) {
        self.current = self.current.saturating_sub(bytes);
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

/// Quantities of the implicit backward pass, assembled at a converged state.
#[derive(Debug, Clone)]
pub struct ImplicitWorkspace {
    psi: Vec<f64>,
    grad: Tensor,
    scaled: Tensor,
    sigma_prime: Vec<f64>,
    hessians: Vec<Tensor>,
    info: ScaleInfo,
    n: usize,
    /// Adjoint `u` from the most recent solve.
    pub adjoint: Option<Vec<f64>>,
    /// Cotangent `v` of the most recent solve.
    pub cotangent: Option<Vec<f64>>,
}

impl ImplicitWorkspace {
    pub fn assemble(problem: &BatchProblem<'_>, psi_star: &[f64]) -> Result<Self> {
        let grad = problem.grads(psi_star)?;
        let scaled = scale_gradient(&grad, &problem.scaling, problem.n)?;
        let hessians = problem.hessians(psi_star)?;
        Ok(Self::from_parts(psi_star.to_vec(), grad, scaled, hessians, problem.n))
    }

    /// Builds a workspace from an explicit gradient batch and Hessian blocks.
    pub fn from_gradients(
        psi: Vec<f64>,
        grad: Tensor,
        hessians: Vec<Tensor>,
        scaling: &ScalingConfig,
    ) -> Result<Self> {
        let n = grad.cols();
        if psi.len() != grad.len() || hessians.len() != grad.rows() {
            return Err(Error::shape("workspace parts disagree on batch layout"));
        }
        if hessians.iter().any(|h| h.shape() != [n, n]) {
            return Err(Error::shape("Hessian blocks must be n × n"));
        }
        let scaled = scale_gradient(&grad, scaling, n)?;
        Ok(Self::from_parts(psi, grad, scaled, hessians, n))
    }

    fn from_parts(
        psi: Vec<f64>,
        grad: Tensor,
        scaled: ScaledBatch,
        hessians: Vec<Tensor>,
        n: usize,
    ) -> Self {
        let sigma_prime = scaled.scaled.data().iter().map(|&a| sigmoid_prime(a)).collect();
        Self {
            psi,
            grad,
            scaled: scaled.scaled,
            sigma_prime,
            hessians,
            info: scaled.info,
            n,
            adjoint: None,
            cotangent: None,
        }
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    /// The gradient batch `G` the workspace was assembled from.
    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    /// The sigmoid argument `a` at the fixed point.
    pub fn scaled(&self) -> &Tensor {
        &self.scaled
    }

    pub fn sigma_prime(&self) -> &[f64] {
        &self.sigma_prime
    }

    pub fn hessians(&self) -> &[Tensor] {
        &self.hessians
    }

    pub fn scale_info(&self) -> &ScaleInfo {
        &self.info
    }

    /// `x − Σ'·P·(H x)`.
    pub fn a_matvec(&self, x: &[f64]) -> Vec<f64> {
        let px = self.info.jvp(&block_hessian_apply(&self.hessians, self.n, x));
        x.iter()
            .zip(px)
            .zip(&self.sigma_prime)
            .map(|((xi, pi), s)| xi - s * pi)
            .collect()
    }

    /// `u − H·Pᵀ·(Σ' u)`, using the symmetry of each Hessian block.
    pub fn at_matvec(&self, u: &[f64]) -> Vec<f64> {
        let su: Vec<f64> = u.iter().zip(&self.sigma_prime).map(|(a, b)| a * b).collect();
        let hp = block_hessian_apply(&self.hessians, self.n, &self.info.vjp(&su));
        u.iter().zip(hp).map(|(a, b)| a - b).collect()
    }

    /// Negates `σ'`, a deliberate fault used to show that the verification
    /// suite catches sign errors.
    #[doc(hidden)]
    pub fn inject_sigma_prime_sign_fault(&mut self) {
        for s in &mut self.sigma_prime {
            *s = -*s;
        }
    }

    pub fn retained_bytes(&self) -> usize {
        let v = |len: usize| len * std::mem::size_of::<f64>();
        v(self.psi.len())
            + v(self.grad.len())
            + v(self.scaled.len())
            + v(self.sigma_prime.len())
            + self.hessians.iter().map(|h| v(h.len())).sum::<usize>()
            + self.info.bytes()
    }
}

impl LinearOperator for ImplicitWorkspace {
    fn dim(&self) -> usize {
        self.psi.len()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.a_matvec(x)
    }

    fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        self.at_matvec(y)
    }
}

#[derive(Debug, Clone)]
pub struct VjpOutcome {
    pub grad: ParamVector,
    /// Peak bytes of retained intermediates during the call.
    pub retained_bytes: usize,
    /// Adjoint solve diagnostics (implicit mode only).
    pub solve: Option<LinearSolveOutcome>,
}

/// `∇_θ⟨v, Ψ*(θ)⟩` by implicit differentiation at an assembled workspace.
pub fn implicit_vjp(
    v: &[f64],
    workspace: &mut ImplicitWorkspace,
    problem: &BatchProblem<'_>,
    solve_cfg: &LinearSolveConfig,
) -> Result<VjpOutcome> {
    problem.check(v)?;
    let mut meter = RetentionMeter::default();
    meter.retain(problem.estimator_bytes() + workspace.retained_bytes())?;
    let solve = solve_with_fallback(&Transposed(&*workspace), v, solve_cfg)?;
    let su: Vec<f64> = solve
        .x
        .iter()
        .zip(&workspace.sigma_prime)
        .map(|(u, s)| u * s)
        .collect();
    let w = workspace.info.vjp(&su);
    workspace.adjoint = Some(solve.x.clone());
    workspace.cotangent = Some(v.to_vec());
    let n = problem.n;
    let parts: Vec<(ParamVector, usize)> = problem
        .estimators
        .par_iter()
        .zip(workspace.psi.par_chunks(n))
        .zip(w.par_chunks(n))
        .map(|((e, p), wb)| {
            let tape = e.grad_tape(p)?;
            Ok((tape.param_vjp(wb)?, tape.retained_bytes()))
        })
        .collect::<Result<_>>()?;
    meter.retain(parts.iter().map(|p| p.1).sum())?;
    Ok(VjpOutcome {
        grad: sum_params(parts.into_iter().map(|p| p.0).collect())?,
        retained_bytes: meter.peak(),
        solve: Some(solve),
    })
}

struct Layer<'p> {
    psi_prev: Vec<f64>,
    scaled: Tensor,
    info: ScaleInfo,
    tapes: Vec<GradTape<'p>>,
}

impl Layer<'_> {
    fn bytes(&self) -> usize {
        (self.psi_prev.len() + self.scaled.len()) * std::mem::size_of::<f64>()
            + self.info.bytes()
            + self.tapes.iter().map(|t| t.retained_bytes()).sum::<usize>()
    }
}

#[derive(Debug, Clone)]
pub struct UnrolledOutcome {
    pub vjp: VjpOutcome,
    /// State after the last recorded iteration.
    pub psi: Vec<f64>,
}

/// Runs exactly `k` plain iterations from `psi0` while recording every
/// layer, then backpropagates `v` through all of them.
pub fn unrolled_vjp(
    v: &[f64],
    problem: &BatchProblem<'_>,
    psi0: &[f64],
    k: usize,
    retention_cap: Option<usize>,
) -> Result<UnrolledOutcome> {
    problem.check(v)?;
    unrolled_with(problem, psi0, k, retention_cap, |_| Ok(v.to_vec()))
}

/// Like [`unrolled_vjp`], with the cotangent computed from the final state.
pub fn unrolled_with(
    problem: &BatchProblem<'_>,
    psi0: &[f64],
    k: usize,
    retention_cap: Option<usize>,
    cotangent: impl FnOnce(&[f64]) -> Result<Vec<f64>>,
) -> Result<UnrolledOutcome> {
    if k == 0 {
        return Err(Error::invalid("unrolling needs at least one layer"));
    }
    problem.check(psi0)?;
    let n = problem.n;
    let mut meter = RetentionMeter::with_cap(retention_cap);
    meter.retain(problem.estimator_bytes())?;
    let mut layers = Vec::with_capacity(k);
    let mut psi = psi0.to_vec();
    for _ in 0..k {
        let tapes = problem.tapes(&psi)?;
        let grad = Tensor::new(
            vec![problem.len(), n],
            tapes.iter().flat_map(|t| t.grad().iter().copied()).collect(),
        )?;
        let scaled = scale_gradient(&grad, &problem.scaling, n)?;
        let next = scaled.scaled.data().iter().map(|&a| sigmoid(a)).collect();
        let layer = Layer {
            psi_prev: std::mem::replace(&mut psi, next),
            scaled: scaled.scaled,
            info: scaled.info,
            tapes,
        };
        meter.retain(layer.bytes())?;
        layers.push(layer);
    }

    let mut lambda = cotangent(&psi)?;
    problem.check(&lambda)?;
    let mut total: Option<ParamVector> = None;
    for (idx, layer) in layers.iter().enumerate().rev() {
        let c: Vec<f64> = lambda
            .iter()
            .zip(layer.scaled.data())
            .map(|(l, &a)| l * sigmoid_prime(a))
            .collect();
        let cg = layer.info.vjp(&c);
        let parts: Vec<ParamVector> = layer
            .tapes
            .par_iter()
            .zip(cg.par_chunks(n))
            .map(|(t, w)| t.param_vjp(w))
            .collect::<Result<_>>()?;
        let step = sum_params(parts)?;
        match &mut total {
            None => total = Some(step),
            Some(t) => t.axpy(1.0, &step)?,
        }
        if idx > 0 {
            let h = problem.hessians(&layer.psi_prev)?;
            lambda = block_hessian_apply(&h, n, &cg);
        }
    }
    Ok(UnrolledOutcome {
        vjp: VjpOutcome {
            grad: total.expect("at least one layer"),
            retained_bytes: meter.peak(),
            solve: None,
        },
        psi,
    })
}
