//! Fixed-point solvers for `ψ = σ(∇_ψF̃(ψ))` and contraction diagnostics.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{dot, Tensor};
use crate::error::{Error, Result};
use crate::multilinear::{
    exact_grad, exact_hessian, pinned_pair_hessian, scale_gradient, value_table, EstimatorConfig,
    FrozenSamples, MeanFieldState, ScalingConfig, ScalingMode, ENUMERATION_LIMIT,
};
use crate::setfn::SetFunction;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ'(x) = σ(x)(1 − σ(x))`.
pub fn sigmoid_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    Fpi,
    Anderson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Weight `λ` kept on the previous iterate.
    pub damping: f64,
    pub anderson_memory: usize,
    /// Tikhonov term on the mixing Gram matrix, relative to its largest
    /// diagonal entry.
    pub anderson_regularization: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Fpi,
            tolerance: 1e-6,
            max_iterations: 100,
            damping: 0.0,
            anderson_memory: 5,
            anderson_regularization: 1e-8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("solver tolerance must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("solver needs at least one iteration"));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::invalid("damping must lie in [0, 1)"));
        }
        if self.method == SolverMethod::Anderson && self.anderson_memory == 0 {
            return Err(Error::invalid("anderson memory must be at least 1"));
        }
        if !(self.anderson_regularization >= 0.0) {
            return Err(Error::invalid("anderson regularization must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub psi: MeanFieldState,
    pub iterations: usize,
    /// `‖ψ − σ(grad_fn(ψ))‖_∞` at the returned state.
    pub residual: f64,
    pub converged: bool,
}

fn apply_map<F>(grad_fn: &mut F, psi: &[f64], iteration: usize) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let g = grad_fn(psi)?;
    if g.len() != psi.len() {
        return Err(Error::shape(format!(
            "gradient map returned {} entries for a state of {}",
            g.len(),
            psi.len()
        )));
    }
    if let Some(j) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {j} at fixed-point iteration {iteration}"
        )));
    }
    Ok(g.into_iter().map(sigmoid).collect())
}

/// `‖ψ − σ(grad_fn(ψ))‖_∞`.
pub fn residual<F>(psi: &[f64], mut grad_fn: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let t = apply_map(&mut grad_fn, psi, 0)?;
    Ok(max_gap(psi, &t))
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Iterates `ψ ← (1−λ)·σ(grad_fn(ψ)) + λ·ψ` (or its Anderson-mixed variant)
/// until the residual drops to the tolerance or the iteration cap is hit.
///
/// `grad_fn` returns the argument of the sigmoid, so any gradient scaling
/// belongs inside it.
pub fn solve_fixed_point<F>(
    mut grad_fn: F,
    psi0: &MeanFieldState,
    cfg: &SolverConfig,
) -> Result<SolveReport>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let lambda = cfg.damping;
    let mut psi = psi0.as_slice().to_vec();
    let mut history: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::new();
    let mut k = 0;
    loop {
        let t = apply_map(&mut grad_fn, &psi, k)?;
        let r = max_gap(&psi, &t);
        if r <= cfg.tolerance || k == cfg.max_iterations {
            return Ok(SolveReport {
                psi: MeanFieldState::new(psi)?,
                iterations: k,
                residual: r,
                converged: r <= cfg.tolerance,
            });
        }
        let plain: Vec<f64> = t
            .iter()
            .zip(&psi)
            .map(|(ti, pi)| (1.0 - lambda) * ti + lambda * pi)
            .collect();
        psi = match cfg.method {
            SolverMethod::Fpi => plain,
            SolverMethod::Anderson => {
                history.push_back((psi, t));
                if history.len() > cfg.anderson_memory {
                    history.pop_front();
                }
                anderson_mix(&history, lambda, cfg.anderson_regularization).unwrap_or(plain)
            }
        };
        k += 1;
    }
}

/// Mixing weights `α` minimizing `‖Σ α_i f_i‖` with `Σ α_i = 1`, applied to
/// the damped map outputs and clipped back into the unit cube.
fn anderson_mix(history: &VecDeque<(Vec<f64>, Vec<f64>)>, lambda: f64, reg: f64) -> Option<Vec<f64>> {
    let h = history.len();
    if h < 2 {
        return None;
    }
    let f: Vec<Vec<f64>> = history
        .iter()
        .map(|(x, t)| t.iter().zip(x).map(|(a, b)| a - b).collect())
        .collect();
    let mut gram = DMatrix::<f64>::zeros(h, h);
    for i in 0..h {
        for j in 0..=i {
            let v = dot(&f[i], &f[j]);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let scale = (0..h).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    for i in 0..h {
        gram[(i, i)] += reg * scale + f64::MIN_POSITIVE;
    }
    let y = gram.lu().solve(&DVector::from_element(h, 1.0))?;
    let total: f64 = y.sum();
    if !total.is_finite() || total.abs() < 1e-300 {
        return None;
    }
    let n = history[0].0.len();
    let mut out = vec![0.0; n];
    for (a, (x, t)) in y.iter().map(|v| v / total).zip(history) {
        for i in 0..n {
            out[i] += a * ((1.0 - lambda) * t[i] + lambda * x[i]);
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Upper bound on iterations needed to reach tolerance `eps` when the map
/// contracts with factor `q`: `ln(ε(1−q)/√|V|) / ln q`.
pub fn iteration_bound(q: f64, eps: f64, ground_set_size: usize) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("contraction factor {q} is not in (0, 1)")));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    Ok((eps * (1.0 - q) / (ground_set_size as f64).sqrt()).ln() / q.ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    /// Largest `|F(S)|` over the vertices examined.
    pub sup_abs: f64,
    /// `|V|·sup|F̃|`, times the constant scale factor in constant mode.
    pub bound: f64,
    /// Largest Frobenius norm of the scaled map's Jacobian over the probes.
    pub q_hat: f64,
    /// Whether every vertex was enumerated (otherwise `sup_abs` is sampled).
    pub exact: bool,
    pub satisfied: bool,
}

const SAMPLED_VERTICES: u64 = 4096;

/// Checks the sufficient condition `|V|·sup|F̃| < 1` for a unique fixed point
/// and estimates the contraction factor at the given probe states.
///
/// The supremum of a multilinear function over the cube is attained at a
/// vertex, so for ground sets up to the enumeration limit the value is exact.
/// Frobenius and nuclear modes rescale by a state-dependent factor; their
/// bound is reported for the unscaled function and `q_hat` carries the
/// empirical behavior of the scaled map.
pub fn contraction_check(
    f: &dyn SetFunction,
    psi_samples: &[MeanFieldState],
    scaling: &ScalingConfig,
) -> Result<ContractionReport> {
    scaling.validate()?;
    let n = f.ground_size();
    let exact = n <= ENUMERATION_LIMIT;
    let sup_abs = if exact {
        value_table(f)?.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut vals = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..SAMPLED_VERTICES {
            masks.extend((0..n).map(|_| rng.random_range(0..2) as f64));
        }
        vals.extend(f.eval_masks(&Tensor::new(vec![SAMPLED_VERTICES as usize, n], masks)?)?);
        vals.extend(f.eval_masks(&Tensor::new(vec![2, n], [vec![0.0; n], vec![1.0; n]].concat())?)?);
        vals.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
    };
    let factor = match scaling.mode {
        ScalingMode::Constant => 2.0 / (n as f64 * scaling.constant),
        _ => 1.0,
    };
    let bound = n as f64 * sup_abs * factor;

    let samples = if exact {
        None
    } else {
        let cfg = EstimatorConfig {
            samples: 16,
            seed: 0,
            antithetic: true,
        };
        Some(FrozenSamples::draw(n, &cfg, 0)?)
    };
    let mut q_hat: f64 = 0.0;
    for psi in psi_samples {
        let (g, h) = match &samples {
            None => (exact_grad(f, psi)?, exact_hessian(f, psi)?),
            Some(s) => {
                let h = pinned_pair_hessian(f, s, psi.as_slice())?;
                (sampled_grad(f, s, psi.as_slice())?, h)
            }
        };
        q_hat = q_hat.max(jacobian_norm(&g, &h, scaling)?);
    }
    Ok(ContractionReport {
        sup_abs,
        bound,
        q_hat,
        exact,
        satisfied: bound < 1.0,
    })
}

/// `ĝ_j = (1/m) Σ_ℓ [F(S_ℓ ∪ j) − F(S_ℓ ∖ j)]` for a generic set function.
fn sampled_grad(f: &dyn SetFunction, s: &FrozenSamples, psi: &[f64]) -> Result<Vec<f64>> {
    let n = psi.len();
    let m = s.count();
    let mut rows = Vec::with_capacity(2 * m * n * n);
    for l in 0..m {
        let base = s.base(l, psi);
        for j in 0..n {
            for v in [true, false] {
                rows.extend(
                    base.iter()
                        .enumerate()
                        .map(|(i, &b)| if i == j { v } else { b } as u8 as f64),
                );
            }
        }
    }
    let vals = f.eval_masks(&Tensor::new(vec![2 * m * n, n], rows)?)?;
    let mut g = vec![0.0; n];
    for (k, pair) in vals.chunks(2).enumerate() {
        g[k % n] += (pair[0] - pair[1]) / m as f64;
    }
    Ok(g)
}

/// `‖Σ'(a)·P·H‖_F` for a single-sample batch.
fn jacobian_norm(g: &[f64], h: &Tensor, scaling: &ScalingConfig) -> Result<f64> {
    let n = g.len();
    let batch = Tensor::new(vec![1, n], g.to_vec())?;
    let scaled = scale_gradient(&batch, scaling, n)?;
    let sp: Vec<f64> = scaled.scaled.data().iter().map(|&a| sigmoid_prime(a)).collect();
    let ht = h.transpose();
    let mut total = 0.0;
    for k in 0..n {
        let col = scaled.info.jvp(ht.row(k));
        total += col.iter().zip(&sp).map(|(c, s)| (c * s).powi(2)).sum::<f64>();
    }
    Ok(total.sqrt())
}
