//! Gradient and Hessian estimators of the multilinear extension that can also
//! be differentiated with respect to the network parameters.
//!
//! Every estimator expresses `∇_ψF̃(ψ)` as a sparse linear map from a list of
//! subset evaluations `F(T_r)` to the gradient. The same map, transposed, turns
//! a weight vector over coordinates into per-subset weights, which is how
//! `∇_θ Σ_j w_j ∂F̃/∂ψ_j` is obtained through one reverse sweep of the network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{ParamVector, Tensor};
use crate::error::{Error, Result};
use crate::setfn::{masks_from_bits, BoundModel, SetFunction, SetFunctionModel, SetTape};

use super::exact::{check_enumerable, subset_probs, table_grad, table_hessian, value_table};
use super::{EstimatorConfig, MeanFieldState};

/// Common random numbers for one ground set: an `m × |V|` block of uniforms.
///
/// Subset `ℓ` at state `ψ` is `{i : U_ℓi < ψ_i}` (inverse-CDF Bernoulli
/// sampling), so the same uniforms can be replayed at any `ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenSamples {
    uniforms: Tensor,
}

impl FrozenSamples {
    /// Draws uniforms from the ChaCha stream selected by `stream`, so draws
    /// for different (step, sample) pairs are independent and reproducible.
    pub fn draw(ground_size: usize, cfg: &EstimatorConfig, stream: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        let m = cfg.samples;
        let mut data = Vec::with_capacity(m * ground_size);
        for l in 0..m {
            if cfg.antithetic && l % 2 == 1 {
                let prev = (l - 1) * ground_size;
                for i in 0..ground_size {
                    let u: f64 = data[prev + i];
                    data.push(1.0 - u);
                }
            } else {
                for _ in 0..ground_size {
                    data.push(rng.random::<f64>());
                }
            }
        }
        Ok(Self {
            uniforms: Tensor::from_parts(vec![m, ground_size], data),
        })
    }

    pub fn from_uniforms(uniforms: Tensor) -> Result<Self> {
        if uniforms.shape().len() != 2 || uniforms.rows() == 0 {
            return Err(Error::shape("uniforms must be a non-empty m × |V| matrix"));
        }
        if uniforms.data().iter().any(|&u| !(0.0..=1.0).contains(&u)) {
            return Err(Error::invalid("uniforms must lie in [0, 1]"));
        }
        Ok(Self { uniforms })
    }

    pub fn count(&self) -> usize {
        self.uniforms.rows()
    }

    pub fn ground_size(&self) -> usize {
        self.uniforms.cols()
    }

    pub fn bytes(&self) -> usize {
        self.uniforms.len() * std::mem::size_of::<f64>()
    }

    /// Membership of base sample `l` at state `psi`.
    pub(crate) fn base(&self, l: usize, psi: &[f64]) -> Vec<bool> {
        self.uniforms
            .row(l)
            .iter()
            .zip(psi)
            .map(|(&u, &p)| u < p)
            .collect()
    }
}

/// Sparse linear map `g_j = Σ coef · F(row)` over the rows of `masks`.
#[derive(Debug, Clone)]
pub struct GradPlan {
    masks: Tensor,
    /// `(row, coordinate, coefficient)` triplets.
    terms: Vec<(u32, u32, f64)>,
    ground_size: usize,
}

impl GradPlan {
    pub fn masks(&self) -> &Tensor {
        &self.masks
    }

    pub fn rows(&self) -> usize {
        self.masks.rows()
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.ground_size];
        for &(r, j, c) in &self.terms {
            g[j as usize] += c * values[r as usize];
        }
        g
    }

    /// Per-row weights `Σ_j coef · w_j`, the adjoint of [`GradPlan::apply`].
    pub fn adjoint(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows()];
        for &(r, j, c) in &self.terms {
            out[r as usize] += c * weights[j as usize];
        }
        out
    }

    pub fn bytes(&self) -> usize {
        self.masks.len() * std::mem::size_of::<f64>()
            + self.terms.len() * std::mem::size_of::<(u32, u32, f64)>()
    }
}

/// A gradient estimate together with the retained network activations
/// needed to differentiate it with respect to θ.
#[derive(Debug)]
pub struct GradTape<'a> {
    grad: Vec<f64>,
    plan: GradPlan,
    tape: SetTape<'a>,
}

impl GradTape<'_> {
    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    /// `∇_θ Σ_j weights_j · ĝ_j` at the taped state.
    pub fn param_vjp(&self, weights: &[f64]) -> Result<ParamVector> {
        if weights.len() != self.grad.len() {
            return Err(Error::shape(format!(
                "{} weights for {} coordinates",
                weights.len(),
                self.grad.len()
            )));
        }
        self.tape.param_vjp(&self.plan.adjoint(weights))
    }

    pub fn retained_bytes(&self) -> usize {
        self.tape.retained_bytes() + self.plan.bytes() + self.grad.len() * 8
    }
}

/// Estimator of `∇_ψF̃`, `∇²_ψF̃` and of θ-derivatives of the former.
pub trait GradientEstimator: Sync {
    fn ground_size(&self) -> usize;

    fn model(&self) -> &SetFunctionModel;

    fn grad(&self, psi: &[f64]) -> Result<Vec<f64>>;

    fn hessian(&self, psi: &[f64]) -> Result<Tensor>;

    /// Gradient estimate at `psi` with activations kept for reverse sweeps.
    fn grad_tape(&self, psi: &[f64]) -> Result<GradTape<'_>>;

    /// `∇_θ Σ_j weights_j · ĝ_j(ψ, θ)` with `ψ` held fixed.
    fn grad_param_vjp(&self, psi: &[f64], weights: &[f64]) -> Result<ParamVector> {
        self.grad_tape(psi)?.param_vjp(weights)
    }

    /// Bytes of state the estimator itself keeps alive.
    fn retained_bytes(&self) -> usize;
}

fn check_psi(psi: &[f64], n: usize) -> Result<()> {
    if psi.len() != n {
        return Err(Error::shape(format!(
            "state has {} entries for a ground set of {n}",
            psi.len()
        )));
    }
    Ok(())
}

/// Exact estimator for small ground sets. The value table only depends on θ,
/// so it is computed once and reused at every ψ.
pub struct ExactEstimator<'a> {
    bound: BoundModel<'a>,
    table: Vec<f64>,
}

impl<'a> ExactEstimator<'a> {
    pub fn new(model: &'a SetFunctionModel, features: &'a Tensor) -> Result<Self> {
        let bound = BoundModel::new(model, features)?;
        check_enumerable(bound.ground_size())?;
        let table = value_table(&bound)?;
        Ok(Self { bound, table })
    }

    /// Plan over all subsets with coefficients `∂q(T; ψ)/∂ψ_j`.
    pub fn plan(&self, psi: &[f64]) -> GradPlan {
        let n = self.ground_size();
        let mut terms = Vec::with_capacity(n << n);
        for j in 0..n {
            let bit = 1usize << j;
            let mut hi = psi.to_vec();
            hi[j] = 1.0;
            let mut lo = psi.to_vec();
            lo[j] = 0.0;
            let (p_hi, p_lo) = (subset_probs(&hi), subset_probs(&lo));
            for t in 0..(1usize << n) {
                let c = if t & bit != 0 { p_hi[t] } else { -p_lo[t] };
                if c != 0.0 {
                    terms.push((t as u32, j as u32, c));
                }
            }
        }
        GradPlan {
            masks: masks_from_bits(n, 0..(1u64 << n)),
            terms,
            ground_size: n,
        }
    }
}

impl GradientEstimator for ExactEstimator<'_> {
    fn ground_size(&self) -> usize {
        self.bound.ground_size()
    }

    fn model(&self) -> &SetFunctionModel {
        self.bound.model
    }

    fn grad(&self, psi: &[f64]) -> Result<Vec<f64>> {
        check_psi(psi, self.ground_size())?;
        Ok(table_grad(&self.table, psi))
    }

    fn hessian(&self, psi: &[f64]) -> Result<Tensor> {
        check_psi(psi, self.ground_size())?;
        Ok(table_hessian(&self.table, psi))
    }

    fn grad_tape(&self, psi: &[f64]) -> Result<GradTape<'_>> {
        check_psi(psi, self.ground_size())?;
        let plan = self.plan(psi);
        let tape = self.bound.model.tape(self.bound.features, plan.masks())?;
        let grad = plan.apply(&tape.values());
        Ok(GradTape { grad, plan, tape })
    }

    fn retained_bytes(&self) -> usize {
        self.table.len() * 8
    }
}

/// Monte Carlo estimator on frozen common random numbers.
///
/// Coordinate `j` uses every base sample with `j` pinned out and then added
/// back in: `ĝ_j = (1/m) Σ_ℓ [F(S_ℓ ∪ {j}) − F(S_ℓ ∖ {j})]`.
pub struct SampledEstimator<'a> {
    bound: BoundModel<'a>,
    samples: FrozenSamples,
}

impl<'a> SampledEstimator<'a> {
    pub fn new(
        model: &'a SetFunctionModel,
        features: &'a Tensor,
        samples: FrozenSamples,
    ) -> Result<Self> {
        let bound = BoundModel::new(model, features)?;
        if samples.ground_size() != bound.ground_size() {
            return Err(Error::shape(format!(
                "samples cover {} items, ground set has {}",
                samples.ground_size(),
                bound.ground_size()
            )));
        }
        Ok(Self { bound, samples })
    }

    pub fn samples(&self) -> &FrozenSamples {
        &self.samples
    }

    /// Rows per base sample: the base subset then one single flip per item.
    pub fn plan(&self, psi: &[f64]) -> GradPlan {
        let n = self.ground_size();
        let m = self.samples.count();
        let inv_m = 1.0 / m as f64;
        let mut masks = Vec::with_capacity(m * (n + 1) * n);
        let mut terms = Vec::with_capacity(2 * m * n);
        for l in 0..m {
            let base = self.samples.base(l, psi);
            let base_row = (l * (n + 1)) as u32;
            masks.extend(base.iter().map(|&b| b as u8 as f64));
            for j in 0..n {
                let flip_row = base_row + 1 + j as u32;
                masks.extend(
                    base.iter()
                        .enumerate()
                        .map(|(i, &b)| if i == j { !b } else { b } as u8 as f64),
                );
                // j ∈ S: F(S) − F(S∖j);  j ∉ S: F(S∪j) − F(S)
                let sign = if base[j] { inv_m } else { -inv_m };
                terms.push((base_row, j as u32, sign));
                terms.push((flip_row, j as u32, -sign));
            }
        }
        GradPlan {
            masks: Tensor::from_parts(vec![m * (n + 1), n], masks),
            terms,
            ground_size: n,
        }
    }
}

impl GradientEstimator for SampledEstimator<'_> {
    fn ground_size(&self) -> usize {
        self.bound.ground_size()
    }

    fn model(&self) -> &SetFunctionModel {
        self.bound.model
    }

    fn grad(&self, psi: &[f64]) -> Result<Vec<f64>> {
        check_psi(psi, self.ground_size())?;
        let plan = self.plan(psi);
        Ok(plan.apply(&self.bound.eval_masks(plan.masks())?))
    }

    fn hessian(&self, psi: &[f64]) -> Result<Tensor> {
        pinned_pair_hessian(&self.bound, &self.samples, psi)
    }

    fn grad_tape(&self, psi: &[f64]) -> Result<GradTape<'_>> {
        check_psi(psi, self.ground_size())?;
        let plan = self.plan(psi);
        let tape = self.bound.model.tape(self.bound.features, plan.masks())?;
        let grad = plan.apply(&tape.values());
        Ok(GradTape { grad, plan, tape })
    }

    fn retained_bytes(&self) -> usize {
        self.samples.bytes()
    }
}

/// Pairs `(i, j)` reuse the same base samples with both items pinned;
/// each entry is the four-term difference, so the result is symmetric
/// with an exactly zero diagonal.
pub fn pinned_pair_hessian(
    f: &dyn SetFunction,
    samples: &FrozenSamples,
    psi: &[f64],
) -> Result<Tensor> {
    let n = f.ground_size();
    if samples.ground_size() != n {
        return Err(Error::shape("samples do not match the ground set"));
    }
    check_psi(psi, n)?;
    let m = samples.count();
    let pairs = n * n.saturating_sub(1) / 2;
    let per_sample = 1 + n + pairs;
    let mut masks = Vec::with_capacity(m * per_sample * n);
    let mut bases = Vec::with_capacity(m);
    for l in 0..m {
        let base = samples.base(l, psi);
        push_flipped(&mut masks, &base, &[]);
        for i in 0..n {
            push_flipped(&mut masks, &base, &[i]);
        }
        for i in 0..n {
            for j in (i + 1)..n {
                push_flipped(&mut masks, &base, &[i, j]);
            }
        }
        bases.push(base);
    }
    let masks = Tensor::from_parts(vec![m * per_sample, n], masks);
    let values = f.eval_masks(&masks)?;
    let mut h = Tensor::zeros(&[n, n]);
    let inv_m = 1.0 / m as f64;
    for (l, base) in bases.iter().enumerate() {
        let off = l * per_sample;
        let f0 = values[off];
        let mut pair = off + 1 + n;
        for i in 0..n {
            for j in (i + 1)..n {
                let sign = if base[i] == base[j] { 1.0 } else { -1.0 };
                let d = f0 - values[off + 1 + i] - values[off + 1 + j] + values[pair];
                let v = h.get(i, j) + inv_m * sign * d;
                h.set(i, j, v);
                pair += 1;
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let v = h.get(i, j);
            h.set(j, i, v);
        }
    }
    Ok(h)
}

fn push_flipped(masks: &mut Vec<f64>, base: &[bool], flip: &[usize]) {
    masks.extend(
        base.iter()
            .enumerate()
            .map(|(k, &b)| if flip.contains(&k) { !b } else { b } as u8 as f64),
    );
}

/// One Monte Carlo estimate of `∇_ψF̃` with fresh samples from `cfg.seed`.
pub fn mc_grad(
    model: &SetFunctionModel,
    features: &Tensor,
    psi: &MeanFieldState,
    cfg: &EstimatorConfig,
) -> Result<Vec<f64>> {
    let samples = FrozenSamples::draw(features.rows(), cfg, 0)?;
    SampledEstimator::new(model, features, samples)?.grad(psi.as_slice())
}

/// One Monte Carlo estimate of `∇²_ψF̃` with fresh samples from `cfg.seed`.
pub fn mc_hessian(
    model: &SetFunctionModel,
    features: &Tensor,
    psi: &MeanFieldState,
    cfg: &EstimatorConfig,
) -> Result<Tensor> {
    let samples = FrozenSamples::draw(features.rows(), cfg, 0)?;
    SampledEstimator::new(model, features, samples)?.hessian(psi.as_slice())
}
