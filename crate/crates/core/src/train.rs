//! Training loop: per-batch fixed-point solve, mean-field loss, implicit or
//! unrolled parameter gradient, optimizer step.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SetSample};
use crate::diffcore::ParamVector;
use crate::error::{Error, Result};
use crate::fixedpoint::SolverConfig;
use crate::implicit::{
    implicit_vjp, unrolled_with, BatchProblem, ImplicitWorkspace, LinearSolveConfig,
};
use crate::multilinear::{
    exact_value, EstimatorConfig, ExactEstimator, FrozenSamples, GradientEstimator,
    MeanFieldState, SampledEstimator, ScalingConfig,
};
use crate::setfn::{Architecture, SetFunction, SetFunctionModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments and step count; empty until the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

pub fn optimizer_step(
    params: &ParamVector,
    grad: &ParamVector,
    state: &OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<(ParamVector, OptimizerState)> {
    if !params.same_layout(grad) {
        return Err(Error::shape("gradient layout does not match parameters"));
    }
    if !(cfg.learning_rate >= 0.0) {
        return Err(Error::invalid("learning rate must be nonnegative"));
    }
    let mut theta = params.flatten();
    let g = grad.flatten();
    let mut next = state.clone();
    next.step += 1;
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (t, gi) in theta.iter_mut().zip(&g) {
                *t -= cfg.learning_rate * gi;
            }
        }
        OptimizerKind::Adam => {
            if next.m.len() != g.len() {
                next.m = vec![0.0; g.len()];
                next.v = vec![0.0; g.len()];
            }
            let bc1 = 1.0 - cfg.beta1.powi(next.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(next.step as i32);
            for i in 0..g.len() {
                next.m[i] = cfg.beta1 * next.m[i] + (1.0 - cfg.beta1) * g[i];
                next.v[i] = cfg.beta2 * next.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = next.m[i] / bc1;
                let vh = next.v[i] / bc2;
                theta[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
            }
        }
    }
    Ok((params.unflatten(&theta)?, next))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    /// Solve to tolerance, differentiate the fixed-point equation.
    Implicit,
    /// Run exactly `unroll_steps` iterations and backpropagate through them.
    Unrolled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Number of hidden layers in the head (2 or 3).
    pub depth: usize,
    pub gradient: GradientMode,
    pub unroll_steps: usize,
    /// Enumerate all subsets instead of sampling (ground sets up to 20 items).
    pub exact_gradients: bool,
    /// Probability clamp `δ` inside the loss logarithms.
    pub clamp: f64,
    pub seed: u64,
    pub estimator: EstimatorConfig,
    pub solver: SolverConfig,
    pub scaling: ScalingConfig,
    pub linear_solve: LinearSolveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            batch_size: 128,
            epochs: 50,
            depth: 2,
            gradient: GradientMode::Implicit,
            unroll_steps: 20,
            exact_gradients: false,
            clamp: 1e-6,
            seed: 0,
            estimator: EstimatorConfig::default(),
            solver: SolverConfig::default(),
            scaling: ScalingConfig::default(),
            linear_solve: LinearSolveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epochs must be positive"));
        }
        if !(self.clamp > 0.0 && self.clamp < 0.1) {
            return Err(Error::invalid("clamp must lie in (0, 0.1)"));
        }
        if self.gradient == GradientMode::Unrolled && self.unroll_steps == 0 {
            return Err(Error::invalid("unrolled mode needs at least one step"));
        }
        self.estimator.validate()?;
        self.solver.validate()?;
        self.scaling.validate()?;
        self.linear_solve.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_residual: f64,
    pub mean_iterations: f64,
    pub wall_seconds: f64,
    /// Samples whose batch solve missed the tolerance.
    pub unconverged: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

fn clamp(p: f64, delta: f64) -> f64 {
    p.clamp(delta, 1.0 - delta)
}

fn check_mask(psi: &MeanFieldState, mask: &[bool]) -> Result<()> {
    if psi.len() != mask.len() {
        return Err(Error::shape(format!(
            "mask has {} entries for a state of {}",
            mask.len(),
            psi.len()
        )));
    }
    Ok(())
}

/// `−Σ_{j∈S*} ln ψ_j − Σ_{j∉S*} ln(1 − ψ_j)` with ψ clamped into `[δ, 1−δ]`.
pub fn mean_field_loss(psi: &MeanFieldState, optimal_mask: &[bool], delta: f64) -> Result<f64> {
    check_mask(psi, optimal_mask)?;
    Ok(psi
        .as_slice()
        .iter()
        .zip(optimal_mask)
        .map(|(&p, &inside)| {
            let p = clamp(p, delta);
            if inside {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum())
}

/// Gradient of [`mean_field_loss`] with respect to ψ, at the clamped point.
pub fn loss_cotangent(psi: &MeanFieldState, optimal_mask: &[bool], delta: f64) -> Result<Vec<f64>> {
    check_mask(psi, optimal_mask)?;
    Ok(psi
        .as_slice()
        .iter()
        .zip(optimal_mask)
        .map(|(&p, &inside)| {
            let p = clamp(p, delta);
            if inside {
                -1.0 / p
            } else {
                1.0 / (1.0 - p)
            }
        })
        .collect())
}

/// `F̃(ψ) + Σ_j H(ψ_j)` with the Bernoulli entropy `H`.
pub fn elbo_exact(f: &dyn SetFunction, psi: &MeanFieldState) -> Result<f64> {
    let xlx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    let entropy: f64 = psi.as_slice().iter().map(|&p| -xlx(p) - xlx(1.0 - p)).sum();
    Ok(exact_value(f, psi)? + entropy)
}

/// Result of one gradient evaluation on a batch.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Batch-mean loss at the solved state.
    pub loss: f64,
    /// Gradient of the batch-mean loss.
    pub grad: ParamVector,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub retained_bytes: usize,
}

/// Stream index of the frozen samples for `(step, position in batch)`.
fn sample_stream(step: u64, position: usize) -> u64 {
    (step << 24) | position as u64
}

fn build_problem<'a>(
    model: &'a SetFunctionModel,
    samples: &[&'a SetSample],
    cfg: &TrainConfig,
    step: u64,
) -> Result<BatchProblem<'a>> {
    let mut ests: Vec<Box<dyn GradientEstimator + 'a>> = Vec::with_capacity(samples.len());
    for (b, s) in samples.iter().enumerate() {
        if cfg.exact_gradients {
            ests.push(Box::new(ExactEstimator::new(model, s.features())?));
        } else {
            let frozen = FrozenSamples::draw(s.ground_size(), &cfg.estimator, sample_stream(step, b))?;
            ests.push(Box::new(SampledEstimator::new(model, s.features(), frozen)?));
        }
    }
    BatchProblem::new(ests, cfg.scaling.clone())
}

fn batch_loss(psi: &[f64], samples: &[&SetSample], delta: f64) -> Result<(f64, Vec<f64>)> {
    let n = samples[0].ground_size();
    let scale = 1.0 / samples.len() as f64;
    let mut loss = 0.0;
    let mut v = Vec::with_capacity(psi.len());
    for (p, s) in psi.chunks(n).zip(samples) {
        let state = MeanFieldState::new(p.to_vec())?;
        let mask = s.mask();
        loss += scale * mean_field_loss(&state, &mask, delta)?;
        v.extend(loss_cotangent(&state, &mask, delta)?.into_iter().map(|x| x * scale));
    }
    Ok((loss, v))
}

/// Loss and parameter gradient for one batch at training step `step`.
pub fn batch_gradient(
    model: &SetFunctionModel,
    samples: &[&SetSample],
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepOutcome> {
    let problem = build_problem(model, samples, cfg, step)?;
    match cfg.gradient {
        GradientMode::Implicit => {
            let report = problem.solve(None, &cfg.solver)?;
            let psi = report.psi.as_slice();
            let (loss, v) = batch_loss(psi, samples, cfg.clamp)?;
            let mut ws = ImplicitWorkspace::assemble(&problem, psi)?;
            let out = implicit_vjp(&v, &mut ws, &problem, &cfg.linear_solve)?;
            Ok(StepOutcome {
                loss,
                grad: out.grad,
                residual: report.residual,
                iterations: report.iterations,
                converged: report.converged,
                retained_bytes: out.retained_bytes,
            })
        }
        GradientMode::Unrolled => {
            let psi0 = vec![0.5; problem.len() * problem.ground_size()];
            let mut loss = 0.0;
            let out = unrolled_with(&problem, &psi0, cfg.unroll_steps, None, |psi| {
                let (l, v) = batch_loss(psi, samples, cfg.clamp)?;
                loss = l;
                Ok(v)
            })?;
            let residual = crate::fixedpoint::residual(&out.psi, |p| {
                Ok(problem.scaled(p)?.scaled.into_data())
            })?;
            Ok(StepOutcome {
                loss,
                grad: out.vjp.grad,
                residual,
                iterations: cfg.unroll_steps,
                converged: residual <= cfg.solver.tolerance,
                retained_bytes: out.vjp.retained_bytes,
            })
        }
    }
}

/// Architecture used for a dataset with feature dimension `d_f`.
pub fn architecture_for(d_f: usize, depth: usize) -> Architecture {
    Architecture {
        depth,
        ..Architecture::standard(d_f)
    }
}

pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(SetFunctionModel, TrainHistory)> {
    train_with(dataset, cfg, None, |_| {})
}

/// Trains from `init` (or a fresh model seeded by `cfg.seed`), calling
/// `on_epoch` after every epoch.
pub fn train_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    init: Option<SetFunctionModel>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(SetFunctionModel, TrainHistory)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut model = match init {
        Some(m) => m,
        None => SetFunctionModel::init(architecture_for(dataset.meta.d_f, cfg.depth), cfg.seed)?,
    };
    let mut state = OptimizerState::default();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut loss, mut residual, mut iterations) = (0.0, 0.0, 0.0);
        let mut unconverged = 0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&SetSample> = chunk.iter().map(|&i| &dataset.samples()[i]).collect();
            if samples.iter().any(|s| s.ground_size() != samples[0].ground_size()) {
                return Err(Error::shape("ground sets within a batch must share |V|"));
            }
            let out = batch_gradient(&model, &samples, cfg, step)?;
            if !out.grad.all_finite() || !out.loss.is_finite() {
                return Err(Error::NonFinite(format!("gradient at epoch {epoch}, step {step}")));
            }
            if cfg.gradient == GradientMode::Implicit && !out.converged {
                unconverged += samples.len();
            }
            loss += out.loss;
            residual += out.residual;
            iterations += out.iterations as f64;
            batches += 1;
            let (params, next) = optimizer_step(model.params(), &out.grad, &state, &cfg.optimizer)?;
            model = model.with_params(params)?;
            state = next;
            step += 1;
        }
        if 2 * unconverged > dataset.len() {
            return Err(Error::Divergence(format!(
                "{unconverged} of {} samples missed tolerance {:e} within {} iterations in epoch {epoch}",
                dataset.len(),
                cfg.solver.tolerance,
                cfg.solver.max_iterations
            )));
        }
        let b = batches as f64;
        let stats = EpochStats {
            epoch,
            mean_loss: loss / b,
            mean_residual: residual / b,
            mean_iterations: iterations / b,
            wall_seconds: start.elapsed().as_secs_f64(),
            unconverged,
        };
        on_epoch(&stats);
        history.epochs.push(stats);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian;
    use crate::diffcore::{finite_diff_grad, Tensor};
    use crate::fixedpoint::solve_fixed_point;
    use crate::multilinear::exact_grad;
    use crate::setfn::FnSetFunction;
    use rand::Rng;

    #[test]
    fn loss_examples() {
        let half = MeanFieldState::uniform(6);
        let mask = [true, false, false, true, false, false];
        let l = mean_field_loss(&half, &mask, 1e-6).unwrap();
        assert!((l - 6.0 * 2f64.ln()).abs() < 1e-12);
        let perfect = MeanFieldState::new(mask.iter().map(|&b| b as u8 as f64).collect()).unwrap();
        assert!(mean_field_loss(&perfect, &mask, 1e-6).unwrap() <= 6.0 * 1.1e-6);
        let bad = MeanFieldState::new(vec![0.0, 0.0]).unwrap();
        let l = mean_field_loss(&bad, &[true, false], 1e-6).unwrap();
        assert!((l - (-(1e-6f64).ln() - (1.0 - 1e-6f64).ln())).abs() < 1e-12);
        assert!(mean_field_loss(&half, &[true], 1e-6).is_err());
    }

    #[test]
    fn cotangent_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = [true, false, true, false, false];
        let psi: Vec<f64> = (0..5).map(|_| rng.random_range(0.05..0.95)).collect();
        let v = loss_cotangent(&MeanFieldState::new(psi.clone()).unwrap(), &mask, 1e-6).unwrap();
        let fd = finite_diff_grad(
            |t| mean_field_loss(&MeanFieldState::new(t.data().to_vec()).unwrap(), &mask, 1e-6).unwrap(),
            &Tensor::vector(psi).unwrap(),
            1e-6,
        )
        .unwrap();
        for (a, b) in v.iter().zip(fd.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn random_table_fn(n: usize, seed: u64, amp: f64) -> FnSetFunction<impl Fn(&[bool]) -> f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table: Vec<f64> = (0..1usize << n).map(|_| rng.random_range(-amp..amp)).collect();
        FnSetFunction::new(n, move |s: &[bool]| {
            table[s.iter().enumerate().fold(0, |acc, (i, &b)| acc | ((b as usize) << i))]
        })
    }

    #[test]
    fn elbo_examples() {
        let zero = FnSetFunction::new(4, |_: &[bool]| 0.0);
        let e = elbo_exact(&zero, &MeanFieldState::uniform(4)).unwrap();
        assert!((e - 4.0 * 2f64.ln()).abs() < 1e-12);
        let f = random_table_fn(6, 3, 1.0);
        let table = crate::multilinear::value_table(&f).unwrap();
        let log_z = table.iter().map(|v| v.exp()).sum::<f64>().ln();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let psi = MeanFieldState::new((0..6).map(|_| rng.random()).collect()).unwrap();
            assert!(elbo_exact(&f, &psi).unwrap() <= log_z + 1e-12);
        }
    }

    #[test]
    fn fixed_point_is_elbo_stationary() {
        let f = random_table_fn(5, 4, 0.15);
        let cfg = SolverConfig {
            tolerance: 1e-12,
            ..Default::default()
        };
        let r = solve_fixed_point(
            |p| exact_grad(&f, &MeanFieldState::new(p.to_vec())?),
            &MeanFieldState::uniform(5),
            &cfg,
        )
        .unwrap();
        let g = finite_diff_grad(
            |t| elbo_exact(&f, &MeanFieldState::new(t.data().to_vec()).unwrap()).unwrap(),
            &Tensor::vector(r.psi.into_vec()).unwrap(),
            1e-6,
        )
        .unwrap();
        assert!(g.data().iter().all(|v| v.abs() <= 1e-4));
    }

    #[test]
    fn optimizer_examples() {
        let p = ParamVector::new(vec![("w".into(), Tensor::vector(vec![1.0]).unwrap())]).unwrap();
        let g = ParamVector::new(vec![("w".into(), Tensor::vector(vec![0.5]).unwrap())]).unwrap();
        let sgd = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.1,
            ..Default::default()
        };
        let (q, _) = optimizer_step(&p, &g, &OptimizerState::default(), &sgd).unwrap();
        assert!((q.flatten()[0] - 0.95).abs() < 1e-15);
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let cfg = OptimizerConfig {
                kind,
                ..Default::default()
            };
            let (q, s) = optimizer_step(&p, &p.zeros_like(), &OptimizerState::default(), &cfg).unwrap();
            assert_eq!(q, p);
            assert_eq!(s.step, 1);
            let cfg = OptimizerConfig {
                kind,
                learning_rate: 0.0,
                ..Default::default()
            };
            assert_eq!(optimizer_step(&p, &g, &OptimizerState::default(), &cfg).unwrap().0, p);
        }
        let adam = OptimizerConfig::default();
        let (q, _) = optimizer_step(&p, &g, &OptimizerState::default(), &adam).unwrap();
        // first Adam step moves by the learning rate in the sign direction
        assert!((q.flatten()[0] - (1.0 - 1e-3)).abs() < 1e-9);
    }

    fn mini_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 2,
            estimator: EstimatorConfig {
                samples: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn short_run_is_finite_and_deterministic() {
        let ds = gen_gaussian(32, 8, 2, 1).unwrap();
        let small = |cfg: TrainConfig| {
            let arch = Architecture {
                init_width: 8,
                hidden_width: 8,
                ..architecture_for(2, 2)
            };
            let init = SetFunctionModel::init(arch, 5).unwrap();
            train_with(&ds, &cfg, Some(init), |_| {}).unwrap()
        };
        let (m1, h1) = small(mini_cfg());
        assert_eq!(h1.epochs.len(), 2);
        assert!(h1.epochs.iter().all(|e| e.mean_loss.is_finite()));
        let (m2, _) = small(mini_cfg());
        assert_eq!(m1.params(), m2.params());
        let unrolled = TrainConfig {
            gradient: GradientMode::Unrolled,
            unroll_steps: 3,
            ..mini_cfg()
        };
        let (_, h) = small(unrolled);
        assert!(h.epochs.iter().all(|e| e.mean_loss.is_finite()));
    }

    #[test]
    fn gradient_modes_agree_on_contractive_batches() {
        let ds = gen_gaussian(4, 5, 2, 9).unwrap();
        let arch = Architecture {
            init_width: 6,
            hidden_width: 6,
            ..architecture_for(2, 2)
        };
        let model = SetFunctionModel::init(arch, 3).unwrap().scaled_output(0.02).unwrap();
        let samples: Vec<&SetSample> = ds.samples().iter().collect();
        let base = TrainConfig {
            exact_gradients: true,
            scaling: ScalingConfig::none(),
            solver: SolverConfig {
                tolerance: 1e-13,
                max_iterations: 500,
                ..Default::default()
            },
            ..Default::default()
        };
        let unrolled = TrainConfig {
            gradient: GradientMode::Unrolled,
            unroll_steps: 100,
            ..base.clone()
        };
        let sgd = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.05,
            ..Default::default()
        };
        let mut model = model;
        let mut state = OptimizerState::default();
        for step in 0..5 {
            let a = batch_gradient(&model, &samples, &base, step).unwrap().grad;
            let b = batch_gradient(&model, &samples, &unrolled, step).unwrap().grad.flatten();
            let af = a.flatten();
            let num: f64 = af.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
            let den: f64 = af.iter().map(|x| x * x).sum();
            assert!((num / den).sqrt() <= 1e-3, "step {step}");
            let (p, s) = optimizer_step(model.params(), &a, &state, &sgd).unwrap();
            model = model.with_params(p).unwrap();
            state = s;
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.clamp = 0.2;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.optimizer.learning_rate = 0.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
