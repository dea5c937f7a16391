//! Oracle suite behind `imf verify`: every check compares a library result
//! against an independent computation and reports error against threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffcore::{finite_diff_grad, Tensor};
use crate::error::Result;
use crate::eval::{brute_force_oracle, jaccard, top_k};
use crate::fixedpoint::{contraction_check, iteration_bound, solve_fixed_point, SolverConfig};
use crate::implicit::{
    implicit_vjp, unrolled_vjp, BatchProblem, ImplicitWorkspace, LinearSolveConfig,
};
use crate::multilinear::{
    exact_grad, exact_hessian, exact_value, mc_grad, mc_hessian, EstimatorConfig, ExactEstimator,
    GradientEstimator, MeanFieldState, ScalingConfig,
};
use crate::setfn::{Architecture, BoundModel, FnSetFunction, SetFunction, SetFunctionModel};
use crate::train::elbo_exact;

/// Faults that can be planted to confirm the suite catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    SigmaPrimeSign,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckResult {
    fn at_most(name: &str, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            threshold,
            passed: measured <= threshold,
        }
    }
}

/// Names of every registered check, in report order.
pub const CHECKS: &[&str] = &[
    "hessian_vs_finite_differences",
    "multilinear_vs_enumeration",
    "grad_estimator_unbiased",
    "hessian_estimator_unbiased",
    "implicit_gradient_vs_finite_differences",
    "implicit_vs_unrolled",
    "contraction_unique_fixed_point",
    "contraction_iteration_bound",
    "elbo_stationarity",
    "elbo_log_partition_bound",
    "temperature_invariance",
    "permutation_invariance",
    "jaccard_properties",
    "top_k_ties",
];

fn tiny_arch() -> Architecture {
    Architecture {
        feature_dim: 2,
        init_width: 4,
        hidden_width: 6,
        depth: 2,
    }
}

fn features(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::new(vec![n, 2], (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("finite features")
}

fn random_state(rng: &mut ChaCha8Rng, n: usize) -> MeanFieldState {
    MeanFieldState::new((0..n).map(|_| rng.random_range(0.05..0.95)).collect()).expect("in cube")
}

fn table_fn(n: usize, rng: &mut ChaCha8Rng, amp: f64) -> FnSetFunction<impl Fn(&[bool]) -> f64> {
    let table: Vec<f64> = (0..1usize << n).map(|_| rng.random_range(-amp..amp)).collect();
    FnSetFunction::new(n, move |s: &[bool]| {
        table[s.iter().enumerate().fold(0, |a, (i, &b)| a | ((b as usize) << i))]
    })
}

/// Model whose output layer is rescaled so `|V|·max|F| = target` on `feats`.
fn contractive_model(seed: u64, feats: &[Tensor], target: f64) -> Result<SetFunctionModel> {
    let model = SetFunctionModel::init(tiny_arch(), seed)?;
    let mut sup: f64 = 1e-12;
    for f in feats {
        let bound = BoundModel::new(&model, f)?;
        let table = crate::multilinear::value_table(&bound)?;
        sup = table.iter().fold(sup, |m, v| m.max(v.abs()));
    }
    model.scaled_output(target / (feats[0].rows() as f64 * sup))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(1e-300)).sqrt()
}

fn tight() -> SolverConfig {
    SolverConfig {
        tolerance: 1e-14,
        max_iterations: 5000,
        ..Default::default()
    }
}

fn exact_problem<'a>(
    model: &'a SetFunctionModel,
    feats: &'a [Tensor],
    scaling: &ScalingConfig,
) -> Result<BatchProblem<'a>> {
    let ests = feats
        .iter()
        .map(|f| Ok(Box::new(ExactEstimator::new(model, f)?) as Box<dyn GradientEstimator + 'a>))
        .collect::<Result<Vec<_>>>()?;
    BatchProblem::new(ests, scaling.clone())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Runs every check; `fault` plants a deliberate bug in the backward pass.
pub fn run_checks(instances: usize, seed: u64, fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    let instances = instances.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // Hessian against differences of the exact gradient.
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let f = table_fn(5, &mut rng, 1.0);
        let psi = random_state(&mut rng, 5);
        let h = exact_hessian(&f, &psi)?;
        for i in 0..5 {
            let fd = finite_diff_grad(
                |t| exact_grad(&f, &MeanFieldState::new(t.data().to_vec()).unwrap()).unwrap()[i],
                &Tensor::vector(psi.as_slice().to_vec())?,
                1e-5,
            )?;
            for j in 0..5 {
                worst = worst.max((h.get(i, j) - fd.data()[j]).abs());
            }
        }
    }
    out.push(CheckResult::at_most(CHECKS[0], worst, 1e-7));

    // Multilinear value against a direct sum over subsets.
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = 6;
        let f = table_fn(n, &mut rng, 2.0);
        let psi = random_state(&mut rng, n);
        let mut direct = 0.0;
        for mask in 0..1usize << n {
            let set: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            let prob: f64 = set
                .iter()
                .zip(psi.as_slice())
                .map(|(&b, &p)| if b { p } else { 1.0 - p })
                .product();
            let value = f.eval_masks(&Tensor::new(vec![1, n], set.iter().map(|&b| b as u8 as f64).collect())?)?[0];
            direct += prob * value;
        }
        worst = worst.max((exact_value(&f, &psi)? - direct).abs());
    }
    out.push(CheckResult::at_most(CHECKS[1], worst, 1e-12));

    // Estimator means against exact values, in standard errors.
    let n = 5;
    let feats = features(&mut rng, n);
    let model = SetFunctionModel::init(
        Architecture {
            init_width: 8,
            hidden_width: 8,
            ..tiny_arch()
        },
        seed,
    )?;
    let bound = BoundModel::new(&model, &feats)?;
    let psi = random_state(&mut rng, n);
    let reps = 2000;
    let mut g_samples = Vec::with_capacity(reps);
    let mut h_samples = Vec::with_capacity(reps);
    for r in 0..reps {
        let cfg = EstimatorConfig {
            samples: 1,
            seed: seed.wrapping_mul(1_000_003).wrapping_add(r as u64),
            antithetic: false,
        };
        g_samples.push(mc_grad(&model, &feats, &psi, &cfg)?);
        h_samples.push(mc_hessian(&model, &feats, &psi, &cfg)?.data().to_vec());
    }
    let z_score = |samples: &[Vec<f64>], exact: &[f64]| {
        let m = samples.len() as f64;
        let mut worst: f64 = 0.0;
        for (j, &e) in exact.iter().enumerate() {
            let mean = samples.iter().map(|s| s[j]).sum::<f64>() / m;
            let var = samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / (m - 1.0);
            let se = (var / m).sqrt();
            if se > 0.0 {
                worst = worst.max((mean - e).abs() / se);
            } else {
                worst = worst.max(if (mean - e).abs() < 1e-12 { 0.0 } else { f64::INFINITY });
            }
        }
        worst
    };
    let eg = exact_grad(&bound, &psi)?;
    let eh = exact_hessian(&bound, &psi)?;
    out.push(CheckResult::at_most(CHECKS[2], z_score(&g_samples, &eg), 4.0));
    out.push(CheckResult::at_most(CHECKS[3], z_score(&h_samples, eh.data()), 4.0));

    // Implicit gradient against differences of the full solve.
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let feats: Vec<Tensor> = (0..2).map(|_| features(&mut rng, 4)).collect();
        let model = contractive_model(seed + 100 + inst as u64, &feats, 0.5)?;
        let scaling = ScalingConfig::default();
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let problem = exact_problem(&model, &feats, &scaling)?;
        let star = problem.solve(None, &tight())?;
        let mut ws = ImplicitWorkspace::assemble(&problem, star.psi.as_slice())?;
        if fault == Some(Fault::SigmaPrimeSign) {
            ws.inject_sigma_prime_sign_fault();
        }
        let g = implicit_vjp(&v, &mut ws, &problem, &LinearSolveConfig::default())?.grad.flatten();
        let theta = model.params().flatten();
        let h = 1e-5;
        let mut fd = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            let eval = |d: f64| -> Result<f64> {
                let mut t = theta.clone();
                t[i] += d;
                let m = model.with_flat_params(&t)?;
                let p = exact_problem(&m, &feats, &scaling)?;
                Ok(dot(&v, p.solve(None, &tight())?.psi.as_slice()))
            };
            fd.push((eval(h)? - eval(-h)?) / (2.0 * h));
        }
        worst = worst.max(rel_err(&g, &fd));
    }
    out.push(CheckResult::at_most(CHECKS[4], worst, 1e-3));

    // Implicit against long unrolling.
    let feats = vec![features(&mut rng, 5)];
    let model = contractive_model(seed + 7, &feats, 0.5)?;
    let none = ScalingConfig::none();
    let problem = exact_problem(&model, &feats, &none)?;
    let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let star = problem.solve(None, &tight())?;
    let mut ws = ImplicitWorkspace::assemble(&problem, star.psi.as_slice())?;
    if fault == Some(Fault::SigmaPrimeSign) {
        ws.inject_sigma_prime_sign_fault();
    }
    let gi = implicit_vjp(&v, &mut ws, &problem, &LinearSolveConfig::default())?.grad.flatten();
    let gu = unrolled_vjp(&v, &problem, &[0.5; 5], 100, None)?.vjp.grad.flatten();
    out.push(CheckResult::at_most(CHECKS[5], rel_err(&gi, &gu), 1e-3));

    // Uniqueness and iteration count under the contraction condition.
    let eps = 1e-8;
    let (mut spread, mut excess): (f64, f64) = (0.0, f64::NEG_INFINITY);
    for inst in 0..instances {
        let feats = vec![features(&mut rng, 6)];
        let model = contractive_model(seed + 200 + inst as u64, &feats, 0.6)?;
        let f = BoundModel::new(&model, &feats[0])?;
        let report = contraction_check(&f, &[MeanFieldState::uniform(6)], &none)?;
        if !report.satisfied {
            spread = f64::INFINITY;
            continue;
        }
        let cfg = SolverConfig {
            tolerance: eps,
            max_iterations: 10_000,
            ..Default::default()
        };
        let bound = iteration_bound(report.bound, eps, 6)?.ceil() + 2.0;
        let mut sols: Vec<Vec<f64>> = Vec::new();
        for _ in 0..10 {
            let start = MeanFieldState::new((0..6).map(|_| rng.random()).collect())?;
            let r = solve_fixed_point(|p| exact_grad(&f, &MeanFieldState::new(p.to_vec())?), &start, &cfg)?;
            excess = excess.max(r.iterations as f64 - bound);
            sols.push(r.psi.into_vec());
        }
        for s in &sols[1..] {
            spread = spread.max(s.iter().zip(&sols[0]).fold(0.0, |m, (a, b)| m.max((a - b).abs())));
        }
    }
    out.push(CheckResult::at_most(CHECKS[6], spread, 10.0 * eps));
    out.push(CheckResult::at_most(CHECKS[7], excess, 0.0));

    // Stationarity of the ELBO and the log-partition bound.
    let (mut grad_inf, mut gap): (f64, f64) = (0.0, f64::NEG_INFINITY);
    for _ in 0..instances {
        let n = 6;
        let f = table_fn(n, &mut rng, 0.15);
        let r = solve_fixed_point(
            |p| exact_grad(&f, &MeanFieldState::new(p.to_vec())?),
            &MeanFieldState::uniform(n),
            &tight(),
        )?;
        let g = finite_diff_grad(
            |t| elbo_exact(&f, &MeanFieldState::new(t.data().to_vec()).unwrap()).unwrap(),
            &Tensor::vector(r.psi.as_slice().to_vec())?,
            1e-6,
        )?;
        grad_inf = grad_inf.max(g.data().iter().fold(0.0, |m, v| m.max(v.abs())));
        let table = crate::multilinear::value_table(&f)?;
        let max = table.iter().cloned().fold(f64::MIN, f64::max);
        let log_z = max + table.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for _ in 0..10 {
            gap = gap.max(elbo_exact(&f, &random_state(&mut rng, n))? - log_z);
        }
        gap = gap.max(elbo_exact(&f, &r.psi)? - log_z);
    }
    out.push(CheckResult::at_most(CHECKS[8], grad_inf, 1e-4));
    out.push(CheckResult::at_most(CHECKS[9], gap, 1e-12));

    // Boltzmann argmax under positive rescaling.
    let mut mismatches = 0.0;
    for inst in 0..instances * 5 {
        let feats = features(&mut rng, 7);
        let model = SetFunctionModel::init(tiny_arch(), seed + 300 + inst as u64)?;
        let base = brute_force_oracle(&BoundModel::new(&model, &feats)?)?.argmax_mask;
        for c in [0.01, 3.0, 250.0] {
            let scaled = model.scaled_output(c)?;
            if brute_force_oracle(&BoundModel::new(&scaled, &feats)?)?.argmax_mask != base {
                mismatches += 1.0;
            }
        }
    }
    out.push(CheckResult::at_most(CHECKS[10], mismatches, 0.0));

    // Reordering the ground set reorders nothing but the mask.
    let feats = features(&mut rng, 6);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let permuted = Tensor::new(
        vec![6, 2],
        perm.iter().flat_map(|&p| feats.row(p).to_vec()).collect(),
    )?;
    let model = SetFunctionModel::init(tiny_arch(), seed + 9)?;
    let a = crate::multilinear::value_table(&BoundModel::new(&model, &feats)?)?;
    let b = crate::multilinear::value_table(&BoundModel::new(&model, &permuted)?)?;
    let mut worst: f64 = 0.0;
    for (mask, va) in a.iter().enumerate() {
        // element i of the permuted set is original element perm[i]
        let pm = (0..6).filter(|&i| mask >> perm[i] & 1 == 1).fold(0, |m, i| m | 1 << i);
        worst = worst.max((va - b[pm]).abs());
    }
    out.push(CheckResult::at_most(CHECKS[11], worst, 1e-12));

    let mut violations = 0.0;
    for _ in 0..200 {
        let pick = |rng: &mut ChaCha8Rng| -> Vec<usize> {
            let mut s: Vec<usize> = (0..8).filter(|_| rng.random_bool(0.4)).collect();
            s.dedup();
            s
        };
        let (x, y) = (pick(&mut rng), pick(&mut rng));
        let j = jaccard(&x, &y);
        if !(0.0..=1.0).contains(&j) || j != jaccard(&y, &x) || (j == 1.0) != (x == y) {
            violations += 1.0;
        }
    }
    out.push(CheckResult::at_most(CHECKS[12], violations, 0.0));

    let ok = top_k(&[0.9, 0.1, 0.8], 2)? == [0, 2] && top_k(&[0.5, 0.5], 1)? == [0];
    out.push(CheckResult::at_most(CHECKS[13], if ok { 0.0 } else { 1.0 }, 0.0));

    Ok(out)
}
