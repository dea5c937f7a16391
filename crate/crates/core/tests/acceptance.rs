//! Acceptance criteria, one printed PASS/FAIL line each.
//!
//! The full-scale Gaussian and Moons runs take most of an hour each on one
//! core and only run with `--ignored` (or `--include-ignored`); without it
//! the Gaussian criterion uses its reduced preset and Moons a reduced run.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use implicit_meanfield::data::{default_moons_noise, gen_gaussian, gen_moons, Dataset, SetSample};
use implicit_meanfield::diffcore::{finite_diff_grad, Tensor};
use implicit_meanfield::eval::{affine_fit, brute_force_oracle, mean_jc, retention_profile, InferenceConfig, InferenceMode, RetentionProfile};
use implicit_meanfield::fixedpoint::{contraction_check, iteration_bound, solve_fixed_point, SolverConfig};
use implicit_meanfield::implicit::{implicit_vjp, BatchProblem, ImplicitWorkspace, LinearSolveConfig};
use implicit_meanfield::multilinear::{
    exact_grad, exact_hessian, mc_grad, mc_hessian, value_table, EstimatorConfig, ExactEstimator, GradientEstimator,
    MeanFieldState, ScalingConfig, ScalingMode,
};
use implicit_meanfield::setfn::{Architecture, BoundModel, SetFunctionModel};
use implicit_meanfield::train::{architecture_for, elbo_exact, train_with, TrainConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

fn report(name: &str, start: Instant, out: Outcome) -> bool {
    println!(
        "[PRIMARY] {name}: {}  {}  ({:.1}s)",
        if out.passed { "PASS" } else { "FAIL" },
        out.detail,
        start.elapsed().as_secs_f64()
    );
    out.passed
}

fn tiny_arch() -> Architecture {
    Architecture {
        feature_dim: 2,
        init_width: 4,
        hidden_width: 6,
        depth: 2,
    }
}

fn features(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::new(vec![n, 2], (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn sup_abs(model: &SetFunctionModel, feats: &[Tensor]) -> f64 {
    feats.iter().fold(1e-300, |m, f| {
        let t = value_table(&BoundModel::new(model, f).unwrap()).unwrap();
        t.iter().fold(m, |a, v| a.max(v.abs()))
    })
}

/// Output layer rescaled so that `|V|·sup|F| = target` over `feats`.
fn contractive(model: SetFunctionModel, feats: &[Tensor], target: f64) -> SetFunctionModel {
    let s = sup_abs(&model, feats);
    model.scaled_output(target / (feats[0].rows() as f64 * s)).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(1e-300)).sqrt()
}

// ---------------------------------------------------------------- end to end

struct Preset {
    size: usize,
    ground: usize,
    subset: usize,
    epochs: usize,
    threshold: f64,
}

fn end_to_end(data: Dataset, preset: &Preset, scaling: ScalingConfig, lr: f64) -> Outcome {
    let (train, test) = data.split().unwrap();
    let mut cfg = TrainConfig {
        batch_size: 32,
        epochs: preset.epochs,
        scaling,
        estimator: EstimatorConfig {
            samples: 1,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.optimizer.learning_rate = lr;
    let init = SetFunctionModel::init(architecture_for(2, 2), 0).unwrap();
    let (model, hist) = train_with(&train, &cfg, Some(init), |_| {}).unwrap();
    let mut inf = InferenceConfig::from_train(&cfg, InferenceMode::Converge);
    inf.estimator.samples = 8;
    let m = mean_jc(&model, &test, &inf).unwrap();
    Outcome {
        passed: m.mean_jc >= preset.threshold,
        detail: format!(
            "|V|={} |S*|={} n={} epochs={} test JC (converge) {:.4} >= {} (final loss {:.4})",
            preset.ground,
            preset.subset,
            preset.size,
            preset.epochs,
            m.mean_jc,
            preset.threshold,
            hist.epochs.last().unwrap().mean_loss
        ),
    }
}

const GAUSSIAN_FULL: Preset = Preset {
    size: 1000,
    ground: 100,
    subset: 10,
    epochs: 10,
    threshold: 0.85,
};
const GAUSSIAN_CI: Preset = Preset {
    size: 300,
    ground: 30,
    subset: 5,
    epochs: 3,
    threshold: 0.80,
};
const MOONS_FULL: Preset = Preset {
    size: 1000,
    ground: 100,
    subset: 10,
    epochs: 10,
    threshold: 0.55,
};

fn gaussian_jc(full: bool) -> Outcome {
    let p = if full { &GAUSSIAN_FULL } else { &GAUSSIAN_CI };
    let data = gen_gaussian(p.size, p.ground, p.subset, 1).unwrap();
    let mut out = end_to_end(data, p, ScalingConfig::default(), 3e-3);
    out.detail = format!("{} preset: {}", if full { "full" } else { "reduced" }, out.detail);
    out
}

fn moons_jc(full: bool) -> Outcome {
    let p = &MOONS_FULL;
    if !full {
        return Outcome {
            passed: false,
            detail: "not run: the full-scale run needs --ignored".into(),
        };
    }
    let data = gen_moons(p.size, p.ground, p.subset, default_moons_noise(), 1).unwrap();
    end_to_end(data, p, ScalingConfig::default(), 3e-3)
}

// ---------------------------------------------------------------- memory

fn memory_scaling() -> Outcome {
    let ds = gen_gaussian(4, GAUSSIAN_CI.ground, GAUSSIAN_CI.subset, 0).unwrap();
    let batch: Vec<&SetSample> = ds.samples()[..2].iter().collect();
    let model = SetFunctionModel::init(architecture_for(2, 2), 0).unwrap();
    let cfg = TrainConfig {
        estimator: EstimatorConfig {
            samples: 1,
            ..Default::default()
        },
        ..Default::default()
    };
    let ks = [5usize, 10, 20, 40];
    let p = retention_profile(&model, &batch, &cfg, &ks, 2).unwrap();
    let x: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    let y: Vec<f64> = p.unrolled.iter().map(|s| s.mean).collect();
    let (_, _, r2) = affine_fit(&x, &y).unwrap();
    let ratio = y[3] / y[0];
    let spread = RetentionProfile::spread(&p.implicit);
    Outcome {
        passed: r2 >= 0.99 && ratio >= 4.0 && spread <= 1.2,
        detail: format!("unrolled R² {r2:.5} >= 0.99, K40/K5 {ratio:.2} >= 4; implicit max/min {spread:.3} <= 1.2"),
    }
}

// ---------------------------------------------------------------- implicit oracle

fn exact_problem<'a>(m: &'a SetFunctionModel, feats: &'a [Tensor], s: &ScalingConfig) -> BatchProblem<'a> {
    let ests: Vec<Box<dyn GradientEstimator + 'a>> = feats
        .iter()
        .map(|f| Box::new(ExactEstimator::new(m, f).unwrap()) as Box<dyn GradientEstimator>)
        .collect();
    BatchProblem::new(ests, s.clone()).unwrap()
}

fn tight() -> SolverConfig {
    SolverConfig {
        tolerance: 1e-14,
        max_iterations: 5000,
        ..Default::default()
    }
}

fn implicit_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let modes = [ScalingMode::None, ScalingMode::Constant, ScalingMode::Frobenius, ScalingMode::Nuclear];
    let mut worst: f64 = 0.0;
    for inst in 0..20 {
        let n = rng.random_range(3..=6);
        let b = 1 + inst % 2;
        let feats: Vec<Tensor> = (0..b).map(|_| features(&mut rng, n)).collect();
        let scaling = ScalingConfig {
            mode: modes[inst % 4],
            constant: 0.5,
        };
        let model = contractive(SetFunctionModel::init(tiny_arch(), 500 + inst as u64).unwrap(), &feats, 0.5);
        let v: Vec<f64> = (0..b * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = exact_problem(&model, &feats, &scaling);
        let star = p.solve(None, &tight()).unwrap();
        let mut ws = ImplicitWorkspace::assemble(&p, star.psi.as_slice()).unwrap();
        let g = implicit_vjp(&v, &mut ws, &p, &LinearSolveConfig::default()).unwrap().grad.flatten();
        let theta = model.params().flatten();
        let h = 1e-5;
        let fd: Vec<f64> = (0..theta.len())
            .map(|i| {
                let at = |d: f64| {
                    let mut t = theta.clone();
                    t[i] += d;
                    let m = model.with_flat_params(&t).unwrap();
                    let r = exact_problem(&m, &feats, &scaling).solve(None, &tight()).unwrap();
                    assert!(r.converged);
                    r.psi.as_slice().iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
                };
                (at(h) - at(-h)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&g, &fd));
    }
    Outcome {
        passed: worst <= 1e-3,
        detail: format!("20 instances, worst relative error {worst:.2e} <= 1e-3"),
    }
}

// ---------------------------------------------------------------- estimators

fn estimator_unbiasedness() -> Outcome {
    let n = 8;
    let seeds = 100_000u64;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_g: f64 = 0.0;
    let mut worst_h: f64 = 0.0;
    let arch = Architecture {
        init_width: 8,
        hidden_width: 8,
        ..tiny_arch()
    };
    for model_seed in 0..3u64 {
        let model = SetFunctionModel::init(arch, 900 + model_seed).unwrap();
        let feats = features(&mut rng, n);
        let psi = MeanFieldState::new((0..n).map(|_| rng.random_range(0.1..0.9)).collect()).unwrap();
        let bound = BoundModel::new(&model, &feats).unwrap();
        let eg = exact_grad(&bound, &psi).unwrap();
        let eh = exact_hessian(&bound, &psi).unwrap();
        let (mut sg, mut sg2) = (vec![0.0; n], vec![0.0; n]);
        let (mut sh, mut sh2) = (vec![0.0; n * n], vec![0.0; n * n]);
        for s in 0..seeds {
            let cfg = EstimatorConfig {
                samples: 1,
                seed: model_seed * seeds + s,
                antithetic: false,
            };
            for (j, v) in mc_grad(&model, &feats, &psi, &cfg).unwrap().into_iter().enumerate() {
                sg[j] += v;
                sg2[j] += v * v;
            }
            for (j, &v) in mc_hessian(&model, &feats, &psi, &cfg).unwrap().data().iter().enumerate() {
                sh[j] += v;
                sh2[j] += v * v;
            }
        }
        let m = seeds as f64;
        let z = |sum: &[f64], sq: &[f64], exact: &[f64]| {
            sum.iter().zip(sq).zip(exact).fold(0.0f64, |w, ((s, q), e)| {
                let mean = s / m;
                let var = (q / m - mean * mean).max(0.0) * m / (m - 1.0);
                let se = (var / m).sqrt();
                let dev = (mean - e).abs();
                w.max(if se > 0.0 { dev / se } else if dev < 1e-14 { 0.0 } else { f64::INFINITY })
            })
        };
        worst_g = worst_g.max(z(&sg, &sg2, &eg));
        worst_h = worst_h.max(z(&sh, &sh2, eh.data()));
    }
    Outcome {
        passed: worst_g <= 3.0 && worst_h <= 3.0,
        detail: format!(
            "3 models, |V|=8, 1e5 seeds: worst |mean-exact|/SE grad {worst_g:.2}, hessian {worst_h:.2} (<= 3)"
        ),
    }
}

// ---------------------------------------------------------------- contraction

fn contraction_uniqueness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let eps = 1e-8;
    let none = ScalingConfig::none();
    let (mut spread, mut excess, mut checked): (f64, f64, usize) = (0.0, f64::NEG_INFINITY, 0);
    let mut inst = 0u64;
    while checked < 20 {
        inst += 1;
        let n = rng.random_range(3..=8);
        let feats = vec![features(&mut rng, n)];
        let target = rng.random_range(0.2..0.95);
        let model = contractive(SetFunctionModel::init(tiny_arch(), 1000 + inst).unwrap(), &feats, target);
        let f = BoundModel::new(&model, &feats[0]).unwrap();
        let report = contraction_check(&f, &[MeanFieldState::uniform(n)], &none).unwrap();
        if !report.satisfied {
            continue;
        }
        checked += 1;
        let cap = iteration_bound(report.bound, eps, n).unwrap().ceil() + 2.0;
        let cfg = SolverConfig {
            tolerance: eps,
            max_iterations: 100_000,
            ..Default::default()
        };
        let mut sols: Vec<Vec<f64>> = Vec::new();
        for _ in 0..10 {
            let start = MeanFieldState::new((0..n).map(|_| rng.random()).collect()).unwrap();
            let r = solve_fixed_point(|p| exact_grad(&f, &MeanFieldState::new(p.to_vec())?), &start, &cfg).unwrap();
            excess = excess.max(r.iterations as f64 - cap);
            sols.push(r.psi.into_vec());
        }
        for s in &sols[1..] {
            spread = spread.max(s.iter().zip(&sols[0]).fold(0.0, |m, (a, b)| m.max((a - b).abs())));
        }
    }
    Outcome {
        passed: spread <= 10.0 * eps && excess <= 0.0,
        detail: format!(
            "20 instances x 10 starts: max spread {spread:.1e} <= {:.0e}; iterations minus (ceil(bound)+2) at most {excess}",
            10.0 * eps
        ),
    }
}

// ---------------------------------------------------------------- stationarity

fn stationarity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut grad_inf, mut gap): (f64, f64) = (0.0, f64::NEG_INFINITY);
    for inst in 0..10u64 {
        let n = rng.random_range(3..=8);
        let feats = vec![features(&mut rng, n)];
        let model = contractive(SetFunctionModel::init(tiny_arch(), 40 + inst).unwrap(), &feats, 0.8);
        let f = BoundModel::new(&model, &feats[0]).unwrap();
        let r = solve_fixed_point(
            |p| exact_grad(&f, &MeanFieldState::new(p.to_vec())?),
            &MeanFieldState::uniform(n),
            &tight(),
        )
        .unwrap();
        let g = finite_diff_grad(
            |t| elbo_exact(&f, &MeanFieldState::new(t.data().to_vec()).unwrap()).unwrap(),
            &Tensor::vector(r.psi.as_slice().to_vec()).unwrap(),
            1e-6,
        )
        .unwrap();
        grad_inf = grad_inf.max(g.data().iter().fold(0.0, |m, v| m.max(v.abs())));
        let table = value_table(&f).unwrap();
        let max = table.iter().cloned().fold(f64::MIN, f64::max);
        let log_z = max + table.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        gap = gap.max(elbo_exact(&f, &r.psi).unwrap() - log_z);
        for _ in 0..20 {
            let psi = MeanFieldState::new((0..n).map(|_| rng.random()).collect()).unwrap();
            gap = gap.max(elbo_exact(&f, &psi).unwrap() - log_z);
        }
    }
    Outcome {
        passed: grad_inf <= 1e-4 && gap <= 0.0,
        detail: format!("10 instances: max |grad ELBO|_inf {grad_inf:.1e} <= 1e-4; max ELBO - ln Z {gap:.2e} <= 0"),
    }
}

// ---------------------------------------------------------------- temperature

fn temperature_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mismatches = 0;
    let arch = Architecture {
        init_width: 16,
        hidden_width: 16,
        ..tiny_arch()
    };
    for inst in 0..50u64 {
        let n = rng.random_range(2..=10);
        let feats = features(&mut rng, n);
        let model = SetFunctionModel::init(arch, 3000 + inst).unwrap();
        let base = brute_force_oracle(&BoundModel::new(&model, &feats).unwrap()).unwrap().argmax_mask;
        for _ in 0..4 {
            let c = 10f64.powf(rng.random_range(-3.0..3.0));
            let scaled = model.scaled_output(c).unwrap();
            if brute_force_oracle(&BoundModel::new(&scaled, &feats).unwrap()).unwrap().argmax_mask != base {
                mismatches += 1;
            }
        }
    }
    Outcome {
        passed: mismatches == 0,
        detail: format!("50 instances x 4 scales: {mismatches} argmax changes (0 allowed)"),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let full = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with("--")).collect();
    let criteria: [(&str, Box<dyn Fn() -> Outcome>); 8] = [
        ("gaussian_end_to_end_jc", Box::new(move || gaussian_jc(full))),
        ("moons_end_to_end_jc", Box::new(move || moons_jc(full))),
        ("memory_scaling", Box::new(memory_scaling)),
        ("implicit_gradient_oracle", Box::new(implicit_oracle)),
        ("estimator_unbiasedness", Box::new(estimator_unbiasedness)),
        ("contraction_uniqueness", Box::new(contraction_uniqueness)),
        ("elbo_stationarity", Box::new(stationarity)),
        ("temperature_invariance", Box::new(temperature_invariance)),
    ];
    let mut failed = Vec::new();
    for (name, run) in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        if name.starts_with("moons") && !full {
            println!("[PRIMARY] {name}: NOT RUN  full-scale only, pass --ignored  (0.0s)");
            continue;
        }
        if !report(name, start, run()) {
            failed.push(*name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
