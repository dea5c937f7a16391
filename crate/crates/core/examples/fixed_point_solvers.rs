//! Plain, damped and Anderson-accelerated fixed-point iteration on a
//! contractive instance, with the uniqueness check and iteration bound.

use implicit_meanfield::diffcore::Tensor;
use implicit_meanfield::fixedpoint::{contraction_check, iteration_bound, solve_fixed_point, SolverConfig, SolverMethod};
use implicit_meanfield::multilinear::{exact_grad, value_table, MeanFieldState, ScalingConfig};
use implicit_meanfield::setfn::{Architecture, BoundModel, SetFunctionModel};

fn main() -> implicit_meanfield::Result<()> {
    let n = 8;
    let features = Tensor::new(vec![n, 2], (0..2 * n).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let arch = Architecture { init_width: 16, hidden_width: 16, ..Architecture::standard(2) };
    let raw = SetFunctionModel::init(arch, 5)?;
    let sup = value_table(&BoundModel::new(&raw, &features)?)?.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // rescale F so that |V|·sup|F| = 0.7, inside the uniqueness region
    let model = raw.scaled_output(0.7 / (n as f64 * sup))?;
    let f = BoundModel::new(&model, &features)?;

    let report = contraction_check(&f, &[MeanFieldState::uniform(n)], &ScalingConfig::none())?;
    println!("|V|·sup|F| = {:.3}  estimated q = {:.3}  unique: {}", report.bound, report.q_hat, report.satisfied);
    let eps = 1e-10;
    println!("iteration bound for ε = {eps:e}: {:.1}", iteration_bound(report.bound, eps, n)?);

    for (label, method, damping) in [
        ("plain", SolverMethod::Fpi, 0.0),
        ("damped 0.3", SolverMethod::Fpi, 0.3),
        ("anderson", SolverMethod::Anderson, 0.0),
    ] {
        let cfg = SolverConfig { method, damping, tolerance: eps, max_iterations: 500, ..Default::default() };
        let r = solve_fixed_point(|p| exact_grad(&f, &MeanFieldState::new(p.to_vec())?), &MeanFieldState::uniform(n), &cfg)?;
        println!("{label:<11} {:>3} iterations  residual {:.1e}  ψ₀ = {:.6}", r.iterations, r.residual, r.psi.as_slice()[0]);
    }
    Ok(())
}
