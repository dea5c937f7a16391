//! Implicit differentiation through the fixed point, checked against
//! unrolled backpropagation and against finite differences of the solve.

use implicit_meanfield::diffcore::Tensor;
use implicit_meanfield::fixedpoint::SolverConfig;
use implicit_meanfield::implicit::{implicit_vjp, unrolled_vjp, BatchProblem, ImplicitWorkspace, LinearSolveConfig};
use implicit_meanfield::multilinear::{ExactEstimator, ScalingConfig};
use implicit_meanfield::setfn::{Architecture, SetFunctionModel};

fn main() -> implicit_meanfield::Result<()> {
    let n = 5;
    let features = Tensor::new(vec![n, 2], (0..2 * n).map(|i| (i as f64 * 0.61).cos()).collect())?;
    let arch = Architecture { init_width: 4, hidden_width: 6, ..Architecture::standard(2) };
    let model = SetFunctionModel::init(arch, 2)?.scaled_output(0.05)?;
    let scaling = ScalingConfig::none();
    let solver = SolverConfig { tolerance: 1e-14, max_iterations: 1000, ..Default::default() };
    let v = vec![1.0, -0.5, 0.25, 2.0, -1.0];

    let solve_dot = |m: &SetFunctionModel| -> implicit_meanfield::Result<f64> {
        let p = BatchProblem::single(ExactEstimator::new(m, &features)?, scaling.clone())?;
        let psi = p.solve(None, &solver)?.psi;
        Ok(psi.as_slice().iter().zip(&v).map(|(a, b)| a * b).sum())
    };

    let problem = BatchProblem::single(ExactEstimator::new(&model, &features)?, scaling.clone())?;
    let star = problem.solve(None, &solver)?;
    let mut ws = ImplicitWorkspace::assemble(&problem, star.psi.as_slice())?;
    let implicit = implicit_vjp(&v, &mut ws, &problem, &LinearSolveConfig::default())?;
    let g = implicit.grad.flatten();

    let theta = model.params().flatten();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in (0..theta.len()).step_by(7) {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[i] += h;
        minus[i] -= h;
        let fd = (solve_dot(&model.with_flat_params(&plus)?)? - solve_dot(&model.with_flat_params(&minus)?)?) / (2.0 * h);
        worst = worst.max((fd - g[i]).abs());
    }
    println!("implicit vs finite differences: max abs error {worst:.2e} over sampled coordinates");

    for k in [5, 20, 80] {
        let u = unrolled_vjp(&v, &problem, &vec![0.5; n], k, None)?;
        let d: f64 = u.vjp.grad.flatten().iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        println!("unrolled K = {k:>2}: distance to implicit {d:.2e}, retained {} bytes", u.vjp.retained_bytes);
    }
    println!("implicit retained {} bytes", implicit.retained_bytes);
    Ok(())
}
