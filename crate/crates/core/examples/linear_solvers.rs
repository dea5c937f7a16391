//! Matrix-free GMRES and normal-equation CG on a nonsymmetric system, plus
//! the fallback chain ending in a dense pseudo-inverse.

use implicit_meanfield::diffcore::Tensor;
use implicit_meanfield::implicit::{linear_solve, solve_with_fallback, DenseOperator, LinearSolveConfig, LinearSolveMethod};

fn main() -> implicit_meanfield::Result<()> {
    let n = 6;
    let entries = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            if i == j { 2.0 } else { 0.3 * ((i * 5 + j * 3) % 7) as f64 / 7.0 - 0.1 }
        })
        .collect();
    let a = Tensor::new(vec![n, n], entries)?;
    let op = DenseOperator(a);
    let b: Vec<f64> = (0..n).map(|i| i as f64 - 2.0).collect();
    for method in [LinearSolveMethod::Gmres, LinearSolveMethod::NormalCg] {
        let cfg = LinearSolveConfig { method, ..Default::default() };
        let out = linear_solve(&op, &b, &cfg)?;
        println!("{method:?}: {} iterations, residual {:.1e}", out.iterations, out.residual);
    }
    let starved = LinearSolveConfig { max_iterations: 1, restart: 1, ..Default::default() };
    let out = solve_with_fallback(&op, &b, &starved)?;
    println!("one-iteration budget falls back to {:?} (residual {:.1e})", out.method, out.residual);
    Ok(())
}
