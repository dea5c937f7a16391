//! The solved mean-field state is a stationary point of the ELBO, and the
//! ELBO never exceeds the log-partition function.

use implicit_meanfield::diffcore::{finite_diff_grad, Tensor};
use implicit_meanfield::fixedpoint::{solve_fixed_point, SolverConfig};
use implicit_meanfield::multilinear::{exact_grad, value_table, MeanFieldState};
use implicit_meanfield::setfn::FnSetFunction;
use implicit_meanfield::train::elbo_exact;

fn main() -> implicit_meanfield::Result<()> {
    let n = 6;
    // a small supermodular-plus-modular function
    let f = FnSetFunction::new(n, |s: &[bool]| {
        let k = s.iter().filter(|&&b| b).count() as f64;
        0.1 * s.iter().enumerate().map(|(i, &b)| if b { (i as f64 - 2.5) / 3.0 } else { 0.0 }).sum::<f64>() + 0.01 * k * k
    });
    let cfg = SolverConfig { tolerance: 1e-13, ..Default::default() };
    let r = solve_fixed_point(|p| exact_grad(&f, &MeanFieldState::new(p.to_vec())?), &MeanFieldState::uniform(n), &cfg)?;
    let g = finite_diff_grad(
        |t| elbo_exact(&f, &MeanFieldState::new(t.data().to_vec()).expect("in cube")).expect("enumerable"),
        &Tensor::vector(r.psi.as_slice().to_vec())?,
        1e-6,
    )?;
    let table = value_table(&f)?;
    let log_z = table.iter().map(|v| v.exp()).sum::<f64>().ln();
    println!("ψ* = {:?}", r.psi.as_slice().iter().map(|p| (p * 1e4).round() / 1e4).collect::<Vec<_>>());
    println!("‖∇ELBO(ψ*)‖∞ = {:.2e}", g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
    println!("ELBO(ψ*) = {:.6} ≤ ln Z = {:.6}", elbo_exact(&f, &r.psi)?, log_z);
    Ok(())
}
