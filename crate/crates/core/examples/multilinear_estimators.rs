//! Exact multilinear gradient and Hessian by enumeration next to their
//! Monte Carlo estimates for growing sample counts.

use implicit_meanfield::diffcore::Tensor;
use implicit_meanfield::multilinear::{exact_grad, exact_hessian, mc_grad, mc_hessian, EstimatorConfig, MeanFieldState};
use implicit_meanfield::setfn::{Architecture, BoundModel, SetFunctionModel};

fn main() -> implicit_meanfield::Result<()> {
    let arch = Architecture { init_width: 16, hidden_width: 32, ..Architecture::standard(2) };
    let model = SetFunctionModel::init(arch, 3)?;
    let n = 8;
    let features = Tensor::new(vec![n, 2], (0..2 * n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect())?;
    let psi = MeanFieldState::new((0..n).map(|i| 0.2 + 0.07 * i as f64).collect())?;

    let bound = BoundModel::new(&model, &features)?;
    let g = exact_grad(&bound, &psi)?;
    let h = exact_hessian(&bound, &psi)?;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    println!("exact ‖∇F̃‖ = {:.5}   ‖∇²F̃‖_F = {:.5}", norm(&g), norm(h.data()));

    for samples in [1, 16, 256, 4096] {
        let cfg = EstimatorConfig { samples, seed: 11, antithetic: true };
        let mg = mc_grad(&model, &features, &psi, &cfg)?;
        let mh = mc_hessian(&model, &features, &psi, &cfg)?;
        let dg: Vec<f64> = mg.iter().zip(&g).map(|(a, b)| a - b).collect();
        let dh: Vec<f64> = mh.data().iter().zip(h.data()).map(|(a, b)| a - b).collect();
        println!("m = {samples:>4}: grad error {:.2e}   hessian error {:.2e}", norm(&dg), norm(&dh));
    }
    Ok(())
}
