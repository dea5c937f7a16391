//! Retained bytes of one training step as the iteration count grows: linear
//! for unrolling, flat for implicit differentiation.

use implicit_meanfield::data::{gen_gaussian, SetSample};
use implicit_meanfield::eval::{affine_fit, retention_profile, RetentionProfile};
use implicit_meanfield::multilinear::EstimatorConfig;
use implicit_meanfield::setfn::SetFunctionModel;
use implicit_meanfield::train::{architecture_for, TrainConfig};

fn main() -> implicit_meanfield::Result<()> {
    let ds = gen_gaussian(4, 20, 4, 0)?;
    let batch: Vec<&SetSample> = ds.samples()[..2].iter().collect();
    let model = SetFunctionModel::init(architecture_for(2, 2), 0)?;
    let cfg = TrainConfig { estimator: EstimatorConfig { samples: 1, ..Default::default() }, ..Default::default() };
    let ks = [5, 10, 20, 40];
    let p = retention_profile(&model, &batch, &cfg, &ks, 1)?;
    for (i, k) in ks.iter().enumerate() {
        println!("K = {k:>2}: unrolled {:>10.0} B   implicit {:>8.0} B", p.unrolled[i].mean, p.implicit[i].mean);
    }
    let x: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    let y: Vec<f64> = p.unrolled.iter().map(|s| s.mean).collect();
    let (slope, _, r2) = affine_fit(&x, &y)?;
    println!("unrolled: {slope:.0} bytes per iteration, R² = {r2:.5}");
    println!("implicit spread: {:.3}", RetentionProfile::spread(&p.implicit));
    Ok(())
}
