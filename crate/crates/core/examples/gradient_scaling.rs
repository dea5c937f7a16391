//! The four gradient scaling modes applied to the same batch of gradients,
//! including the Jacobian-vector product used in the backward pass.

use implicit_meanfield::diffcore::Tensor;
use implicit_meanfield::multilinear::{scale_gradient, ScalingConfig, ScalingMode};

fn main() -> implicit_meanfield::Result<()> {
    let n = 4;
    let grads = Tensor::matrix(2, n, vec![3.0, -1.0, 0.5, 2.0, -4.0, 1.5, 0.0, 1.0])?;
    for mode in [ScalingMode::None, ScalingMode::Constant, ScalingMode::Frobenius, ScalingMode::Nuclear] {
        let cfg = ScalingConfig { mode, constant: 10.0 };
        let out = scale_gradient(&grads, &cfg, n)?;
        let tangent = vec![1.0; 2 * n];
        let jvp = out.info.jvp(&tangent);
        println!(
            "{:<10} Q = {:>7.4}  row 0 = {:?}  Σ P·1 = {:.4}",
            format!("{mode:?}"),
            out.info.q,
            out.scaled.row(0).iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            jvp.iter().sum::<f64>()
        );
    }
    Ok(())
}
