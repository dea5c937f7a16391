//! Exhaustive argmax and Boltzmann table for a tiny ground set, and the
//! invariance of the argmax under rescaling of F.

use implicit_meanfield::diffcore::Tensor;
use implicit_meanfield::eval::brute_force_oracle;
use implicit_meanfield::setfn::{Architecture, BoundModel, SetFunctionModel};

fn main() -> implicit_meanfield::Result<()> {
    let n = 8;
    let features = Tensor::new(vec![n, 2], (0..2 * n).map(|i| ((i * 13) % 9) as f64 / 4.0 - 1.0).collect())?;
    let model = SetFunctionModel::init(Architecture { init_width: 16, hidden_width: 16, ..Architecture::standard(2) }, 4)?;
    for c in [0.1, 1.0, 10.0, 100.0] {
        let scaled = model.scaled_output(c)?;
        let r = brute_force_oracle(&BoundModel::new(&scaled, &features)?)?;
        let p_max = r.probabilities[r.argmax_mask as usize];
        println!("scale {c:>5}: argmax {:?}  p(argmax) = {p_max:.4}", r.argmax);
    }
    Ok(())
}
