//! A small reverse-mode differentiation engine over dense `f64` arrays.
//!
//! The primitive set is closed: affine maps, ReLU, masked sum-pooling,
//! elementwise add/mul and a full reduction. That is exactly what the set
//! function network needs, and nothing more. Gradients are only taken with
//! respect to parameters; inputs are treated as constants.

mod params;
mod record;
mod tensor;

pub use params::{ParamVector, Segment};
pub use record::{
    forward_eval, param_vjp, ComputationRecord, InputSpec, Op, RecordBuilder, Slot, Tape,
};
pub use tensor::{dot, norm2, norm_inf, Tensor};


use crate::error::{Error, Result};

/// Central-difference gradient `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h` per coordinate.
///
/// Used as an independent oracle in tests and in the verification suite.
pub fn finite_diff_grad<F>(mut f: F, point: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut x = point.clone();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + step;
        let up = f(&x);
        x.data_mut()[i] = orig - step;
        let down = f(&x);
        x.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    Tensor::new(point.shape().to_vec(), grad)
}
