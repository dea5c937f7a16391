//! Batch-level gradient rescaling `a = 2G / (|V|·Q)` and its Jacobian.

use nalgebra::DMatrix;

use crate::diffcore::{dot, Tensor};
use crate::error::{Error, Result};

use super::{ScalingConfig, ScalingMode};

/// Everything needed to apply the rescaling Jacobian after the fact.
///
/// With `s = 2/(|V|·Q)` and `D = ∂Q/∂G`, the Jacobian of `a` with respect to
/// `G` acts as `P(x) = s·(x − ⟨D,x⟩/Q · G)` and its transpose as
/// `Pᵀ(y) = s·(y − ⟨G,y⟩/Q · D)`.
#[derive(Debug, Clone)]
pub struct ScaleInfo {
    pub mode: ScalingMode,
    /// The norm `Q` (or constant), 0 for mode none.
    pub q: f64,
    /// Set when `Q = 0` and the gradient was passed through unchanged.
    pub degenerate: bool,
    multiplier: f64,
    grad: Option<Tensor>,
    norm_grad: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ScaledBatch {
    pub scaled: Tensor,
    pub info: ScaleInfo,
}

impl ScaleInfo {
    /// `s`, the factor multiplying the gradient (1 when unscaled).
    pub fn multiplier(&self) -> f64 {
        self.multiplier
    }

    fn passthrough(mode: ScalingMode, q: f64, degenerate: bool) -> Self {
        Self {
            mode,
            q,
            degenerate,
            multiplier: 1.0,
            grad: None,
            norm_grad: None,
        }
    }

    /// `P(x)` for a flattened batch direction `x`.
    pub fn jvp(&self, x: &[f64]) -> Vec<f64> {
        let s = self.multiplier;
        match (&self.grad, &self.norm_grad) {
            (Some(g), Some(d)) => {
                let k = dot(d.data(), x) / self.q;
                x.iter().zip(g.data()).map(|(xi, gi)| s * (xi - k * gi)).collect()
            }
            _ => x.iter().map(|xi| s * xi).collect(),
        }
    }

    /// `Pᵀ(y)` for a flattened batch cotangent `y`.
    pub fn vjp(&self, y: &[f64]) -> Vec<f64> {
        let s = self.multiplier;
        match (&self.grad, &self.norm_grad) {
            (Some(g), Some(d)) => {
                let k = dot(g.data(), y) / self.q;
                y.iter().zip(d.data()).map(|(yi, di)| s * (yi - k * di)).collect()
            }
            _ => y.iter().map(|yi| s * yi).collect(),
        }
    }

    pub fn bytes(&self) -> usize {
        let t = |t: &Option<Tensor>| t.as_ref().map_or(0, |t| t.len() * 8);
        t(&self.grad) + t(&self.norm_grad)
    }
}

/// Nuclear norm and its gradient `U·Vᵀ` over the nonzero singular values.
fn nuclear(g: &Tensor) -> (f64, Tensor) {
    let (r, c) = (g.rows(), g.cols());
    let svd = DMatrix::from_row_slice(r, c, g.data()).svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = 1e-12 * smax.max(f64::MIN_POSITIVE);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    let mut q = 0.0;
    let mut d = DMatrix::<f64>::zeros(r, c);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        q += s;
        if s > cutoff {
            d += u.column(k) * vt.row(k);
        }
    }
    let data = (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| d[(i, j)]).collect();
    (q, Tensor::from_parts(vec![r, c], data))
}

/// Rescales a `batch × |V|` gradient matrix by `2/(|V|·Q)`.
pub fn scale_gradient(
    grad_batch: &Tensor,
    cfg: &ScalingConfig,
    ground_set_size: usize,
) -> Result<ScaledBatch> {
    cfg.validate()?;
    if grad_batch.shape().len() != 2 || grad_batch.cols() != ground_set_size {
        return Err(Error::shape(format!(
            "expected a batch × {ground_set_size} gradient matrix, got {:?}",
            grad_batch.shape()
        )));
    }
    let c = 2.0 / ground_set_size as f64;
    let (q, norm_grad) = match cfg.mode {
        ScalingMode::None => {
            return Ok(ScaledBatch {
                scaled: grad_batch.clone(),
                info: ScaleInfo::passthrough(ScalingMode::None, 0.0, false),
            })
        }
        ScalingMode::Constant => (cfg.constant, None),
        ScalingMode::Frobenius => {
            let q = grad_batch.frobenius_norm();
            let d = grad_batch.data().iter().map(|g| g / q).collect();
            (q, Some(Tensor::from_parts(grad_batch.shape().to_vec(), d)))
        }
        ScalingMode::Nuclear => {
            let (q, d) = nuclear(grad_batch);
            (q, Some(d))
        }
    };
    if !(q > 0.0) {
        return Ok(ScaledBatch {
            scaled: grad_batch.clone(),
            info: ScaleInfo::passthrough(cfg.mode, 0.0, true),
        });
    }
    let s = c / q;
    let scaled = Tensor::new(
        grad_batch.shape().to_vec(),
        grad_batch.data().iter().map(|g| s * g).collect(),
    )?;
    Ok(ScaledBatch {
        scaled,
        info: ScaleInfo {
            mode: cfg.mode,
            q,
            degenerate: false,
            multiplier: s,
            grad: norm_grad.as_ref().map(|_| grad_batch.clone()),
            norm_grad,
        },
    })
}
