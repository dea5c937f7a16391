//! The multilinear extension `F̃(ψ) = E_{S∼q(ψ)}[F(S)]` and its derivatives.
//!
//! Small ground sets are handled exactly by enumeration. Larger ones use
//! Monte Carlo estimators built on frozen common random numbers so that the
//! forward solve and the backward pass see the same sampled function.

mod estimator;
mod exact;
mod scaling;

pub use estimator::{
    mc_grad, mc_hessian, pinned_pair_hessian, ExactEstimator, FrozenSamples, GradPlan, GradTape, GradientEstimator,
    SampledEstimator,
};
pub use exact::{exact_grad, exact_hessian, exact_value, value_table, ENUMERATION_LIMIT};
pub use scaling::{scale_gradient, ScaleInfo, ScaledBatch};


use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variational inclusion probabilities, one per item.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldState {
    psi: Vec<f64>,
}

impl MeanFieldState {
    pub fn new(psi: Vec<f64>) -> Result<Self> {
        if let Some((i, p)) = psi.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("ψ[{i}] = {p} is not a probability")));
        }
        Ok(Self { psi })
    }

    /// The default starting point `0.5·1`.
    pub fn uniform(n: usize) -> Self {
        Self { psi: vec![0.5; n] }
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.psi
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.psi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Base subsets `m` drawn per gradient estimate.
    pub samples: usize,
    pub seed: u64,
    /// Pair every odd draw with the mirror `1 − U` of the previous one.
    pub antithetic: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            samples: 8,
            seed: 0,
            antithetic: false,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::invalid("estimator needs at least one sample"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    None,
    Constant,
    Frobenius,
    Nuclear,
}

/// Gradient rescaling `ψ = σ(2∇F̃ / (|V|·Q))` applied inside the fixed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub mode: ScalingMode,
    /// `Q` in constant mode.
    pub constant: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            mode: ScalingMode::Frobenius,
            constant: 1.0,
        }
    }
}

impl ScalingConfig {
    pub fn none() -> Self {
        Self {
            mode: ScalingMode::None,
            constant: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == ScalingMode::Constant && !(self.constant > 0.0 && self.constant.is_finite()) {
            return Err(Error::invalid(format!(
                "scaling constant must be positive, got {}",
                self.constant
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_validation() {
        assert!(MeanFieldState::new(vec![0.0, 1.0, 0.3]).is_ok());
        assert!(MeanFieldState::new(vec![1.1]).is_err());
        assert!(MeanFieldState::new(vec![f64::NAN]).is_err());
        assert_eq!(MeanFieldState::uniform(3).as_slice(), &[0.5; 3]);
    }

    #[test]
    fn config_validation() {
        let bad = EstimatorConfig {
            samples: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let c = ScalingConfig {
            mode: ScalingMode::Constant,
            constant: 0.0,
        };
        assert!(c.validate().is_err());
        let c = ScalingConfig {
            mode: ScalingMode::Frobenius,
            constant: 0.0,
        };
        assert!(c.validate().is_ok());
    }
}
