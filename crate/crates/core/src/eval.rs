//! Inference by top-k rounding, Jaccard metrics, brute-force oracles and the
//! retained-memory profiler.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SetSample};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::fixedpoint::{SolverConfig, SolverMethod};
use crate::implicit::BatchProblem;
use crate::multilinear::{
    value_table, EstimatorConfig, ExactEstimator, FrozenSamples, GradientEstimator,
    SampledEstimator, ScalingConfig,
};
use crate::setfn::{SetFunction, SetFunctionModel};
use crate::train::{batch_gradient, GradientMode, TrainConfig};

/// Largest ground set [`brute_force_oracle`] enumerates.
pub const ORACLE_LIMIT: usize = 15;

/// Stream offset that keeps inference samples disjoint from training ones.
const INFERENCE_STREAM: u64 = 1 << 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    /// A single map application from ψ = 0.5.
    OneStep,
    /// Iterate to the solver tolerance.
    Converge,
}

impl std::fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::OneStep => "one-step",
            Self::Converge => "converge",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    pub exact_gradients: bool,
    pub estimator: EstimatorConfig,
    pub solver: SolverConfig,
    pub scaling: ScalingConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mode: InferenceMode::Converge,
            exact_gradients: false,
            estimator: EstimatorConfig::default(),
            solver: SolverConfig::default(),
            scaling: ScalingConfig::default(),
        }
    }
}

impl InferenceConfig {
    /// Mirrors the estimator, solver and scaling a model was trained with.
    pub fn from_train(cfg: &TrainConfig, mode: InferenceMode) -> Self {
        Self {
            mode,
            exact_gradients: cfg.exact_gradients,
            estimator: cfg.estimator.clone(),
            solver: cfg.solver.clone(),
            scaling: cfg.scaling.clone(),
        }
    }
}

/// Indices of the `k` largest entries, ties to the lower index, sorted.
pub fn top_k(psi: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > psi.len() {
        return Err(Error::invalid(format!(
            "k = {k} outside 1..={}",
            psi.len()
        )));
    }
    let mut idx: Vec<usize> = (0..psi.len()).collect();
    idx.sort_by(|&a, &b| psi[b].total_cmp(&psi[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Mean-field state used for rounding; `stream` selects the frozen samples.
pub fn infer_state(
    model: &SetFunctionModel,
    features: &Tensor,
    cfg: &InferenceConfig,
    stream: u64,
) -> Result<Vec<f64>> {
    let n = features.shape()[0];
    let est: Box<dyn GradientEstimator + '_> = if cfg.exact_gradients {
        Box::new(ExactEstimator::new(model, features)?)
    } else {
        let frozen = FrozenSamples::draw(n, &cfg.estimator, INFERENCE_STREAM | stream)?;
        Box::new(SampledEstimator::new(model, features, frozen)?)
    };
    let problem = BatchProblem::new(vec![est], cfg.scaling.clone())?;
    let solver = match cfg.mode {
        InferenceMode::OneStep => SolverConfig {
            method: SolverMethod::Fpi,
            max_iterations: 1,
            tolerance: f64::MIN_POSITIVE,
            damping: 0.0,
            ..cfg.solver.clone()
        },
        InferenceMode::Converge => cfg.solver.clone(),
    };
    Ok(problem.solve(None, &solver)?.psi.into_vec())
}

pub fn infer_subset(
    model: &SetFunctionModel,
    features: &Tensor,
    k: usize,
    cfg: &InferenceConfig,
    stream: u64,
) -> Result<Vec<usize>> {
    if k == 0 || k > features.shape()[0] {
        return Err(Error::invalid(format!("k = {k} outside 1..={}", features.shape()[0])));
    }
    top_k(&infer_state(model, features, cfg, stream)?, k)
}

/// `|a∩b| / |a∪b|` over index sets; two empty sets give 1.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: std::collections::BTreeSet<_> = a.iter().collect();
    let b: std::collections::BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mean_jc: f64,
    pub per_sample: Vec<f64>,
    pub mode: InferenceMode,
}

/// Mean Jaccard over a dataset with `k = |S*|` per sample.
pub fn mean_jc(model: &SetFunctionModel, dataset: &Dataset, cfg: &InferenceConfig) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let per_sample: Vec<f64> = dataset
        .samples()
        .par_iter()
        .enumerate()
        .map(|(i, s): (usize, &SetSample)| {
            let pred = infer_subset(model, s.features(), s.optimal().len(), cfg, i as u64)?;
            Ok(jaccard(&pred, s.optimal()))
        })
        .collect::<Result<_>>()?;
    Ok(Metrics {
        mean_jc: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        per_sample,
        mode: cfg.mode,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// Maximizing subset as sorted indices.
    pub argmax: Vec<usize>,
    /// Bitmask of the maximizer.
    pub argmax_mask: u64,
    /// `exp F(S) / Σ exp F` indexed by bitmask.
    pub probabilities: Vec<f64>,
}

pub fn brute_force_oracle(f: &dyn SetFunction) -> Result<OracleResult> {
    let n = f.ground_size();
    if n > ORACLE_LIMIT {
        return Err(Error::GroundSetTooLarge {
            size: n,
            limit: ORACLE_LIMIT,
        });
    }
    let table = value_table(f)?;
    if let Some(i) = table.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("set function value at mask {i}")));
    }
    // strict comparison keeps the smallest mask among ties
    let mut best = 0;
    for (i, &v) in table.iter().enumerate() {
        if v > table[best] {
            best = i;
        }
    }
    let max = table[best];
    let z: f64 = table.iter().map(|v| (v - max).exp()).sum();
    let probabilities = table.iter().map(|v| (v - max).exp() / z).collect();
    Ok(OracleResult {
        argmax: (0..n).filter(|i| best >> i & 1 == 1).collect(),
        argmax_mask: best as u64,
        probabilities,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ByteStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl ByteStats {
    fn of(xs: &[usize]) -> Self {
        let min = *xs.iter().min().unwrap_or(&0) as f64;
        let max = *xs.iter().max().unwrap_or(&0) as f64;
        let mean = xs.iter().sum::<usize>() as f64 / xs.len().max(1) as f64;
        Self { min, mean, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionProfile {
    pub k: Vec<usize>,
    pub unrolled: Vec<ByteStats>,
    pub implicit: Vec<ByteStats>,
}

impl RetentionProfile {
    /// Largest over smallest mean retention for a mode.
    pub fn spread(series: &[ByteStats]) -> f64 {
        let max = series.iter().map(|s| s.mean).fold(f64::MIN, f64::max);
        let min = series.iter().map(|s| s.mean).fold(f64::MAX, f64::min);
        max / min
    }
}

/// Least-squares line through `(x, y)`: returns `(slope, intercept, R²)`.
pub fn affine_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("affine fit needs two or more paired points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("affine fit needs distinct x values"));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok((slope, my - slope * mx, r2))
}

/// Retained bytes of one training step per `K` and gradient mode.
///
/// Unrolled mode records `K` layers; implicit mode runs `K` solver
/// iterations before its single linear solve. Each point is repeated over
/// `repeats` batches drawn with different frozen samples.
pub fn retention_profile(
    model: &SetFunctionModel,
    batch: &[&SetSample],
    cfg: &TrainConfig,
    k_list: &[usize],
    repeats: usize,
) -> Result<RetentionProfile> {
    if k_list.is_empty() {
        return Err(Error::invalid("K list is empty"));
    }
    if k_list.windows(2).any(|w| w[0] >= w[1]) || k_list[0] == 0 {
        return Err(Error::invalid("K list must be positive and strictly increasing"));
    }
    if batch.is_empty() || repeats == 0 {
        return Err(Error::invalid("profiling needs a batch and at least one repeat"));
    }
    let mut profile = RetentionProfile {
        k: k_list.to_vec(),
        unrolled: Vec::new(),
        implicit: Vec::new(),
    };
    for &k in k_list {
        for mode in [GradientMode::Unrolled, GradientMode::Implicit] {
            let run = TrainConfig {
                gradient: mode,
                unroll_steps: k,
                solver: SolverConfig {
                    max_iterations: k,
                    tolerance: f64::MIN_POSITIVE,
                    ..cfg.solver.clone()
                },
                ..cfg.clone()
            };
            let bytes = (0..repeats)
                .map(|r| Ok(batch_gradient(model, batch, &run, r as u64)?.retained_bytes))
                .collect::<Result<Vec<_>>>()?;
            let stats = ByteStats::of(&bytes);
            match mode {
                GradientMode::Unrolled => profile.unrolled.push(stats),
                GradientMode::Implicit => profile.implicit.push(stats),
            }
        }
    }
    Ok(profile)
}
