//! The unrolled baseline: a fixed number of recorded iterations per step,
//! compared with implicit training on the same data and seed.

use implicit_meanfield::data::gen_gaussian;
use implicit_meanfield::eval::{mean_jc, InferenceConfig, InferenceMode};
use implicit_meanfield::multilinear::EstimatorConfig;
use implicit_meanfield::train::{train, GradientMode, TrainConfig};

fn main() -> implicit_meanfield::Result<()> {
    let (tr, te) = gen_gaussian(150, 20, 4, 3)?.split()?;
    for (gradient, steps) in [(GradientMode::Unrolled, 5), (GradientMode::Implicit, 0)] {
        let mut cfg = TrainConfig {
            batch_size: 16,
            epochs: 2,
            gradient,
            unroll_steps: steps.max(1),
            estimator: EstimatorConfig { samples: 1, ..Default::default() },
            ..Default::default()
        };
        cfg.optimizer.learning_rate = 3e-3;
        let start = std::time::Instant::now();
        let (model, hist) = train(&tr, &cfg)?;
        let jc = mean_jc(&model, &te, &InferenceConfig::from_train(&cfg, InferenceMode::Converge))?.mean_jc;
        println!(
            "{gradient:?}: final loss {:.4}, test JC {jc:.4}, {:.1}s",
            hist.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
