//! Train on a small Gaussian problem with implicit gradients and report the
//! test Jaccard coefficient in both inference modes.

use implicit_meanfield::data::gen_gaussian;
use implicit_meanfield::eval::{mean_jc, InferenceConfig, InferenceMode};
use implicit_meanfield::multilinear::EstimatorConfig;
use implicit_meanfield::train::{train_with, TrainConfig};

fn main() -> implicit_meanfield::Result<()> {
    let (train, test) = gen_gaussian(300, 30, 5, 1)?.split()?;
    let mut cfg = TrainConfig {
        batch_size: 32,
        epochs: 3,
        estimator: EstimatorConfig { samples: 1, ..Default::default() },
        ..Default::default()
    };
    cfg.optimizer.learning_rate = 3e-3;
    let (model, _) = train_with(&train, &cfg, None, |e| {
        println!("epoch {}  loss {:.4}  {:.1}s", e.epoch, e.mean_loss, e.wall_seconds)
    })?;
    for mode in [InferenceMode::OneStep, InferenceMode::Converge] {
        let m = mean_jc(&model, &test, &InferenceConfig::from_train(&cfg, mode))?;
        println!("test JC ({mode}): {:.4}", m.mean_jc);
    }
    Ok(())
}
