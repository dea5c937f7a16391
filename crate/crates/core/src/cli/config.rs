//! Run configuration: a TOML file where every field has a default, with
//! command-line flags applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{default_moons_noise, gen_gaussian, gen_moons, Dataset};
use crate::error::{Error, Result};
use crate::eval::InferenceMode;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Gaussian,
    Moons,
}

impl std::str::FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "moons" => Ok(Self::Moons),
            other => Err(Error::invalid(format!(
                "unknown dataset `{other}` (expected gaussian or moons)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: Generator,
    /// Number of (ground set, optimal subset) pairs before splitting.
    pub size: usize,
    pub ground_size: usize,
    pub subset_size: usize,
    /// Moons noise standard deviation.
    pub noise: f64,
    /// Training split; defaults to `<out>/train.jsonl`.
    pub train: Option<PathBuf>,
    /// Test split; defaults to `<out>/test.jsonl`.
    pub test: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: Generator::Gaussian,
            size: 1000,
            ground_size: 100,
            subset_size: 10,
            noise: default_moons_noise(),
            train: None,
            test: None,
        }
    }
}

impl DataConfig {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        match self.dataset {
            Generator::Gaussian => gen_gaussian(self.size, self.ground_size, self.subset_size, seed),
            Generator::Moons => {
                gen_moons(self.size, self.ground_size, self.subset_size, self.noise, seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: InferenceMode,
    /// Monte Carlo samples per gradient estimate at inference.
    pub samples: usize,
    /// Exit with the metric-failure code when mean JC falls below this.
    pub min_jc: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: InferenceMode::Converge,
            samples: 8,
            min_jc: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub k_list: Vec<usize>,
    pub repeats: usize,
    /// Ground sets per profiled batch.
    pub batch_size: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            k_list: vec![5, 10, 20, 40],
            repeats: 2,
            batch_size: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Random instances per randomized check.
    pub instances: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { instances: 3 }
    }
}

/// Everything a command needs. `seed` overrides `train.seed` on resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies the derived fields and validates everything.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.train.validate()?;
        if self.data.subset_size == 0 || self.data.subset_size >= self.data.ground_size {
            return Err(Error::invalid("data.subset_size must lie in 1..ground_size"));
        }
        if self.data.size < 3 {
            return Err(Error::invalid("data.size must be at least 3"));
        }
        if self.eval.samples == 0 {
            return Err(Error::invalid("eval.samples must be positive"));
        }
        if self.bench.k_list.is_empty() || self.bench.repeats == 0 || self.bench.batch_size == 0 {
            return Err(Error::invalid("bench needs a K list, repeats and a batch size"));
        }
        for p in [&self.data.train, &self.data.test].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::invalid(format!("data file {} does not exist", p.display())));
            }
        }
        Ok(self)
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn train_path(&self) -> PathBuf {
        self.data.train.clone().unwrap_or_else(|| self.out.join("train.jsonl"))
    }

    pub fn test_path(&self) -> PathBuf {
        self.data.test.clone().unwrap_or_else(|| self.out.join("test.jsonl"))
    }
}
