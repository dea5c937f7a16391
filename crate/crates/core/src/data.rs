//! Synthetic (V, S*) datasets and their line-delimited file format.
//!
//! Each sample draws a class, places `|S*|` points from that class and the
//! remaining `|V| − |S*|` points from the other one, then shuffles the item
//! order. The optimal subset is the set of positions holding the first group.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Train share of the 2:1 train/test split.
pub const TRAIN_FRACTION: f64 = 2.0 / 3.0;

/// Standard deviation matching a per-coordinate noise variance of 0.1.
pub fn default_moons_noise() -> f64 {
    0.1f64.sqrt()
}

/// One ground set with its optimal subset.
#[derive(Debug, Clone, PartialEq)]
pub struct SetSample {
    features: Tensor,
    optimal: Vec<usize>,
}

impl SetSample {
    /// Validates that `optimal` is a nonempty set of in-range indices; the
    /// stored copy is sorted.
    pub fn new(features: Tensor, mut optimal: Vec<usize>) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() == 0 || features.cols() == 0 {
            return Err(Error::shape("features must be a nonempty |V| × d_f matrix"));
        }
        let n = features.rows();
        optimal.sort_unstable();
        if optimal.is_empty() {
            return Err(Error::invalid("optimal subset is empty"));
        }
        if optimal.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("optimal subset has duplicate indices"));
        }
        if let Some(&i) = optimal.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("optimal index {i} out of range for |V| = {n}")));
        }
        Ok(Self { features, optimal })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn optimal(&self) -> &[usize] {
        &self.optimal
    }

    pub fn ground_size(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.ground_size()];
        for &i in &self.optimal {
            m[i] = true;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub version: u32,
    pub name: String,
    pub d_f: usize,
    /// `None` when ground sets vary in size.
    pub ground_size: Option<usize>,
    pub seed: u64,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    samples: Vec<SetSample>,
}

impl Dataset {
    pub fn new(meta: DatasetMeta, samples: Vec<SetSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("dataset has no samples"));
        }
        for (k, s) in samples.iter().enumerate() {
            if s.feature_dim() != meta.d_f {
                return Err(Error::shape(format!(
                    "sample {k} has d_f = {}, dataset declares {}",
                    s.feature_dim(),
                    meta.d_f
                )));
            }
            if let Some(n) = meta.ground_size {
                if s.ground_size() != n {
                    return Err(Error::shape(format!(
                        "sample {k} has |V| = {}, dataset declares {n}",
                        s.ground_size()
                    )));
                }
            }
        }
        Ok(Self { meta, samples })
    }

    pub fn samples(&self) -> &[SetSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `round(2N/3)` samples as train, the rest as test.
    pub fn split(&self) -> Result<(Dataset, Dataset)> {
        let cut = (self.len() as f64 * TRAIN_FRACTION).round() as usize;
        if cut == 0 || cut == self.len() {
            return Err(Error::invalid(format!("{} samples are too few to split 2:1", self.len())));
        }
        let part = |split: &str, samples: &[SetSample]| {
            Dataset::new(
                DatasetMeta {
                    split: split.into(),
                    ..self.meta.clone()
                },
                samples.to_vec(),
            )
        };
        Ok((part("train", &self.samples[..cut])?, part("test", &self.samples[cut..])?))
    }

    /// The first `count` samples (all of them if fewer).
    pub fn head(&self, count: usize) -> Result<Dataset> {
        Dataset::new(self.meta.clone(), self.samples[..count.min(self.len())].to_vec())
    }
}

fn check_sizes(n_samples: usize, ground_size: usize, optimal_size: usize) -> Result<()> {
    if n_samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    if optimal_size == 0 || optimal_size >= ground_size {
        return Err(Error::invalid(format!(
            "optimal size must be in [1, {ground_size}), got {optimal_size}"
        )));
    }
    Ok(())
}

fn build(
    name: &str,
    n_samples: usize,
    ground_size: usize,
    optimal_size: usize,
    seed: u64,
    mut point: impl FnMut(&mut ChaCha8Rng, usize) -> [f64; 2],
) -> Result<Dataset> {
    check_sizes(n_samples, ground_size, optimal_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let class = rng.random_range(0..2usize);
        let mut items: Vec<([f64; 2], bool)> = (0..ground_size)
            .map(|k| {
                let inside = k < optimal_size;
                let c = if inside { class } else { 1 - class };
                (point(&mut rng, c), inside)
            })
            .collect();
        items.shuffle(&mut rng);
        let optimal = items.iter().enumerate().filter(|(_, it)| it.1).map(|(i, _)| i).collect();
        let data = items.iter().flat_map(|(p, _)| *p).collect();
        samples.push(SetSample::new(Tensor::new(vec![ground_size, 2], data)?, optimal)?);
    }
    Dataset::new(
        DatasetMeta {
            version: FORMAT_VERSION,
            name: name.into(),
            d_f: 2,
            ground_size: Some(ground_size),
            seed,
            split: "full".into(),
        },
        samples,
    )
}

/// Two Gaussians with means `±(1/√2, 1/√2)` and covariance `I/4`.
pub fn gen_gaussian(
    n_samples: usize,
    ground_size: usize,
    optimal_size: usize,
    seed: u64,
) -> Result<Dataset> {
    let mu = std::f64::consts::FRAC_1_SQRT_2;
    let normal = Normal::new(0.0, 0.5).expect("valid std");
    build("gaussian", n_samples, ground_size, optimal_size, seed, |rng, c| {
        let m = if c == 0 { mu } else { -mu };
        [m + normal.sample(rng), m + normal.sample(rng)]
    })
}

/// Two interleaving half circles: `(cos t, sin t)` and
/// `(1 − cos t, 0.5 − sin t)` with `t ∼ U[0, π]`, plus isotropic noise.
pub fn gen_moons(
    n_samples: usize,
    ground_size: usize,
    optimal_size: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!("noise std must be nonnegative, got {noise_std}")));
    }
    let normal = Normal::new(0.0, noise_std).expect("valid std");
    build("moons", n_samples, ground_size, optimal_size, seed, |rng, c| {
        let t = rng.random_range(0.0..=std::f64::consts::PI);
        let (x, y) = if c == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        [x + normal.sample(rng), y + normal.sample(rng)]
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    features: Vec<Vec<f64>>,
    optimal: Vec<usize>,
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &dataset.meta).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w)?;
    for s in &dataset.samples {
        let rec = Record {
            features: (0..s.ground_size()).map(|r| s.features.row(r).to_vec()).collect(),
            optimal: s.optimal.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, message: String| Error::Parse { line, message };
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file, expected a metadata header".into()))?;
    let meta: DatasetMeta =
        serde_json::from_str(&header?).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if meta.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "dataset format version {} is not supported (expected {FORMAT_VERSION})",
            meta.version
        )));
    }
    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        let n = rec.features.len();
        if rec.features.iter().any(|r| r.len() != meta.d_f) {
            return Err(parse_err(line_no, format!("feature rows must have d_f = {} entries", meta.d_f)));
        }
        if let Some(g) = meta.ground_size {
            if n != g {
                return Err(parse_err(line_no, format!("|V| = {n}, header declares {g}")));
            }
        }
        let features = Tensor::new(vec![n, meta.d_f], rec.features.concat())
            .map_err(|e| parse_err(line_no, e.to_string()))?;
        let sample =
            SetSample::new(features, rec.optimal).map_err(|e| parse_err(line_no, e.to_string()))?;
        samples.push(sample);
    }
    Dataset::new(meta, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimal_size_and_determinism() {
        let a = gen_gaussian(20, 12, 3, 7).unwrap();
        assert!(a.samples().iter().all(|s| s.optimal().len() == 3 && s.ground_size() == 12));
        assert_eq!(a, gen_gaussian(20, 12, 3, 7).unwrap());
        assert_ne!(a, gen_gaussian(20, 12, 3, 8).unwrap());
        let m = gen_moons(5, 100, 10, default_moons_noise(), 1).unwrap();
        assert!(m.samples().iter().all(|s| s.optimal().len() == 10));
    }

    #[test]
    fn invalid_sizes() {
        assert!(gen_gaussian(10, 5, 5, 0).is_err());
        assert!(gen_gaussian(10, 5, 0, 0).is_err());
        assert!(gen_gaussian(0, 5, 2, 0).is_err());
        assert!(gen_moons(10, 5, 2, -1.0, 0).is_err());
    }

    #[test]
    fn noiseless_moons_lie_on_curves_and_are_pure() {
        let ds = gen_moons(30, 20, 6, 0.0, 3).unwrap();
        for s in ds.samples() {
            let mask = s.mask();
            let outer = |r: &[f64]| ((r[0] * r[0] + r[1] * r[1]) - 1.0).abs() < 1e-12 && r[1] >= -1e-12;
            let inner = |r: &[f64]| {
                let (x, y) = (1.0 - r[0], 0.5 - r[1]);
                (x * x + y * y - 1.0).abs() < 1e-12 && y >= -1e-12
            };
            let on_outer: Vec<bool> = (0..20).map(|i| outer(s.features().row(i))).collect();
            for i in 0..20 {
                assert!(on_outer[i] || inner(s.features().row(i)));
            }
            let first = on_outer[s.optimal()[0]];
            for i in 0..20 {
                // members of S* share a moon, the rest sit on the other one
                assert_eq!(on_outer[i] == first, mask[i]);
            }
        }
    }

    #[test]
    fn gaussian_classes_are_separated_by_membership() {
        let ds = gen_gaussian(200, 10, 4, 2).unwrap();
        let n = ds.len();
        let sign_agree = ds
            .samples()
            .iter()
            .filter(|s| {
                let m = s.mask();
                let a: f64 = (0..10).filter(|&i| m[i]).map(|i| s.features().get(i, 0)).sum();
                let b: f64 = (0..10).filter(|&i| !m[i]).map(|i| s.features().get(i, 0)).sum();
                a.signum() != b.signum()
            })
            .count();
        assert!(sign_agree as f64 > 0.9 * n as f64);
    }

    #[test]
    fn split_ratio() {
        let ds = gen_gaussian(300, 6, 2, 1).unwrap();
        let (tr, te) = ds.split().unwrap();
        assert_eq!((tr.len(), te.len()), (200, 100));
        assert_eq!(tr.meta.split, "train");
        let ds = gen_gaussian(1000, 4, 1, 1).unwrap();
        let (tr, te) = ds.split().unwrap();
        assert_eq!((tr.len(), te.len()), (667, 333));
    }

    #[test]
    fn roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = gen_moons(10, 7, 2, 0.3, 5).unwrap();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);

        let text = std::fs::read_to_string(&path).unwrap();
        let truncated = &text[..text.len() - 20];
        std::fs::write(&path, truncated).unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 11),
            other => panic!("expected parse error, got {other:?}"),
        }

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = r#"{"features":[[1,2,3],[1,2,3],[1,2,3],[1,2,3],[1,2,3],[1,2,3],[1,2,3]],"optimal":[0]}"#.into();
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Parse { line: 4, .. })));

        lines[0] = lines[0].replace("\"version\":1", "\"version\":9");
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));
    }

    #[test]
    fn sample_validation() {
        let f = Tensor::zeros(&[3, 2]);
        assert!(SetSample::new(f.clone(), vec![]).is_err());
        assert!(SetSample::new(f.clone(), vec![1, 1]).is_err());
        assert!(SetSample::new(f.clone(), vec![3]).is_err());
        assert_eq!(SetSample::new(f, vec![2, 0]).unwrap().optimal(), &[0, 2]);
    }
}
