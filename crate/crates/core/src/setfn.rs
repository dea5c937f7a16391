//! The permutation-invariant set utility `F_θ(S, V)`.
//!
//! Every item is embedded by a dataset-specific init layer, the embeddings of
//! the items in `S` are sum-pooled, and an MLP head maps the pooled vector to
//! a scalar. Sum-pooling makes the value independent of item order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ComputationRecord, ParamVector, RecordBuilder, Tape, Tensor};
use crate::error::{Error, Result};

/// Rows evaluated per forward call; bounds activation memory for large plans.
const EVAL_CHUNK: usize = 2048;

/// Layer sizes of the set network.
///
/// `depth` counts the ReLU layers of the head: depth 2 is
/// `FC(init, hidden) → FC(hidden, hidden) → FC(hidden, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub feature_dim: usize,
    pub init_width: usize,
    pub hidden_width: usize,
    pub depth: usize,
}

impl Architecture {
    /// The synthetic-data architecture: `FC(d_f, 256)` init layer, 500-wide head.
    pub fn standard(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            init_width: 256,
            hidden_width: 500,
            depth: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if self.init_width == 0 || self.hidden_width == 0 {
            return Err(Error::invalid("layer widths must be at least 1"));
        }
        if !(2..=3).contains(&self.depth) {
            return Err(Error::invalid(format!(
                "unsupported depth {} (expected 2 or 3)",
                self.depth
            )));
        }
        Ok(())
    }

    /// `(name, out, in)` for every fully connected layer, in order.
    pub fn layers(&self) -> Vec<(String, usize, usize)> {
        let mut layers = vec![("init".to_string(), self.init_width, self.feature_dim)];
        let mut width_in = self.init_width;
        for i in 0..self.depth {
            layers.push((format!("hidden{i}"), self.hidden_width, width_in));
            width_in = self.hidden_width;
        }
        layers.push(("out".to_string(), 1, width_in));
        layers
    }

    fn record(&self) -> Result<ComputationRecord> {
        let mut b = RecordBuilder::new();
        let features = b.input("features", 2, Some(self.feature_dim));
        let masks = b.input("masks", 2, None);
        let embedded = b.affine(features, "init.weight", Some("init.bias"));
        let mut h = b.sum_pool(masks, embedded);
        for i in 0..self.depth {
            let w = format!("hidden{i}.weight");
            let bias = format!("hidden{i}.bias");
            h = b.affine(h, &w, Some(&bias));
            h = b.relu(h);
        }
        b.affine(h, "out.weight", Some("out.bias"));
        b.build()
    }
}

/// A subset query against one ground set: item features plus 0/1 masks.
#[derive(Debug, Clone)]
pub struct SubsetBatch {
    features: Tensor,
    masks: Tensor,
}

impl SubsetBatch {
    pub fn new(features: Tensor, masks: Tensor) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::shape("features must be a |V| × d_f matrix"));
        }
        if masks.shape().len() != 2 || masks.cols() != features.rows() {
            return Err(Error::shape(format!(
                "masks {:?} do not match a ground set of {} items",
                masks.shape(),
                features.rows()
            )));
        }
        if masks.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        Ok(Self { features, masks })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn masks(&self) -> &Tensor {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct SetFunctionModel {
    arch: Architecture,
    params: ParamVector,
    record: ComputationRecord,
}

impl SetFunctionModel {
    /// Fan-in uniform initialisation: every weight and bias of a layer with
    /// fan-in `k` is drawn from `U(−1/√k, 1/√k)`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut segments = Vec::new();
        for (name, out, inp) in arch.layers() {
            let bound = 1.0 / (inp as f64).sqrt();
            let w = (0..out * inp).map(|_| rng.random_range(-bound..bound)).collect();
            let b = (0..out).map(|_| rng.random_range(-bound..bound)).collect();
            segments.push((format!("{name}.weight"), Tensor::new(vec![out, inp], w)?));
            segments.push((format!("{name}.bias"), Tensor::new(vec![out], b)?));
        }
        Self::from_params(arch, ParamVector::new(segments)?)
    }

    /// Rebuilds a model from explicit parameters, checking every segment
    /// against the architecture.
    pub fn from_params(arch: Architecture, params: ParamVector) -> Result<Self> {
        arch.validate()?;
        let mut expected = Vec::new();
        for (name, out, inp) in arch.layers() {
            expected.push((format!("{name}.weight"), vec![out, inp]));
            expected.push((format!("{name}.bias"), vec![out]));
        }
        if params.segments().len() != expected.len() {
            return Err(Error::Format(format!(
                "expected {} parameter segments, found {}",
                expected.len(),
                params.segments().len()
            )));
        }
        for (seg, (name, shape)) in params.segments().iter().zip(&expected) {
            if &seg.name != name {
                return Err(Error::Format(format!(
                    "segment `{}` found where `{name}` was expected",
                    seg.name
                )));
            }
            if seg.value.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "segment `{name}` has shape {:?}, expected {:?}",
                    seg.value.shape(),
                    shape
                )));
            }
        }
        let record = arch.record()?;
        Ok(Self {
            arch,
            params,
            record,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn record(&self) -> &ComputationRecord {
        &self.record
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        if !params.same_layout(&self.params) {
            return Err(Error::shape("parameter layout does not match the model"));
        }
        Ok(Self {
            arch: self.arch,
            params,
            record: self.record.clone(),
        })
    }

    pub fn with_flat_params(&self, flat: &[f64]) -> Result<Self> {
        let params = self.params.unflatten(flat)?;
        self.with_params(params)
    }

    /// Multiplies the output layer by `factor`, which scales every `F(S)`
    /// by exactly `factor` (the Boltzmann temperature knob).
    pub fn scaled_output(&self, factor: f64) -> Result<Self> {
        let mut params = self.params.clone();
        for name in ["out.weight", "out.bias"] {
            let idx = params.index_of(name).expect("architecture has an output layer");
            params
                .segment_mut(idx)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= factor);
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("scaled output layer".into()));
        }
        self.with_params(params)
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        if features.shape().len() != 2 || features.cols() != self.arch.feature_dim {
            return Err(Error::shape(format!(
                "features {:?} do not have {} columns",
                features.shape(),
                self.arch.feature_dim
            )));
        }
        Ok(())
    }

    /// `F_θ(S_k, V)` for every mask row `k`.
    pub fn eval_sets(&self, batch: &SubsetBatch) -> Result<Vec<f64>> {
        self.eval_masks(batch.features(), batch.masks())
    }

    pub(crate) fn eval_masks(&self, features: &Tensor, masks: &Tensor) -> Result<Vec<f64>> {
        self.check_features(features)?;
        let mut out = Vec::with_capacity(masks.rows());
        for chunk in mask_chunks(masks) {
            let chunk = chunk?;
            let v = crate::diffcore::forward_eval(&self.record, &self.params, &[features, &chunk])?;
            out.extend_from_slice(v.data());
        }
        Ok(out)
    }

    /// `∇_θ Σ_k weights_k · F_θ(S_k, V)`.
    pub fn param_grad_weighted(&self, batch: &SubsetBatch, weights: &[f64]) -> Result<ParamVector> {
        if weights.len() != batch.len() {
            return Err(Error::shape(format!(
                "{} weights for {} subsets",
                weights.len(),
                batch.len()
            )));
        }
        let tape = self.tape(batch.features(), batch.masks())?;
        tape.param_vjp(weights)
    }

    /// Taped evaluation of every mask row, kept for later reverse sweeps.
    pub fn tape<'a>(&'a self, features: &Tensor, masks: &Tensor) -> Result<SetTape<'a>> {
        self.check_features(features)?;
        let mut chunks = Vec::new();
        for chunk in mask_chunks(masks) {
            let chunk = chunk?;
            chunks.push(Tape::record(&self.record, &self.params, &[features, &chunk])?);
        }
        Ok(SetTape {
            model: self,
            chunks,
            rows: masks.rows(),
        })
    }
}

fn mask_chunks(masks: &Tensor) -> impl Iterator<Item = Result<Tensor>> + '_ {
    let (rows, cols) = (masks.rows(), masks.cols());
    (0..rows.div_ceil(EVAL_CHUNK).max(1)).map(move |c| {
        let start = c * EVAL_CHUNK;
        let end = (start + EVAL_CHUNK).min(rows);
        Tensor::new(
            vec![end - start, cols],
            masks.data()[start * cols..end * cols].to_vec(),
        )
    })
}

/// Retained forward pass over a set of subsets of one ground set.
#[derive(Debug)]
pub struct SetTape<'a> {
    model: &'a SetFunctionModel,
    chunks: Vec<Tape<'a>>,
    rows: usize,
}

impl SetTape<'_> {
    pub fn values(&self) -> Vec<f64> {
        self.chunks
            .iter()
            .flat_map(|t| t.output().data().iter().copied())
            .collect()
    }

    pub fn retained_bytes(&self) -> usize {
        self.chunks.iter().map(Tape::retained_bytes).sum()
    }

    /// `∇_θ Σ_k weights_k · F_θ(S_k)` from the retained activations.
    pub fn param_vjp(&self, weights: &[f64]) -> Result<ParamVector> {
        if weights.len() != self.rows {
            return Err(Error::shape(format!(
                "{} weights for {} subsets",
                weights.len(),
                self.rows
            )));
        }
        let mut grad = self.model.params.zeros_like();
        let mut offset = 0;
        for tape in &self.chunks {
            let n = tape.output().rows();
            let w = &weights[offset..offset + n];
            offset += n;
            if w.iter().all(|&x| x == 0.0) {
                continue;
            }
            let cot = Tensor::new(vec![n, 1], w.to_vec())?;
            grad.axpy(1.0, &tape.param_vjp(&cot)?)?;
        }
        Ok(grad)
    }
}

/// Anything that can score subsets of a fixed ground set.
pub trait SetFunction {
    fn ground_size(&self) -> usize;

    /// Values for every row of an `n × |V|` 0/1 mask matrix.
    fn eval_masks(&self, masks: &Tensor) -> Result<Vec<f64>>;
}

/// A model paired with the features of one ground set.
#[derive(Debug, Clone, Copy)]
pub struct BoundModel<'a> {
    pub model: &'a SetFunctionModel,
    pub features: &'a Tensor,
}

impl<'a> BoundModel<'a> {
    pub fn new(model: &'a SetFunctionModel, features: &'a Tensor) -> Result<Self> {
        model.check_features(features)?;
        Ok(Self { model, features })
    }
}

impl SetFunction for BoundModel<'_> {
    fn ground_size(&self) -> usize {
        self.features.rows()
    }

    fn eval_masks(&self, masks: &Tensor) -> Result<Vec<f64>> {
        self.model.eval_masks(self.features, masks)
    }
}

/// Wraps a closure over membership vectors as a [`SetFunction`].
pub struct FnSetFunction<F> {
    size: usize,
    f: F,
}

impl<F: Fn(&[bool]) -> f64> FnSetFunction<F> {
    pub fn new(size: usize, f: F) -> Self {
        Self { size, f }
    }
}

impl<F: Fn(&[bool]) -> f64> SetFunction for FnSetFunction<F> {
    fn ground_size(&self) -> usize {
        self.size
    }

    fn eval_masks(&self, masks: &Tensor) -> Result<Vec<f64>> {
        if masks.cols() != self.size {
            return Err(Error::shape("mask width does not match ground set"));
        }
        let mut member = vec![false; self.size];
        Ok((0..masks.rows())
            .map(|r| {
                for (m, &v) in member.iter_mut().zip(masks.row(r)) {
                    *m = v != 0.0;
                }
                (self.f)(&member)
            })
            .collect())
    }
}

/// Mask matrix whose row `k` encodes the bits of `subsets[k]`.
pub fn masks_from_bits(n: usize, subsets: impl IntoIterator<Item = u64>) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    for s in subsets {
        data.extend((0..n).map(|i| ((s >> i) & 1) as f64));
        rows += 1;
    }
    Tensor::from_parts(vec![rows, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_grad;
    use rand::seq::SliceRandom;

    fn tiny_arch() -> Architecture {
        Architecture {
            feature_dim: 2,
            init_width: 4,
            hidden_width: 5,
            depth: 2,
        }
    }

    fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_masks(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Tensor {
        let data = (0..k * n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![k, n], data).unwrap()
    }

    #[test]
    fn standard_layer_sizes() {
        let layers = Architecture::standard(2).layers();
        assert_eq!(layers[0], ("init".into(), 256, 2));
        assert!(layers.iter().any(|(_, out, inp)| *out == 500 && *inp == 256));
        assert_eq!(layers.last().unwrap(), &("out".into(), 1, 500));
        let mut deep = Architecture::standard(2);
        deep.depth = 4;
        assert!(SetFunctionModel::init(deep, 0).is_err());
        deep.depth = 3;
        assert_eq!(deep.layers().len(), 5);
    }

    #[test]
    fn init_is_deterministic() {
        let a = SetFunctionModel::init(tiny_arch(), 9).unwrap();
        let b = SetFunctionModel::init(tiny_arch(), 9).unwrap();
        let c = SetFunctionModel::init(tiny_arch(), 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..3 {
            let model = SetFunctionModel::init(tiny_arch(), trial).unwrap();
            let n = 7;
            let feats = random_features(&mut rng, n, 2);
            let masks = random_masks(&mut rng, 6, n);
            let base = model.eval_masks(&feats, &masks).unwrap();
            for _ in 0..50 {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                let pf: Vec<f64> = perm.iter().flat_map(|&i| feats.row(i).to_vec()).collect();
                let pm: Vec<f64> = (0..masks.rows())
                    .flat_map(|r| perm.iter().map(move |&i| (r, i)))
                    .map(|(r, i)| masks.get(r, i))
                    .collect();
                let pf = Tensor::new(vec![n, 2], pf).unwrap();
                let pm = Tensor::new(vec![masks.rows(), n], pm).unwrap();
                let vals = model.eval_masks(&pf, &pm).unwrap();
                for (a, b) in base.iter().zip(&vals) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_params_give_constant() {
        let model = SetFunctionModel::init(tiny_arch(), 1).unwrap();
        let zero = model.with_params(model.params().zeros_like()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats = random_features(&mut rng, 5, 2);
        let masks = random_masks(&mut rng, 8, 5);
        let vals = zero.eval_masks(&feats, &masks).unwrap();
        assert!(vals.iter().all(|&v| v == vals[0]));
    }

    #[test]
    fn empty_mask_is_head_of_zero() {
        let model = SetFunctionModel::init(tiny_arch(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f1 = random_features(&mut rng, 4, 2);
        let f2 = random_features(&mut rng, 6, 2);
        let e1 = model.eval_masks(&f1, &Tensor::zeros(&[1, 4])).unwrap();
        let e2 = model.eval_masks(&f2, &Tensor::zeros(&[1, 6])).unwrap();
        assert!(e1[0].is_finite());
        assert_eq!(e1, e2);
    }

    #[test]
    fn duplicate_content_masks_agree() {
        // same item set selected through a different ground-set ordering
        let model = SetFunctionModel::init(tiny_arch(), 4).unwrap();
        let feats = Tensor::from_rows(&[vec![0.1, 0.2], vec![0.3, -0.4], vec![0.5, 0.6]]).unwrap();
        let swapped = Tensor::from_rows(&[vec![0.5, 0.6], vec![0.3, -0.4], vec![0.1, 0.2]]).unwrap();
        let a = model.eval_masks(&feats, &masks_from_bits(3, [0b011])).unwrap();
        let b = model.eval_masks(&swapped, &masks_from_bits(3, [0b110])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_validation() {
        let feats = Tensor::zeros(&[3, 2]);
        assert!(SubsetBatch::new(feats.clone(), Tensor::zeros(&[2, 4])).is_err());
        let bad = Tensor::new(vec![1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        assert!(SubsetBatch::new(feats.clone(), bad).is_err());
        let model = SetFunctionModel::init(tiny_arch(), 0).unwrap();
        let batch = SubsetBatch::new(feats, masks_from_bits(3, [1, 2])).unwrap();
        assert!(model.param_grad_weighted(&batch, &[1.0]).is_err());
    }

    #[test]
    fn weighted_grad_matches_fd_and_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = SetFunctionModel::init(tiny_arch(), 5).unwrap();
        let feats = random_features(&mut rng, 6, 2);
        let masks = random_masks(&mut rng, 5, 6);
        let batch = SubsetBatch::new(feats.clone(), masks.clone()).unwrap();

        let zero = model.param_grad_weighted(&batch, &[0.0; 5]).unwrap();
        assert_eq!(zero.norm(), 0.0);

        let w: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = model.param_grad_weighted(&batch, &w).unwrap().flatten();
        let theta = Tensor::vector(model.params().flatten()).unwrap();
        let fd = finite_diff_grad(
            |t| {
                let m = model.with_flat_params(t.data()).unwrap();
                let v = m.eval_sets(&batch).unwrap();
                v.iter().zip(&w).map(|(a, b)| a * b).sum()
            },
            &theta,
            1e-5,
        )
        .unwrap();
        let num: f64 = g.iter().zip(fd.data()).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = fd.data().iter().map(|b| b * b).sum();
        assert!((num / den).sqrt() <= 1e-6);

        let w2: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sum: Vec<f64> = w.iter().zip(&w2).map(|(a, b)| 2.0 * a - b).collect();
        let g2 = model.param_grad_weighted(&batch, &w2).unwrap().flatten();
        let gs = model.param_grad_weighted(&batch, &sum).unwrap().flatten();
        for i in 0..gs.len() {
            assert!((gs[i] - (2.0 * g[i] - g2[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_subset_matches_engine_vjp() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = SetFunctionModel::init(tiny_arch(), 6).unwrap();
        let feats = random_features(&mut rng, 4, 2);
        let masks = masks_from_bits(4, [0b1011]);
        let batch = SubsetBatch::new(feats.clone(), masks.clone()).unwrap();
        let g = model.param_grad_weighted(&batch, &[1.0]).unwrap();
        let direct = crate::diffcore::param_vjp(
            model.record(),
            model.params(),
            &[&feats, &masks],
            &Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(g, direct);
    }

    #[test]
    fn scaled_output_scales_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = SetFunctionModel::init(tiny_arch(), 7).unwrap();
        let feats = random_features(&mut rng, 5, 2);
        let masks = random_masks(&mut rng, 4, 5);
        let a = model.eval_masks(&feats, &masks).unwrap();
        let b = model.scaled_output(0.25).unwrap().eval_masks(&feats, &masks).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((0.25 * x - y).abs() <= 1e-14);
        }
    }
}
