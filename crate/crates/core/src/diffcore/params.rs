use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One named block of parameters (a layer weight or bias).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub value: Tensor,
}

/// Parameter vector θ stored as ordered, uniquely named segments.
///
/// `flatten` and `unflatten` are inverse to each other for a fixed layout,
/// so optimizers and finite-difference oracles can work on a plain `Vec<f64>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn new(segments: Vec<(String, Tensor)>) -> Result<Self> {
        let mut out = Vec::with_capacity(segments.len());
        for (name, value) in segments {
            if out.iter().any(|s: &Segment| s.name == name) {
                return Err(Error::invalid(format!("duplicate segment name `{name}`")));
            }
            out.push(Segment { name, value });
        }
        Ok(Self { segments: out })
    }

    /// Zero vector with the same layout as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            segments: self
                .segments
                .iter()
                .map(|s| Segment {
                    name: s.name.clone(),
                    value: Tensor::zeros(s.value.shape()),
                })
                .collect(),
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.segments.iter().find(|s| s.name == name).map(|s| &s.value)
    }

    pub(crate) fn segment_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.segments[idx].value
    }

    pub fn segment(&self, idx: usize) -> &Tensor {
        &self.segments[idx].value
    }

    /// Total number of scalar parameters `d`.
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.value.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.segments
            .iter()
            .flat_map(|s| s.value.data().iter().copied())
            .collect()
    }

    /// Rebuilds a vector with this layout from flat values.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.len() {
            return Err(Error::shape(format!(
                "unflatten: expected {} values, got {}",
                self.len(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut segments = Vec::with_capacity(self.segments.len());
        for s in &self.segments {
            let n = s.value.len();
            let value = Tensor::new(s.value.shape().to_vec(), flat[offset..offset + n].to_vec())?;
            segments.push(Segment {
                name: s.name.clone(),
                value,
            });
            offset += n;
        }
        Ok(Self { segments })
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::shape("parameter layouts differ"));
        }
        for (a, b) in self.segments.iter_mut().zip(&other.segments) {
            for (x, y) in a.value.data_mut().iter_mut().zip(b.value.data()) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for s in &mut self.segments {
            s.value.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn norm(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|s| s.value.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.segments.iter().all(|s| s.value.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::zeros(&[1]);
        assert!(ParamVector::new(vec![("a".into(), t.clone()), ("a".into(), t)]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_bijection(
            a in proptest::collection::vec(-10.0f64..10.0, 6),
            b in proptest::collection::vec(-10.0f64..10.0, 3),
        ) {
            let p = ParamVector::new(vec![
                ("w".into(), Tensor::new(vec![2, 3], a).unwrap()),
                ("b".into(), Tensor::new(vec![3], b).unwrap()),
            ]).unwrap();
            let flat = p.flatten();
            prop_assert_eq!(flat.len(), p.len());
            let q = p.unflatten(&flat).unwrap();
            prop_assert_eq!(q, p);
        }
    }
}
