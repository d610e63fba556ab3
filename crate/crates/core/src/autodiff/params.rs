use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::{AutodiffError, Tensor};

/// Names and shapes of a [`ParamSet`], in iteration order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<(String, Vec<usize>)>,
}

impl ParamLayout {
    pub fn entries(&self) -> &[(String, Vec<usize>)] {
        &self.entries
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Start offset of each entry inside the flattened vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.entries.len());
        let mut acc = 0;
        for (_, shape) in &self.entries {
            offsets.push(acc);
            acc += shape.iter().product::<usize>();
        }
        offsets
    }
}

/// Ordered collection of named tensors: the task parameters and the
/// reweighting parameters are both stored this way.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<(), AutodiffError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(AutodiffError::DuplicateParam(name));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn from_flat(layout: &ParamLayout, values: &[T]) -> Result<Self, AutodiffError> {
        if layout.numel() != values.len() {
            return Err(AutodiffError::Shape {
                op: "unflatten",
                detail: format!("layout holds {} values, got {}", layout.numel(), values.len()),
            });
        }
        let mut entries = Vec::with_capacity(layout.entries.len());
        let mut offset = 0;
        for (name, shape) in &layout.entries {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.clone(), values[offset..offset + n].to_vec())?;
            entries.push((name.clone(), t));
            offset += n;
        }
        Ok(Self { entries })
    }

    /// `self += alpha * other`, entry by entry.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<(), AutodiffError> {
        self.check_same_layout(other)?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    /// Inner product of the flattened parameter vectors.
    pub fn dot(&self, other: &Self) -> Result<T, AutodiffError> {
        self.check_same_layout(other)?;
        let mut acc = T::zero();
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                acc += x * y;
            }
        }
        Ok(acc)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    fn check_same_layout(&self, other: &Self) -> Result<(), AutodiffError> {
        let same = self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape());
        if same {
            Ok(())
        } else {
            Err(AutodiffError::Shape {
                op: "param_set",
                detail: "parameter sets differ in names or shapes".into(),
            })
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            scalar: T::type_name().to_string(),
            params: self
                .entries
                .iter()
                .map(|(n, t)| CheckpointEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, AutodiffError> {
        let mut set = Self::new();
        for e in &ckpt.params {
            set.insert(e.name.clone(), Tensor::from_f64(e.shape.clone(), &e.values)?)?;
        }
        Ok(set)
    }

    pub fn save_json(&self, path: &Path) -> Result<(), AutodiffError> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint())
            .map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| AutodiffError::Checkpoint(e.to_string()))
    }

    pub fn load_json(path: &Path) -> Result<Self, AutodiffError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ckpt)
    }
}

/// On-disk checkpoint: names, shapes and row-major values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub scalar: String,
    pub params: Vec<CheckpointEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        p.insert("b", Tensor::vector(vec![0.5, -0.5]).unwrap()).unwrap();
        p
    }

    #[test]
    fn axpy_on_small_set() {
        let mut p = ParamSet::new();
        p.insert("psi", Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let mut g = ParamSet::new();
        g.insert("psi", Tensor::vector(vec![10.0, -10.0, 0.0]).unwrap()).unwrap();
        p.axpy(-0.5, &g).unwrap();
        assert_eq!(p.get("psi").unwrap().data(), &[-4.0, 7.0, 3.0]);
    }

    #[test]
    fn mismatched_layouts_do_not_combine() {
        let mut a = sample();
        let mut b = ParamSet::new();
        b.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(a.axpy(1.0, &b).is_err());
        assert!(a.insert("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn checkpoint_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = sample();
        p.save_json(&path).unwrap();
        assert_eq!(ParamSet::<f64>::load_json(&path).unwrap(), p);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_exact(values in proptest::collection::vec(-1e6f64..1e6, 6)) {
            let p = ParamSet::from_flat(&sample().layout(), &values).unwrap();
            prop_assert_eq!(p.flatten(), values.clone());
            prop_assert_eq!(ParamSet::from_flat(&p.layout(), &p.flatten()).unwrap(), p);
        }
    }
}
