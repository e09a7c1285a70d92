//! Named tensor collections: learnable parameters, optimizer moments and
//! normalization buffers all use the same ordered map so manifests compare
//! and serialize canonically.

use std::collections::BTreeMap;

use crate::error::{FpsError, Result};
use crate::fpsd::{Bundle, FpsdArray};
use crate::tensor::Tensor;

/// Ordered name -> tensor map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| FpsError::State(format!("missing tensor {name}")))
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(slot) => {
                if slot.shape() != t.shape() {
                    return Err(FpsError::shape(
                        format!("{:?} for {name}", slot.shape()),
                        format!("{:?}", t.shape()),
                    ));
                }
                *slot = t;
                Ok(())
            }
            None => Err(FpsError::State(format!("missing tensor {name}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Same tensor names with identical shapes.
    pub fn manifest_matches(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    /// Tensorwise `self = alpha * self + (1 - alpha) * other`.
    pub fn blend_from(&mut self, other: &ParamSet, alpha: f64) -> Result<()> {
        if !self.manifest_matches(other) {
            return Err(FpsError::State("parameter manifests differ".into()));
        }
        for (slot, src) in self.entries.values_mut().zip(other.entries.values()) {
            *slot = slot.zip(src, |a, b| alpha * a + (1.0 - alpha) * b);
        }
        Ok(())
    }

    pub fn to_bundle(&self) -> Bundle {
        self.entries
            .iter()
            .map(|(name, t)| {
                (name.clone(), FpsdArray::f64(t.shape().to_vec(), t.to_vec()))
            })
            .collect()
    }

    pub fn from_bundle(bundle: &Bundle) -> Result<Self> {
        let mut set = ParamSet::new();
        for (name, arr) in bundle {
            set.insert(name.clone(), Tensor::new(arr.dims.clone(), arr.values.clone())?);
        }
        Ok(set)
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet { entries: iter.into_iter().collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blend_matches_axpy() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let mut b = ParamSet::new();
        b.insert("w", Tensor::from_vec(&[2], vec![3.0, 6.0]));
        a.blend_from(&b, 0.5).unwrap();
        assert_eq!(a.get("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn blend_rejects_manifest_mismatch() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let mut b = ParamSet::new();
        b.insert("v", Tensor::from_vec(&[2], vec![3.0, 6.0]));
        assert!(a.blend_from(&b, 0.5).is_err());
    }

    #[test]
    fn bundle_roundtrip_preserves_bits() {
        let mut set = ParamSet::new();
        set.insert("a", Tensor::from_vec(&[3], vec![0.1, -0.2, 1e-300]));
        set.insert("b", Tensor::from_vec(&[1, 2], vec![5.0, -0.0]));
        let back = ParamSet::from_bundle(&set.to_bundle()).unwrap();
        assert!(back.manifest_matches(&set));
        for (name, t) in set.iter() {
            let r = back.get(name).unwrap();
            for (x, y) in t.data().iter().zip(r.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
