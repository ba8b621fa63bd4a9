//! Named parameter collections.
//!
//! [`ParamSet`] holds a point in parameter space (θ, ω, φ) and doubles as the
//! gradient map returned by [`crate::autodiff::Tape::backward`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered map from parameter id to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

/// Gradients keyed by parameter id; entry shapes match the leaves.
pub type GradMap = ParamSet;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(id: impl Into<String>, value: Tensor) -> Self {
        let mut set = Self::new();
        set.insert(id, value);
        set
    }

    pub fn insert(&mut self, id: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.entries.insert(id.into(), value)
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.entries.get(id)
    }

    pub fn require(&self, id: &str) -> Result<&Tensor> {
        self.get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{id}`")))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn remove(&mut self, id: &str) -> Option<Tensor> {
        self.entries.remove(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    pub fn map(&self, f: impl Fn(&Tensor) -> Tensor) -> Self {
        Self { entries: self.entries.iter().map(|(k, v)| (k.clone(), f(v))).collect() }
    }

    /// Keys and shapes agree.
    pub fn congruent(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.congruent(other) {
            Ok(())
        } else {
            Err(Error::Shape("parameter sets are not congruent".into()))
        }
    }

    /// `self + k * other`, entrywise over matching ids.
    pub fn axpy(&self, k: f64, other: &ParamSet) -> Result<Self> {
        self.check_congruent(other)?;
        let entries = self
            .entries
            .iter()
            .zip(other.entries.values())
            .map(|((id, a), b)| Ok((id.clone(), a.axpy(k, b)?)))
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn add(&self, other: &ParamSet) -> Result<Self> {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &ParamSet) -> Result<Self> {
        self.axpy(-1.0, other)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|t| t.scale(k))
    }

    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        self.check_congruent(other)?;
        self.entries
            .values()
            .zip(other.entries.values())
            .map(|(a, b)| a.dot(b))
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries.values().map(Tensor::norm_sq).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Entries whose id satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Restriction of `self` to the ids present in `template`.
    pub fn restrict_to(&self, template: &ParamSet) -> Result<Self> {
        let mut out = ParamSet::new();
        for id in template.ids() {
            out.insert(id, self.require(id)?.clone());
        }
        Ok(out)
    }

    /// Union of two disjoint sets.
    pub fn merged(&self, other: &ParamSet) -> Result<Self> {
        let mut out = self.clone();
        for (id, t) in other.iter() {
            if out.insert(id, t.clone()).is_some() {
                return Err(Error::InvalidArgument(format!("parameter `{id}` in both sets")));
            }
        }
        Ok(out)
    }

    /// Flattens all entries, in id order, into one vector.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamSet::flatten`] using `self` as the shape template.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(Error::Shape(format!(
                "flat vector of {} values for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        let mut entries = BTreeMap::new();
        for (id, t) in &self.entries {
            let n = t.numel();
            entries.insert(id.clone(), t.with_data(flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(Self { entries })
    }
}
