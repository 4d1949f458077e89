use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Named `f32` tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    entries: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fails if `name` is already present.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("weight `{name}` already exists")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn set(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::DanglingWeight(name.to_owned()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.entries.retain(|k, _| keep(k));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of stored scalars.
    pub fn element_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// A name not yet in use, derived from `base`.
    pub fn fresh_name(&self, base: &str) -> String {
        if !self.contains(base) {
            return base.to_owned();
        }
        (1..)
            .map(|i| format!("{base}#{i}"))
            .find(|n| !self.contains(n))
            .expect("unbounded search")
    }
}
