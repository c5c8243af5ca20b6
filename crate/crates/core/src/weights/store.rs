use indexmap::IndexMap;

use crate::arch::NetworkGraph;
use crate::error::{Error, Result, ShapeDiff};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Named tensors in insertion order.
///
/// Shapes are fixed once a name is inserted; values may be overwritten in place.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    tensors: IndexMap<String, Tensor>,
    config_digest: Option<String>,
    version: u32,
}

impl Default for WeightStore {
    fn default() -> Self {
        Self::new()
    }
}

impl WeightStore {
    pub fn new() -> Self {
        WeightStore { tensors: IndexMap::new(), config_digest: None, version: FORMAT_VERSION }
    }

    pub fn with_digest(digest: impl Into<String>) -> Self {
        WeightStore { config_digest: Some(digest.into()), ..Self::new() }
    }

    pub fn config_digest(&self) -> Option<&str> {
        self.config_digest.as_deref()
    }

    pub fn set_config_digest(&mut self, digest: Option<String>) {
        self.config_digest = digest;
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!("tensor `{name}` is already present")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Overwrites the values of an existing tensor; the shape must match.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self.tensors.get_mut(name).ok_or_else(|| Error::MissingParameters(vec![name.to_string()]))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch(vec![ShapeDiff {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                found: tensor.shape().to_vec(),
            }]));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Mutable access to the values of one tensor.
    pub fn values_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        self.tensors.get_mut(name).map(|t| t.data_mut())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar elements.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn as_map(&self) -> &IndexMap<String, Tensor> {
        &self.tensors
    }

    pub fn into_map(self) -> IndexMap<String, Tensor> {
        self.tensors
    }

    pub fn from_map(tensors: IndexMap<String, Tensor>) -> Self {
        WeightStore { tensors, ..Self::new() }
    }

    /// Bit-level equality of names, order, shapes and values.
    pub fn bit_eq(&self, other: &WeightStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    /// Checks that every graph parameter is present with its declared shape.
    /// Extra tensors are reported when `strict` is set.
    pub fn check_graph(&self, graph: &NetworkGraph, strict: bool) -> Result<()> {
        let specs = graph.params();
        let missing: Vec<String> = specs.iter().filter(|p| !self.contains(&p.name)).map(|p| p.name.clone()).collect();
        if !missing.is_empty() {
            return Err(Error::MissingParameters(missing));
        }
        let diffs: Vec<ShapeDiff> = specs
            .iter()
            .filter_map(|p| {
                let found = self.tensors[&p.name].shape();
                (found != p.shape.as_slice()).then(|| ShapeDiff {
                    name: p.name.clone(),
                    expected: p.shape.clone(),
                    found: found.to_vec(),
                })
            })
            .collect();
        if !diffs.is_empty() {
            return Err(Error::ShapeMismatch(diffs));
        }
        if strict && self.len() != specs.len() {
            let known: std::collections::HashSet<&str> = specs.iter().map(|p| p.name.as_str()).collect();
            let extra = self.names().filter(|n| !known.contains(n)).map(String::from).collect();
            return Err(Error::UnexpectedParameters(extra));
        }
        Ok(())
    }
}
