use indexmap::IndexMap;

use super::init::init_param;
use super::store::WeightStore;
use crate::arch::{LayerOp, NetworkGraph};
use crate::error::{Error, Result, ShapeDiff};
use crate::tensor::Tensor;

pub const HEAD_PREFIXES: [&str; 2] = ["seg_head.", "deep_supervision."];
pub const BACKBONE_LR_MULTIPLIER: f64 = 0.1;
pub const HEAD_LR_MULTIPLIER: f64 = 1.0;

pub fn is_head(name: &str) -> bool {
    HEAD_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Per-parameter learning-rate multipliers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LrMultiplierMap(IndexMap<String, f64>);

impl LrMultiplierMap {
    /// Every parameter of `graph` at `value`.
    pub fn uniform(graph: &NetworkGraph, value: f64) -> Self {
        LrMultiplierMap(graph.param_names().into_iter().map(|n| (n, value)).collect())
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        self.0.insert(name.into(), value);
    }

    /// Multiplier for `name`; parameters not listed train at full rate.
    pub fn get(&self, name: &str) -> f64 {
        self.0.get(name).copied().unwrap_or(1.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of parameters whose multiplier equals `value`.
    pub fn count(&self, value: f64) -> usize {
        self.0.values().filter(|&&v| v == value).count()
    }
}

/// Copies `src` (`Cout, Cs, k..`) into a kernel with `target_in` input
/// channels; target channel `c` takes source channel `c mod Cs`. No rescaling.
pub fn replicate_input_channels(src: &Tensor, target_in: usize) -> Result<Tensor> {
    let s = src.shape();
    if s.len() < 2 || target_in < s[1] {
        return Err(Error::invalid(format!("cannot replicate kernel {s:?} to {target_in} input channels")));
    }
    let (co, cs) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut shape = s.to_vec();
    shape[1] = target_in;
    let mut data = Vec::with_capacity(co * target_in * inner);
    for o in 0..co {
        for c in 0..target_in {
            let start = (o * cs + c % cs) * inner;
            data.extend_from_slice(&src.data()[start..start + inner]);
        }
    }
    Tensor::new(shape, data)
}

/// Builds fine-tuning weights for `target` from a pre-trained store.
///
/// Heads are re-initialized from `seed` and train at 1.0x; everything else is
/// copied verbatim and trains at 0.1x. Input-facing kernels are replicated
/// along the input-channel axis when the target takes more channels.
pub fn transfer(pretrained: &WeightStore, target: &NetworkGraph, seed: u64) -> Result<(WeightStore, LrMultiplierMap)> {
    let mut out = WeightStore::with_digest(target.config().digest());
    let mut mult = LrMultiplierMap::default();
    let mut diffs = Vec::new();
    let nodes = target.nodes();
    for node in nodes {
        let input_facing = node.inputs.iter().any(|&i| nodes[i].op == LayerOp::Input);
        for (suffix, shape) in node.op.param_shapes() {
            let name = format!("{}.{suffix}", node.name);
            if is_head(&name) {
                out.insert(&name, init_param(&node.op, suffix, &shape, seed, &name))?;
                mult.insert(name, HEAD_LR_MULTIPLIER);
                continue;
            }
            let Some(src) = pretrained.get(&name) else {
                diffs.push(ShapeDiff { name, expected: shape, found: Vec::new() });
                continue;
            };
            let replicable = input_facing
                && suffix == "weight"
                && src.ndim() == shape.len()
                && src.shape()[1] < shape[1]
                && src.shape()[0] == shape[0]
                && src.shape()[2..] == shape[2..];
            let value = if src.shape() == shape.as_slice() {
                src.clone()
            } else if replicable {
                replicate_input_channels(src, shape[1])?
            } else {
                diffs.push(ShapeDiff { name, expected: shape, found: src.shape().to_vec() });
                continue;
            };
            out.insert(&name, value)?;
            mult.insert(name, BACKBONE_LR_MULTIPLIER);
        }
    }
    for (name, t) in pretrained.iter() {
        if !is_head(name) && !out.contains(name) && !diffs.iter().any(|d| d.name == name) {
            diffs.push(ShapeDiff { name: name.to_string(), expected: Vec::new(), found: t.shape().to_vec() });
        }
    }
    if !diffs.is_empty() {
        return Err(Error::ShapeMismatch(diffs));
    }
    Ok((out, mult))
}
