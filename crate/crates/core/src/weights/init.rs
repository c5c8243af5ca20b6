use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::store::WeightStore;
use crate::arch::{LayerOp, NetworkGraph};
use crate::error::Result;
use crate::tensor::kernels::LEAKY_RELU_SLOPE;
use crate::tensor::Tensor;

/// FNV-1a, used to derive a stable per-parameter stream from the name.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Random stream for one parameter. Independent of iteration order, so a
/// tensor's initial values depend only on `(seed, name)`.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name_hash(name));
    rng
}

/// Kaiming-normal sample for a convolution kernel whose dimension 1 times
/// the kernel volume is the fan-in (`Cout, Cin, k..` for convolutions; the
/// transposed layout gives `Cout * k^3`, matching common framework practice).
pub fn kaiming_normal(shape: &[usize], seed: u64, name: &str) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let gain = (2.0 / (1.0 + LEAKY_RELU_SLOPE * LEAKY_RELU_SLOPE)).sqrt();
    let std = gain / (fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = param_rng(seed, name);
    Tensor::from_fn(shape, |_| normal.sample(&mut rng) as f32)
}

/// Fresh value for one parameter of `op`.
pub fn init_param(op: &LayerOp, suffix: &str, shape: &[usize], seed: u64, name: &str) -> Tensor {
    match (op, suffix) {
        (LayerOp::InstanceNorm { .. }, "weight") => Tensor::full(shape, 1.0),
        (_, "bias") => Tensor::zeros(shape),
        _ => kaiming_normal(shape, seed, name),
    }
}

/// Deterministic initialization of every parameter of `graph`: Kaiming-normal
/// convolution kernels, zero biases, unit norm scales and zero norm shifts.
pub fn init_weights(graph: &NetworkGraph, seed: u64) -> Result<WeightStore> {
    let mut store = WeightStore::with_digest(graph.config().digest());
    for node in graph.nodes() {
        for (suffix, shape) in node.op.param_shapes() {
            let name = format!("{}.{suffix}", node.name);
            let t = init_param(&node.op, suffix, &shape, seed, &name);
            store.insert(name, t)?;
        }
    }
    Ok(store)
}
