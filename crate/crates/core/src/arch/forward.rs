use indexmap::IndexMap;

use super::graph::{InterpMode, LayerOp, NetworkGraph};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self as k, INSTANCE_NORM_EPS, LEAKY_RELU_SLOPE};
use crate::tensor::{Tape, Tensor, Var};
use crate::weights::WeightStore;

/// Result of an evaluation pass.
#[derive(Debug)]
pub struct ForwardOutput {
    /// Segmentation logits followed by deep-supervision logits (fine to coarse).
    pub heads: Vec<Tensor>,
    /// Every node's output keyed by node name, when requested.
    pub activations: Option<IndexMap<String, Tensor>>,
}

fn check_inputs(graph: &NetworkGraph, store: &WeightStore, x: &Tensor) -> Result<()> {
    store.check_graph(graph, false)?;
    let [_, c, d, h, w] = x.dims5()?;
    if c != graph.config().in_channels {
        return Err(Error::invalid(format!(
            "input has {c} channels but the network expects {}",
            graph.config().in_channels
        )));
    }
    graph.check_patch([d, h, w])
}

fn weight<'a>(store: &'a WeightStore, node: &str, suffix: &str) -> &'a Tensor {
    store.get(&format!("{node}.{suffix}")).expect("parameters checked before execution")
}

/// Segmentation logits `N, num_classes, D, H, W`.
pub fn forward(graph: &NetworkGraph, store: &WeightStore, x: &Tensor) -> Result<Tensor> {
    let mut out = run(graph, store, x, false, false)?;
    Ok(out.heads.swap_remove(0))
}

/// Evaluates all heads; intermediate values are dropped after their last use
/// unless `keep_activations` is set.
pub fn forward_all(graph: &NetworkGraph, store: &WeightStore, x: &Tensor, keep_activations: bool) -> Result<ForwardOutput> {
    run(graph, store, x, true, keep_activations)
}

fn run(graph: &NetworkGraph, store: &WeightStore, x: &Tensor, all_heads: bool, keep: bool) -> Result<ForwardOutput> {
    check_inputs(graph, store, x)?;
    let nodes = graph.nodes();
    let wanted: Vec<usize> = if all_heads { graph.outputs().to_vec() } else { vec![graph.seg_output()] };
    let mut last_use = vec![0usize; nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        for &j in &n.inputs {
            last_use[j] = i;
        }
    }
    for &o in &wanted {
        last_use[o] = usize::MAX;
    }
    let mut vals: Vec<Option<Tensor>> = vec![None; nodes.len()];
    let mut acts = keep.then(IndexMap::new);
    for (i, node) in nodes.iter().enumerate() {
        let get = |k: usize| vals[node.inputs[k]].as_ref().expect("topological order");
        let name = node.name.as_str();
        let y = match node.op {
            LayerOp::Input => x.clone(),
            LayerOp::Conv { stride, pad, bias, .. } => {
                let b = bias.then(|| weight(store, name, "bias"));
                k::conv3d(get(0), weight(store, name, "weight"), b, stride, pad)?
            }
            LayerOp::TransposeConv { stride, bias, .. } => {
                let b = bias.then(|| weight(store, name, "bias"));
                k::transpose_conv3d(get(0), weight(store, name, "weight"), b, stride)?
            }
            LayerOp::InstanceNorm { .. } => {
                k::instance_norm(get(0), weight(store, name, "weight"), weight(store, name, "bias"), INSTANCE_NORM_EPS)?.0
            }
            LayerOp::LeakyRelu => k::leaky_relu(get(0), LEAKY_RELU_SLOPE),
            LayerOp::Add => k::add(get(0), get(1))?,
            LayerOp::Upsample { mode: InterpMode::Nearest, factors } => k::upsample_nearest(get(0), factors)?,
            LayerOp::Upsample { mode: InterpMode::Trilinear, factors } => k::upsample_trilinear(get(0), factors)?,
            LayerOp::ConcatChannels => k::concat_channels(get(0), get(1))?,
        };
        if let Some(a) = acts.as_mut() {
            a.insert(node.name.clone(), y.clone());
        }
        vals[i] = Some(y);
        for &j in &node.inputs {
            if last_use[j] == i {
                vals[j] = None;
            }
        }
    }
    let heads = wanted.iter().map(|&o| vals[o].take().expect("head computed")).collect();
    Ok(ForwardOutput { heads, activations: acts })
}

/// Records the forward pass on `tape`, registering every parameter under its
/// graph name. Returns the head outputs (segmentation first).
pub fn forward_tape(graph: &NetworkGraph, store: &WeightStore, x: &Tensor, tape: &mut Tape) -> Result<Vec<Var>> {
    check_inputs(graph, store, x)?;
    let nodes = graph.nodes();
    let mut vars: Vec<Var> = Vec::with_capacity(nodes.len());
    for node in nodes {
        let name = node.name.as_str();
        let mut p = |suffix: &str| -> Result<Var> { tape.param(format!("{name}.{suffix}"), weight(store, name, suffix).clone()) };
        let inp = |k: usize| vars[node.inputs[k]];
        let v = match node.op {
            LayerOp::Input => tape.constant(x.clone()),
            LayerOp::Conv { stride, pad, bias, .. } => {
                let w = p("weight")?;
                let b = if bias { Some(p("bias")?) } else { None };
                tape.conv3d(inp(0), w, b, stride, pad)?
            }
            LayerOp::TransposeConv { stride, bias, .. } => {
                let w = p("weight")?;
                let b = if bias { Some(p("bias")?) } else { None };
                tape.transpose_conv3d(inp(0), w, b, stride)?
            }
            LayerOp::InstanceNorm { .. } => {
                let g = p("weight")?;
                let b = p("bias")?;
                tape.instance_norm(inp(0), g, b, INSTANCE_NORM_EPS)?
            }
            LayerOp::LeakyRelu => tape.leaky_relu(inp(0), LEAKY_RELU_SLOPE),
            LayerOp::Add => tape.add(inp(0), inp(1))?,
            LayerOp::Upsample { mode: InterpMode::Nearest, factors } => tape.upsample_nearest(inp(0), factors)?,
            LayerOp::Upsample { mode: InterpMode::Trilinear, factors } => tape.upsample_trilinear(inp(0), factors)?,
            LayerOp::ConcatChannels => tape.concat_channels(inp(0), inp(1))?,
        };
        vars.push(v);
    }
    Ok(graph.outputs().iter().map(|&o| vars[o]).collect())
}

/// Forward pass that also returns the recorded tape.
pub fn forward_recorded(graph: &NetworkGraph, store: &WeightStore, x: &Tensor) -> Result<(Tensor, Tape)> {
    let mut tape = Tape::new();
    let heads = forward_tape(graph, store, x, &mut tape)?;
    let logits = tape.value(heads[0]).clone();
    Ok((logits, tape))
}
