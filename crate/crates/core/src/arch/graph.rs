use serde::{Deserialize, Serialize};

use super::config::{ArchConfig, BlockStyle, DownsampleStyle, UpsampleStyle, NUM_STAGES};
use crate::error::{Error, Result};

/// Structural choices the architecture description leaves open. They are
/// fixed by calibration against published parameter and FLOPs counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Structure {
    pub conv_bias: bool,
    pub stem: StemStyle,
    pub downsample_stride: StridePlacement,
    pub downsample_norm_variant: ShortcutNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemStyle {
    /// Residual block `in_channels -> widths[0]` with a 1x1x1 projection shortcut.
    /// It stands in for the first block of encoder stage 0.
    ResidualProjection,
    /// One Conv-IN-LeakyReLU; encoder stage 0 then holds all of its blocks.
    ConvNormAct,
}

/// Which convolution of the integrated downsample block carries the stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StridePlacement {
    FirstConv,
    SecondConv,
}

/// Whether the strided 1x1x1 shortcut is followed by instance norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutNorm {
    PlainShortcut,
    NormedShortcut,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpMode {
    Nearest,
    Trilinear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerOp {
    Input,
    Conv { cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3], bias: bool },
    /// Kernel equals stride; weight layout `Cin, Cout, k...`.
    TransposeConv { cin: usize, cout: usize, stride: [usize; 3], bias: bool },
    InstanceNorm { channels: usize },
    LeakyRelu,
    Add,
    Upsample { mode: InterpMode, factors: [usize; 3] },
    ConcatChannels,
}

impl LayerOp {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerOp::Input => "input",
            LayerOp::Conv { .. } => "conv",
            LayerOp::TransposeConv { .. } => "transpose_conv",
            LayerOp::InstanceNorm { .. } => "instance_norm",
            LayerOp::LeakyRelu => "leaky_relu",
            LayerOp::Add => "add",
            LayerOp::Upsample { .. } => "upsample",
            LayerOp::ConcatChannels => "concat",
        }
    }

    /// `(suffix, shape)` of every learnable tensor the layer owns.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerOp::Conv { cin, cout, kernel, bias, .. } => {
                let mut v = vec![("weight", vec![cout, cin, kernel[0], kernel[1], kernel[2]])];
                if bias {
                    v.push(("bias", vec![cout]));
                }
                v
            }
            LayerOp::TransposeConv { cin, cout, stride, bias } => {
                let mut v = vec![("weight", vec![cin, cout, stride[0], stride[1], stride[2]])];
                if bias {
                    v.push(("bias", vec![cout]));
                }
                v
            }
            LayerOp::InstanceNorm { channels } => vec![("weight", vec![channels]), ("bias", vec![channels])],
            _ => Vec::new(),
        }
    }
}

/// Index of a node's output within [`NetworkGraph::nodes`].
pub type ValueId = usize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphNode {
    pub name: String,
    pub op: LayerOp,
    pub inputs: Vec<ValueId>,
}

/// Parameter declared by a graph, in graph order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// The owning convolution reads the network input directly.
    pub input_facing: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Encoder output consumed by a decoder stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SkipLink {
    pub stage: usize,
    pub encoder_output: ValueId,
    pub decoder_concat: ValueId,
}

/// Flat program compiled from an [`ArchConfig`]. Nodes are topologically ordered.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkGraph {
    config: ArchConfig,
    structure: Structure,
    nodes: Vec<GraphNode>,
    /// Segmentation head first, then deep-supervision heads from fine to coarse.
    outputs: Vec<ValueId>,
    skips: Vec<SkipLink>,
}

struct Builder {
    nodes: Vec<GraphNode>,
    s: Structure,
}

const K3: [usize; 3] = [3, 3, 3];
const K1: [usize; 3] = [1, 1, 1];
const ONE: [usize; 3] = [1, 1, 1];

impl Builder {
    fn push(&mut self, name: String, op: LayerOp, inputs: Vec<ValueId>) -> ValueId {
        self.nodes.push(GraphNode { name, op, inputs });
        self.nodes.len() - 1
    }

    fn conv(&mut self, name: String, x: ValueId, cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3]) -> ValueId {
        let pad = kernel.map(|k| if k % 2 == 1 { k / 2 } else { 0 });
        let op = LayerOp::Conv { cin, cout, kernel, stride, pad, bias: self.s.conv_bias };
        self.push(name, op, vec![x])
    }

    fn norm(&mut self, name: String, x: ValueId, channels: usize) -> ValueId {
        self.push(name, LayerOp::InstanceNorm { channels }, vec![x])
    }

    fn act(&mut self, name: String, x: ValueId) -> ValueId {
        self.push(name, LayerOp::LeakyRelu, vec![x])
    }

    fn conv_norm_act(&mut self, p: &str, x: ValueId, cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3]) -> ValueId {
        let c = self.conv(format!("{p}.conv"), x, cin, cout, kernel, stride);
        let n = self.norm(format!("{p}.norm"), c, cout);
        self.act(format!("{p}.act"), n)
    }

    /// Residual block. A projection shortcut is added when channels or extent change.
    /// `project` forces a 1x1x1 shortcut even when shapes already match.
    fn residual(&mut self, p: &str, x: ValueId, cin: usize, cout: usize, stride: [usize; 3], project: bool) -> ValueId {
        let (s1, s2) = match self.s.downsample_stride {
            StridePlacement::FirstConv => (stride, ONE),
            StridePlacement::SecondConv => (ONE, stride),
        };
        let c1 = self.conv(format!("{p}.conv1"), x, cin, cout, K3, s1);
        let n1 = self.norm(format!("{p}.norm1"), c1, cout);
        let a1 = self.act(format!("{p}.act1"), n1);
        let c2 = self.conv(format!("{p}.conv2"), a1, cout, cout, K3, s2);
        let n2 = self.norm(format!("{p}.norm2"), c2, cout);
        let skip = if project || cin != cout || stride != ONE {
            let sc = self.conv(format!("{p}.shortcut"), x, cin, cout, K1, stride);
            if stride != ONE && self.s.downsample_norm_variant == ShortcutNorm::NormedShortcut {
                self.norm(format!("{p}.shortcut_norm"), sc, cout)
            } else {
                sc
            }
        } else {
            x
        };
        let sum = self.push(format!("{p}.add"), LayerOp::Add, vec![n2, skip]);
        self.act(format!("{p}.act2"), sum)
    }

    fn head(&mut self, name: String, x: ValueId, cin: usize, classes: usize, bias: bool) -> ValueId {
        let op = LayerOp::Conv { cin, cout: classes, kernel: K1, stride: ONE, pad: [0; 3], bias: bias && self.s.conv_bias };
        self.push(name, op, vec![x])
    }
}

impl NetworkGraph {
    /// Compiles `config` with an explicit set of structural choices.
    pub fn build_with(config: &ArchConfig, structure: Structure) -> Result<Self> {
        config.validate()?;
        let c = config;
        let w = &c.widths;
        let mut b = Builder { nodes: Vec::new(), s: structure };
        let input = b.push("input".into(), LayerOp::Input, Vec::new());
        let plain = c.block_style == BlockStyle::NnunetPlain;

        // encoder
        let mut enc_out = Vec::with_capacity(NUM_STAGES);
        let mut x = input;
        for s in 0..NUM_STAGES {
            let cin = if s == 0 { c.in_channels } else { w[s - 1] };
            let stride = if s == 0 { ONE } else { c.updown_ratios[s - 1] };
            let depth = c.depths[s];
            if plain {
                for j in 0..2 * depth {
                    let (ci, st) = if j == 0 { (cin, stride) } else { (w[s], ONE) };
                    x = b.conv_norm_act(&format!("encoder.stage{s}.layer{j}"), x, ci, w[s], K3, st);
                }
            } else {
                // blocks already emitted for this stage, and the next block index
                let (mut done, mut idx) = (0, 0);
                if s == 0 {
                    match structure.stem {
                        StemStyle::ResidualProjection => {
                            x = b.residual("stem", x, cin, w[0], ONE, true);
                            done = 1;
                        }
                        StemStyle::ConvNormAct => {
                            x = b.conv_norm_act("stem", x, cin, w[0], K3, ONE);
                        }
                    }
                } else {
                    match c.downsample_style {
                        DownsampleStyle::InFirstResidual => {
                            x = b.residual(&format!("encoder.stage{s}.block0"), x, cin, w[s], stride, false);
                            (done, idx) = (1, 1);
                        }
                        DownsampleStyle::SeparateConv => {
                            x = b.conv_norm_act(&format!("encoder.stage{s}.downsample"), x, cin, w[s], stride, stride);
                        }
                    }
                }
                for _ in done..depth {
                    x = b.residual(&format!("encoder.stage{s}.block{idx}"), x, w[s], w[s], ONE, false);
                    idx += 1;
                }
            }
            enc_out.push(x);
        }

        // decoder
        let mut outputs = Vec::new();
        let mut skips = Vec::new();
        let mut heads = Vec::new();
        for s in (0..NUM_STAGES - 1).rev() {
            let f = c.updown_ratios[s];
            let up = match c.upsample_style {
                UpsampleStyle::TransposeConv => {
                    // nnU-Net's transposed convolutions carry no bias
                    let op = LayerOp::TransposeConv { cin: w[s + 1], cout: w[s], stride: f, bias: structure.conv_bias && !plain };
                    b.push(format!("decoder.stage{s}.upsample.transpose"), op, vec![x])
                }
                UpsampleStyle::NearestPlus1x1x1 | UpsampleStyle::TrilinearPlus1x1x1 => {
                    let mode = if c.upsample_style == UpsampleStyle::NearestPlus1x1x1 {
                        InterpMode::Nearest
                    } else {
                        InterpMode::Trilinear
                    };
                    let i = b.push(format!("decoder.stage{s}.upsample.interp"), LayerOp::Upsample { mode, factors: f }, vec![x]);
                    b.conv(format!("decoder.stage{s}.upsample.conv"), i, w[s + 1], w[s], K1, ONE)
                }
            };
            let cat = b.push(format!("decoder.stage{s}.concat"), LayerOp::ConcatChannels, vec![up, enc_out[s]]);
            skips.push(SkipLink { stage: s, encoder_output: enc_out[s], decoder_concat: cat });
            x = cat;
            if plain {
                for j in 0..2 * c.depths[s] {
                    let ci = if j == 0 { 2 * w[s] } else { w[s] };
                    x = b.conv_norm_act(&format!("decoder.stage{s}.layer{j}"), x, ci, w[s], K3, ONE);
                }
            } else {
                for j in 0..c.depths[s] {
                    let ci = if j == 0 { 2 * w[s] } else { w[s] };
                    x = b.residual(&format!("decoder.stage{s}.block{j}"), x, ci, w[s], ONE, false);
                }
            }
            if s == 0 {
                outputs.push(b.head("seg_head.conv".into(), x, w[0], c.num_classes, !plain));
            } else if c.deep_supervision {
                heads.push(b.head(format!("deep_supervision.{s}.conv"), x, w[s], c.num_classes, !plain));
            }
        }
        heads.reverse();
        outputs.extend(heads);
        skips.reverse();
        Ok(NetworkGraph { config: c.clone(), structure, nodes: b.nodes, outputs, skips })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    /// Segmentation logits.
    pub fn seg_output(&self) -> ValueId {
        self.outputs[0]
    }

    /// All head outputs: segmentation head, then deep-supervision heads (stage 1, 2, ...).
    pub fn outputs(&self) -> &[ValueId] {
        &self.outputs
    }

    pub fn skips(&self) -> &[SkipLink] {
        &self.skips
    }

    /// Every learnable tensor, in graph order.
    pub fn params(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let input_facing = node.inputs.iter().any(|&i| self.nodes[i].op == LayerOp::Input);
            for (suffix, shape) in node.op.param_shapes() {
                out.push(ParamSpec { name: format!("{}.{suffix}", node.name), shape, input_facing });
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|p| p.name).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(ParamSpec::numel).sum()
    }

    /// Rejects spatial extents that do not divide through every down-sampling stage.
    pub fn check_patch(&self, spatial: [usize; 3]) -> Result<()> {
        let f = self.config.total_downsample();
        for ax in 0..3 {
            if spatial[ax] == 0 || spatial[ax] % f[ax] != 0 {
                return Err(Error::invalid(format!(
                    "spatial extent {spatial:?} is not divisible by the cumulative down-sampling factor {f:?}"
                )));
            }
        }
        Ok(())
    }

    /// `(channels, [D, H, W])` of every node's output for a given input extent.
    pub fn infer_shapes(&self, spatial: [usize; 3]) -> Result<Vec<(usize, [usize; 3])>> {
        self.check_patch(spatial)?;
        let mut shapes: Vec<(usize, [usize; 3])> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let inp = |k: usize| shapes[node.inputs[k]];
            let shape = match node.op {
                LayerOp::Input => (self.config.in_channels, spatial),
                LayerOp::Conv { cout, kernel, stride, pad, .. } => {
                    let (_, sp) = inp(0);
                    let mut o = [0; 3];
                    for ax in 0..3 {
                        o[ax] = (sp[ax] + 2 * pad[ax] - kernel[ax]) / stride[ax] + 1;
                    }
                    (cout, o)
                }
                LayerOp::TransposeConv { cout, stride, .. } => {
                    let (_, sp) = inp(0);
                    (cout, [sp[0] * stride[0], sp[1] * stride[1], sp[2] * stride[2]])
                }
                LayerOp::Upsample { factors, .. } => {
                    let (ch, sp) = inp(0);
                    (ch, [sp[0] * factors[0], sp[1] * factors[1], sp[2] * factors[2]])
                }
                LayerOp::ConcatChannels => {
                    let ((a, sp), (b, _)) = (inp(0), inp(1));
                    (a + b, sp)
                }
                LayerOp::InstanceNorm { .. } | LayerOp::LeakyRelu | LayerOp::Add => inp(0),
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }
}
