//! Operator graph for the three-scale RAW-to-RGB network, its variants, the
//! executor, and static analysis.

mod analysis;
mod build;
mod config;
mod exec;

pub use analysis::{
    calibrate_base_width, count_macs, count_params, estimate_peak_memory, lint_opset, node_table, render_report,
    Calibration, GraphReport, MemoryEstimate, NodeRow, OpsetViolation, OPSET_ALLOWLIST,
};
pub use build::{build_model, cam_block, grouped_residual_block, sam_block};
pub use config::{Attention, Downsample, ModelConfig, Variant, DEFAULT_BASE_WIDTH, SCALES, TARGET_MODEL_BYTES};
pub use exec::{run_inference, ExecPath, Executor};

use std::collections::HashSet;

use crate::error::{ensure, Error, Result};
use crate::kernels::{self, ConvParams};
use crate::tensor::Shape;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Conv2d {
        params: ConvParams,
        out_channels: usize,
    },
    DepthwiseConv2d {
        kernel: usize,
        stride: usize,
    },
    Prelu,
    Tanh,
    Sigmoid,
    InstanceNorm {
        epsilon: f32,
    },
    MaxPool2x2,
    GlobalAvgPool,
    ResizeBilinearX2,
    SpaceToDepth,
    DepthToSpace,
    Concat,
    Add,
    Mul,
    /// Contiguous channel range `start..start + len`.
    Split {
        start: usize,
        len: usize,
    },
    /// Operator imported from a foreign graph. Analysable, not executable.
    Custom {
        kind: String,
    },
}

impl Op {
    /// Operator name as used by the op-set lint and reports.
    pub fn kind(&self) -> &str {
        match self {
            Op::Input => "input",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Op::Prelu => "prelu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::MaxPool2x2 => "max_pool",
            Op::GlobalAvgPool => "avg_pool",
            Op::ResizeBilinearX2 => "resize_bilinear",
            Op::SpaceToDepth => "space_to_depth",
            Op::DepthToSpace => "depth_to_space",
            Op::Concat => "concat",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Split { .. } => "split",
            Op::Custom { kind } => kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotRole {
    /// Convolution kernel; carries its fan-in for initialization.
    Weight { fan_in: usize },
    Bias,
    Slope,
    Gamma,
    Beta,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub dims: Vec<usize>,
    pub role: SlotRole,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    /// Scope name; parameter slots are named `<name>.<param>`.
    pub name: String,
    /// Output channel count, static for every node.
    pub channels: usize,
}

impl Node {
    /// Parameter slots this node binds, in a fixed order.
    pub fn slots(&self, in_channels: usize) -> Vec<ParamSlot> {
        let slot = |suffix: &str, dims: Vec<usize>, role| ParamSlot {
            name: format!("{}.{suffix}", self.name),
            dims,
            role,
        };
        match &self.op {
            Op::Conv2d { params, out_channels } => {
                let per_group = in_channels / params.groups;
                vec![
                    slot(
                        "weight",
                        vec![*out_channels, params.kernel_height, params.kernel_width, per_group],
                        SlotRole::Weight {
                            fan_in: params.kernel_height * params.kernel_width * per_group,
                        },
                    ),
                    slot("bias", vec![*out_channels], SlotRole::Bias),
                ]
            }
            Op::DepthwiseConv2d { kernel, .. } => vec![
                slot(
                    "weight",
                    vec![self.channels, *kernel, *kernel],
                    SlotRole::Weight {
                        fan_in: kernel * kernel,
                    },
                ),
                slot("bias", vec![self.channels], SlotRole::Bias),
            ],
            Op::Prelu => vec![slot("alpha", vec![self.channels], SlotRole::Slope)],
            Op::InstanceNorm { .. } => vec![
                slot("gamma", vec![self.channels], SlotRole::Gamma),
                slot("beta", vec![self.channels], SlotRole::Beta),
            ],
            _ => Vec::new(),
        }
    }
}

/// A topologically ordered operator list. Node 0 is the single-channel
/// Bayer input; the last node is the output.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    alignment: usize,
    variant: Option<Variant>,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output(&self) -> NodeId {
        self.nodes.len() - 1
    }

    /// Required divisor of the input height and width.
    pub fn alignment(&self) -> usize {
        self.alignment
    }

    pub fn variant(&self) -> Option<Variant> {
        self.variant
    }

    pub fn count_kind(&self, kind: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    pub fn input_channels(&self, id: NodeId) -> usize {
        self.nodes[id].inputs.first().map_or(0, |&i| self.nodes[i].channels)
    }

    /// Every parameter slot in node order.
    pub fn param_slots(&self) -> Vec<ParamSlot> {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(id, n)| n.slots(self.input_channels(id)))
            .collect()
    }

    /// Ids of the nodes that read `id`'s output.
    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.contains(&id))
            .map(|(i, _)| i)
            .collect()
    }

    /// Rejects misaligned or malformed inputs; the input must be
    /// `(N, H, W, 1)` with `H` and `W` multiples of [`Graph::alignment`].
    pub fn check_input(&self, input: Shape) -> Result<()> {
        ensure!(
            input.channels == self.nodes[0].channels,
            Shape,
            "input must have {} channel(s), got {}",
            self.nodes[0].channels,
            input.channels
        );
        if !input.height.is_multiple_of(self.alignment) || !input.width.is_multiple_of(self.alignment) {
            return Err(Error::Alignment {
                height: input.height,
                width: input.width,
                divisor: self.alignment,
            });
        }
        Ok(())
    }

    /// Static output shape of every node for a given input shape.
    pub fn infer_shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        self.check_input(input)?;
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let arg = |k: usize| shapes[node.inputs[k]];
            let shape = match &node.op {
                Op::Input => input,
                Op::Conv2d { params, out_channels } => {
                    let in_shape = arg(0);
                    let weights = Shape::new(
                        *out_channels,
                        params.kernel_height,
                        params.kernel_width,
                        (in_shape.channels / params.groups).max(1),
                    )?;
                    kernels::conv2d_output_shape(in_shape, weights, *out_channels, params)?.0
                }
                Op::DepthwiseConv2d { kernel, stride } => {
                    let in_shape = arg(0);
                    let weights = Shape::new(in_shape.channels, *kernel, *kernel, 1)?;
                    kernels::depthwise_output_shape(in_shape, weights, in_shape.channels, *stride)?.0
                }
                Op::Prelu | Op::Tanh | Op::Sigmoid | Op::InstanceNorm { .. } => arg(0),
                Op::MaxPool2x2 => kernels::max_pool_shape(arg(0))?,
                Op::GlobalAvgPool => arg(0).with_spatial(1, 1),
                Op::ResizeBilinearX2 => {
                    let s = arg(0);
                    s.with_spatial(s.height * 2, s.width * 2)
                }
                Op::SpaceToDepth => kernels::space_to_depth_shape(arg(0))?,
                Op::DepthToSpace => kernels::depth_to_space_shape(arg(0))?,
                Op::Concat => kernels::concat_shape(arg(0), arg(1))?,
                Op::Add | Op::Mul => kernels::broadcast_shape(arg(0), arg(1))?,
                Op::Split { start, len } => kernels::slice_shape(arg(0), *start, *len)?,
                Op::Custom { .. } => arg(0),
            };
            ensure!(
                shape.channels == node.channels,
                Shape,
                "node {id} ({}) infers {} channels, declared {}",
                node.name,
                shape.channels,
                node.channels
            );
            shapes.push(shape);
        }
        Ok(shapes)
    }
}

/// Incremental graph construction with unique scope names.
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    names: HashSet<String>,
}

impl GraphBuilder {
    /// Starts a graph whose input has `channels` channels.
    pub fn new(channels: usize) -> Self {
        let mut b = GraphBuilder {
            nodes: Vec::new(),
            names: HashSet::new(),
        };
        b.nodes.push(Node {
            op: Op::Input,
            inputs: Vec::new(),
            name: "input".into(),
            channels,
        });
        b.names.insert("input".into());
        b
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.nodes[id].channels
    }

    /// Appends a node. Fails on duplicate names or forward references.
    pub fn push(&mut self, op: Op, inputs: &[NodeId], name: impl Into<String>, channels: usize) -> Result<NodeId> {
        let name = name.into();
        ensure!(
            self.names.insert(name.clone()),
            Config,
            "duplicate node name `{name}`"
        );
        let id = self.nodes.len();
        ensure!(
            inputs.iter().all(|&i| i < id),
            Config,
            "node `{name}` references a later node"
        );
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            name,
            channels,
        });
        Ok(id)
    }

    pub fn conv(&mut self, x: NodeId, name: &str, out_channels: usize, kernel: usize, stride: usize, groups: usize) -> Result<NodeId> {
        let in_c = self.channels(x);
        ensure!(
            in_c.is_multiple_of(groups) && out_channels.is_multiple_of(groups),
            Config,
            "conv `{name}`: {in_c} -> {out_channels} channels not divisible by {groups} groups"
        );
        self.push(
            Op::Conv2d {
                params: ConvParams::same(kernel, stride, groups),
                out_channels,
            },
            &[x],
            name,
            out_channels,
        )
    }

    pub fn depthwise(&mut self, x: NodeId, name: &str, kernel: usize, stride: usize) -> Result<NodeId> {
        let c = self.channels(x);
        self.push(Op::DepthwiseConv2d { kernel, stride }, &[x], name, c)
    }

    pub fn unary(&mut self, op: Op, x: NodeId, name: &str) -> Result<NodeId> {
        let c = match op {
            Op::SpaceToDepth => self.channels(x) * 4,
            Op::DepthToSpace => self.channels(x) / 4,
            _ => self.channels(x),
        };
        self.push(op, &[x], name, c)
    }

    pub fn prelu(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        self.unary(Op::Prelu, x, name)
    }

    pub fn conv_prelu(&mut self, x: NodeId, name: &str, out_channels: usize, kernel: usize, stride: usize) -> Result<NodeId> {
        let c = self.conv(x, &format!("{name}.conv"), out_channels, kernel, stride, 1)?;
        self.prelu(c, &format!("{name}.act"))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<NodeId> {
        let c = self.channels(a) + self.channels(b);
        self.push(Op::Concat, &[a, b], name, c)
    }

    pub fn binary(&mut self, op: Op, a: NodeId, b: NodeId, name: &str) -> Result<NodeId> {
        let c = self.channels(a);
        self.push(op, &[a, b], name, c)
    }

    pub fn split(&mut self, x: NodeId, start: usize, len: usize, name: &str) -> Result<NodeId> {
        ensure!(
            len >= 1 && start + len <= self.channels(x),
            Config,
            "split `{name}` outside input channels"
        );
        self.push(Op::Split { start, len }, &[x], name, len)
    }

    pub fn finish(self, alignment: usize, variant: Option<Variant>) -> Graph {
        Graph {
            nodes: self.nodes,
            alignment,
            variant,
        }
    }
}
