use std::fmt::Write as _;

use super::{build_model, Graph, ModelConfig, NodeId, Op};
use crate::error::{ensure, Result};
use crate::tensor::Shape;

/// Operators a graph may contain to be deployable on an NNAPI 1.2 driver.
pub const OPSET_ALLOWLIST: &[&str] = &[
    "conv2d",
    "depthwise_conv2d",
    "prelu",
    "tanh",
    "sigmoid",
    "instance_norm",
    "avg_pool",
    "max_pool",
    "resize_bilinear",
    "space_to_depth",
    "depth_to_space",
    "concat",
    "add",
    "mul",
    "split",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpsetViolation {
    pub node: NodeId,
    pub name: String,
    pub kind: String,
}

/// Every operator node whose kind is outside [`OPSET_ALLOWLIST`]. The input
/// placeholder is not an operator and is never reported.
pub fn lint_opset(graph: &Graph) -> Vec<OpsetViolation> {
    graph
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| !matches!(n.op, Op::Input))
        .filter(|(_, n)| !OPSET_ALLOWLIST.contains(&n.op.kind()))
        .map(|(id, n)| OpsetViolation {
            node: id,
            name: n.name.clone(),
            kind: n.op.kind().to_string(),
        })
        .collect()
}

fn node_params(graph: &Graph, id: NodeId) -> u64 {
    graph.nodes()[id]
        .slots(graph.input_channels(id))
        .iter()
        .map(|s| s.len() as u64)
        .sum()
}

/// Learnable values: convolution weights and biases, PReLU slopes and
/// instance-norm gamma/beta.
pub fn count_params(graph: &Graph) -> u64 {
    (0..graph.nodes().len()).map(|id| node_params(graph, id)).sum()
}

fn node_macs(graph: &Graph, id: NodeId, shapes: &[Shape]) -> u64 {
    let node = &graph.nodes()[id];
    let out = shapes[id];
    let pixels = (out.batch * out.height * out.width) as u64;
    match &node.op {
        Op::Conv2d { params, out_channels } => {
            let in_c = shapes[node.inputs[0]].channels;
            pixels * (*out_channels * params.kernel_height * params.kernel_width * (in_c / params.groups)) as u64
        }
        Op::DepthwiseConv2d { kernel, .. } => pixels * (out.channels * kernel * kernel) as u64,
        _ => 0,
    }
}

/// Multiply-accumulates of all convolution nodes at `input`.
pub fn count_macs(graph: &Graph, input: Shape) -> Result<u64> {
    let shapes = graph.infer_shapes(input)?;
    Ok((0..shapes.len()).map(|id| node_macs(graph, id, &shapes)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryEstimate {
    /// Largest total of simultaneously live activation buffers.
    pub peak_activation_bytes: u64,
    /// Node whose execution reaches the peak.
    pub peak_node: NodeId,
    pub weight_bytes: u64,
}

/// Simulates the executor's policy: nodes run in order, each output is
/// allocated before any input is released, and a buffer is freed right after
/// its last consumer runs. The input buffer counts as live until its last
/// consumer; the graph output is never freed.
pub fn estimate_peak_memory(graph: &Graph, input: Shape) -> Result<MemoryEstimate> {
    let shapes = graph.infer_shapes(input)?;
    let nodes = graph.nodes();
    let mut uses = vec![0usize; nodes.len()];
    for node in nodes {
        for &i in &node.inputs {
            uses[i] += 1;
        }
    }
    let mut live = 0u64;
    let mut peak = (0u64, 0usize);
    for (id, node) in nodes.iter().enumerate() {
        live += shapes[id].bytes();
        if live > peak.0 {
            peak = (live, id);
        }
        for &i in &node.inputs {
            uses[i] -= 1;
            if uses[i] == 0 && i != graph.output() {
                live -= shapes[i].bytes();
            }
        }
    }
    Ok(MemoryEstimate {
        peak_activation_bytes: peak.0,
        peak_node: peak.1,
        weight_bytes: count_params(graph) * 4,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphReport {
    pub parameter_count: u64,
    pub mac_count: u64,
    pub peak_activation_bytes: u64,
    pub weight_bytes: u64,
    pub opset_violations: Vec<OpsetViolation>,
}

impl GraphReport {
    pub fn analyze(graph: &Graph, input: Shape) -> Result<Self> {
        let memory = estimate_peak_memory(graph, input)?;
        Ok(GraphReport {
            parameter_count: count_params(graph),
            mac_count: count_macs(graph, input)?,
            peak_activation_bytes: memory.peak_activation_bytes,
            weight_bytes: memory.weight_bytes,
            opset_violations: lint_opset(graph),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRow {
    pub id: NodeId,
    pub name: String,
    pub kind: String,
    pub shape: Shape,
    pub params: u64,
    pub macs: u64,
}

pub fn node_table(graph: &Graph, input: Shape) -> Result<Vec<NodeRow>> {
    let shapes = graph.infer_shapes(input)?;
    Ok(graph
        .nodes()
        .iter()
        .enumerate()
        .map(|(id, n)| NodeRow {
            id,
            name: n.name.clone(),
            kind: n.op.kind().to_string(),
            shape: shapes[id],
            params: node_params(graph, id),
            macs: node_macs(graph, id, &shapes),
        })
        .collect())
}

/// Plain-text node table followed by totals and the op-set lint result.
pub fn render_report(graph: &Graph, input: Shape) -> Result<String> {
    let rows = node_table(graph, input)?;
    let report = GraphReport::analyze(graph, input)?;
    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>4}  {:<name_w$}  {:<16}  {:<22}  {:>10}  {:>14}",
        "id", "name", "kind", "shape", "params", "macs"
    );
    for r in &rows {
        let _ = writeln!(
            out,
            "{:>4}  {:<name_w$}  {:<16}  {:<22}  {:>10}  {:>14}",
            r.id,
            r.name,
            r.kind,
            r.shape.to_string(),
            r.params,
            r.macs
        );
    }
    let _ = writeln!(out);
    if let Some(v) = graph.variant() {
        let _ = writeln!(out, "variant: {v}");
    }
    let _ = writeln!(out, "input: {input}");
    let _ = writeln!(out, "nodes: {}", rows.len());
    let _ = writeln!(out, "parameters: {}", report.parameter_count);
    let _ = writeln!(
        out,
        "weight bytes (fp32): {} ({:.2} MB)",
        report.weight_bytes,
        report.weight_bytes as f64 / 1e6
    );
    let _ = writeln!(
        out,
        "macs: {} ({:.2} G)",
        report.mac_count,
        report.mac_count as f64 / 1e9
    );
    let _ = writeln!(
        out,
        "peak activation bytes: {} ({:.3} GB)",
        report.peak_activation_bytes,
        report.peak_activation_bytes as f64 / 1e9
    );
    if report.opset_violations.is_empty() {
        let _ = writeln!(out, "opset violations: none");
    } else {
        let kinds: Vec<String> = report
            .opset_violations
            .iter()
            .map(|v| format!("{} ({})", v.kind, v.name))
            .collect();
        let _ = writeln!(out, "opset violations: {}", kinds.join(", "));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Calibration {
    pub width: usize,
    pub bytes: u64,
    /// `(width, fp32 bytes)` for every valid candidate.
    pub table: Vec<(usize, u64)>,
}

/// Picks the base width whose FP32 parameter payload is nearest
/// `target_bytes`. Candidates the template cannot be built with are
/// skipped; ties go to the smaller width.
pub fn calibrate_base_width(
    template: &ModelConfig,
    target_bytes: u64,
    candidates: impl IntoIterator<Item = usize>,
) -> Result<Calibration> {
    let mut table = Vec::new();
    for width in candidates {
        let cfg = ModelConfig {
            base_width: width,
            ..template.clone()
        };
        if let Ok(graph) = build_model(&cfg) {
            table.push((width, count_params(&graph) * 4));
        }
    }
    ensure!(!table.is_empty(), Config, "no buildable candidate width");
    let &(width, bytes) = table
        .iter()
        .min_by_key(|(w, b)| (b.abs_diff(target_bytes), *w))
        .expect("non-empty");
    Ok(Calibration { width, bytes, table })
}
