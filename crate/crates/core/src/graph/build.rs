use super::config::{Attention, Downsample, ModelConfig, Variant, SCALES};
use super::{Graph, GraphBuilder, NodeId, Op};
use crate::error::{ensure, Result};

/// Channels produced by the head convolution before each 2× pixel shuffle.
const HEAD_CHANNELS: usize = 12;

/// Builds the network for `config`.
///
/// Layout, finest scale at half sensor resolution:
///
/// ```text
/// bayer ─ s2d ─ stem ─┬──────────────── pool+conv ──┬── pool+conv ── blocks ─ CAM ─┐
///                     │                             │                              up
///                     │                             └─ concat ─ merge ─ blocks ─ CAM
///                     │                                                            up
///                     └──────────────────────────────── concat ─ merge ─ blocks ─ SAM
///                                                                                  head
/// ```
pub fn build_model(config: &ModelConfig) -> Result<Graph> {
    config.validate()?;
    let variant = config.variant;
    let mut g = GraphBuilder::new(1);

    let bayer = g.unary(Op::SpaceToDepth, g.input(), "stem.s2d")?;
    let stem_stride = if variant.is_slim() { 2 } else { 1 };
    let finest = SCALES - 1;
    let stem = g.conv_prelu(bayer, "stem", config.width(finest), 3, stem_stride)?;

    // Encoder features per scale, index 0 = coarsest.
    let mut skips: [NodeId; SCALES] = [stem; SCALES];
    for scale in (0..finest).rev() {
        let prev = skips[scale + 1];
        let name = format!("down{scale}");
        let width = config.width(scale);
        skips[scale] = match config.downsample {
            Downsample::MaxPool => {
                let pooled = g.unary(Op::MaxPool2x2, prev, &format!("{name}.pool"))?;
                g.conv_prelu(pooled, &name, width, 3, 1)?
            }
            Downsample::StridedConv => g.conv_prelu(prev, &name, width, 3, 2)?,
        };
    }

    let mut x = skips[0];
    for scale in 0..SCALES {
        let width = config.width(scale);
        if scale > 0 {
            x = fusion_stage(&mut g, x, skips[scale], width, variant, &format!("fuse{scale}"))?;
        }
        for block in 0..config.blocks_per_scale[scale] {
            x = grouped_residual_block(
                &mut g,
                x,
                config.groups_per_scale[scale],
                variant.uses_norm().then_some(config.instance_norm_epsilon),
                &format!("scale{scale}.block{block}"),
            )?;
        }
        x = match config.attention[scale] {
            Attention::None => x,
            Attention::Channel => cam_block(&mut g, x, &format!("scale{scale}.cam"))?,
            Attention::Spatial => sam_block(&mut g, x, &format!("scale{scale}.sam"))?,
        };
    }

    let head = g.conv(x, "head.conv", HEAD_CHANNELS, 3, 1, 1)?;
    let mut out = if variant.is_slim() {
        let act = g.prelu(head, "head.act")?;
        let shuffled = g.unary(Op::DepthToSpace, act, "head.d2s")?;
        let head2 = g.conv(shuffled, "head2.conv", HEAD_CHANNELS, 3, 1, 1)?;
        g.unary(Op::DepthToSpace, head2, "head2.d2s")?
    } else {
        g.unary(Op::DepthToSpace, head, "head.d2s")?
    };
    out = g.unary(Op::Tanh, out, "output")?;
    debug_assert_eq!(g.channels(out), 3);

    Ok(g.finish(config.alignment(), Some(variant)))
}

/// Upsamples the coarser features, refines them, concatenates with the
/// encoder skip at this scale and merges back to `width` channels.
///
/// Slim+ narrows the coarse features with the 3×3 conv before upsampling,
/// where it costs a quarter as much, and refines the upsampled map with a
/// 5×5 depthwise conv instead.
fn fusion_stage(g: &mut GraphBuilder, coarse: NodeId, skip: NodeId, width: usize, variant: Variant, name: &str) -> Result<NodeId> {
    let refined = if variant == Variant::SlimPlus {
        let narrow = g.conv_prelu(coarse, &format!("{name}.reduce"), width, 3, 1)?;
        let up = g.unary(Op::ResizeBilinearX2, narrow, &format!("{name}.resize"))?;
        let dw = g.depthwise(up, &format!("{name}.up_dw"), 5, 1)?;
        g.prelu(dw, &format!("{name}.up_dw_act"))?
    } else {
        let up = g.unary(Op::ResizeBilinearX2, coarse, &format!("{name}.resize"))?;
        g.conv_prelu(up, &format!("{name}.up"), width, 3, 1)?
    };
    let cat = g.concat(refined, skip, &format!("{name}.concat"))?;
    g.conv_prelu(cat, &format!("{name}.merge"), width, 3, 1)
}

/// Residual block over `groups` parallel 3×3 branches. Every second branch
/// is instance-normalized when `norm_epsilon` is set.
pub fn grouped_residual_block(g: &mut GraphBuilder, x: NodeId, groups: usize, norm_epsilon: Option<f32>, name: &str) -> Result<NodeId> {
    let width = g.channels(x);
    ensure!(
        groups >= 1 && width.is_multiple_of(groups),
        Config,
        "block `{name}`: width {width} not divisible by {groups} groups"
    );
    let branch_width = width / groups;
    let mut joined: Option<NodeId> = None;
    for branch in 0..groups {
        let scope = format!("{name}.branch{branch}");
        let part = g.split(x, branch * branch_width, branch_width, &format!("{scope}.split"))?;
        let mut y = g.conv(part, &format!("{scope}.conv"), branch_width, 3, 1, 1)?;
        if let Some(epsilon) = norm_epsilon {
            if branch % 2 == 1 {
                y = g.unary(Op::InstanceNorm { epsilon }, y, &format!("{scope}.norm"))?;
            }
        }
        y = g.prelu(y, &format!("{scope}.act"))?;
        joined = Some(match joined {
            None => y,
            Some(prev) => g.concat(prev, y, &format!("{scope}.concat"))?,
        });
    }
    let joined = joined.expect("at least one branch");
    g.binary(Op::Add, joined, x, &format!("{name}.residual"))
}

/// Channel attention: a 3×3 trunk gated by per-channel coefficients that
/// are computed at one ninth of the resolution and pooled to 1×1.
pub fn cam_block(g: &mut GraphBuilder, x: NodeId, name: &str) -> Result<NodeId> {
    let width = g.channels(x);
    let trunk = g.conv_prelu(x, &format!("{name}.trunk"), width, 3, 1)?;
    let a = g.conv_prelu(trunk, &format!("{name}.reduce"), width, 1, 1)?;
    let a = g.conv_prelu(a, &format!("{name}.stride3"), width, 3, 3)?;
    let a = g.unary(Op::GlobalAvgPool, a, &format!("{name}.pool"))?;
    let a = g.conv_prelu(a, &format!("{name}.fc1"), width, 1, 1)?;
    let a = g.conv(a, &format!("{name}.fc2.conv"), width, 1, 1, 1)?;
    let coeffs = g.unary(Op::Sigmoid, a, &format!("{name}.gate"))?;
    g.binary(Op::Mul, trunk, coeffs, &format!("{name}.scale"))
}

/// Spatial attention: a per-pixel, per-channel sigmoid mask from a 3×3
/// convolution and a 5×5 depthwise convolution.
pub fn sam_block(g: &mut GraphBuilder, x: NodeId, name: &str) -> Result<NodeId> {
    let width = g.channels(x);
    let m = g.conv_prelu(x, &format!("{name}.conv"), width, 3, 1)?;
    let m = g.depthwise(m, &format!("{name}.dw"), 5, 1)?;
    let mask = g.unary(Op::Sigmoid, m, &format!("{name}.gate"))?;
    g.binary(Op::Mul, x, mask, &format!("{name}.scale"))
}
