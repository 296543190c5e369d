//! Operator library.
//!
//! Every operator exists twice: [`Reference`] is a direct loop transcription
//! of the definition and serves as the oracle, [`Optimized`] is the fast path
//! used for inference. Both implement [`Backend`], so the graph executor and
//! the verification suite can run either one. Argument validation lives in
//! this module and is shared, so both paths fail identically.

mod optimized;
mod reference;

pub use optimized::Optimized;
pub use reference::Reference;

use crate::error::{ensure, Result};
use crate::tensor::{Shape, Tensor};

/// Largest `f32` strictly below one.
pub const ONE_BELOW: f32 = 1.0 - f32::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding with output extent `ceil(in / stride)`; any odd pad
    /// pixel goes to the bottom/right edge.
    SameZero,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub kernel_height: usize,
    pub kernel_width: usize,
    pub stride: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl ConvParams {
    pub fn same(kernel: usize, stride: usize, groups: usize) -> Self {
        ConvParams {
            kernel_height: kernel,
            kernel_width: kernel,
            stride,
            groups,
            padding: Padding::SameZero,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams<'a> {
    pub epsilon: f32,
    pub gamma: &'a [f32],
    pub beta: &'a [f32],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
}

/// `tanh` kept inside the open interval (-1, 1) even where `f32` rounding
/// would saturate to exactly ±1.
#[inline]
pub fn tanh_open(x: f32) -> f32 {
    x.tanh().clamp(-ONE_BELOW, ONE_BELOW)
}

/// Logistic function kept inside the open interval (0, 1).
#[inline]
pub fn sigmoid_open(x: f32) -> f32 {
    (1.0 / (1.0 + (-x).exp())).clamp(f32::MIN_POSITIVE, ONE_BELOW)
}

#[inline]
pub(crate) fn apply_activation(kind: Activation, x: f32) -> f32 {
    match kind {
        Activation::Tanh => tanh_open(x),
        Activation::Sigmoid => sigmoid_open(x),
    }
}

/// Output extents and leading padding of a 2-D window operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub out_height: usize,
    pub out_width: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn axis_geometry(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::SameZero => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            ensure!(
                input >= kernel,
                Shape,
                "valid padding needs input extent {input} >= kernel {kernel}"
            );
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

pub fn conv_geometry(
    in_height: usize,
    in_width: usize,
    kernel_height: usize,
    kernel_width: usize,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    let (out_height, pad_top) = axis_geometry(in_height, kernel_height, stride, padding)?;
    let (out_width, pad_left) = axis_geometry(in_width, kernel_width, stride, padding)?;
    Ok(ConvGeometry {
        out_height,
        out_width,
        pad_top,
        pad_left,
    })
}

fn check_kernel_size(k: usize) -> Result<()> {
    ensure!(
        matches!(k, 1 | 3 | 5),
        Config,
        "kernel size {k} not in {{1, 3, 5}}"
    );
    Ok(())
}

/// Validates a grouped convolution and returns its output shape.
pub fn conv2d_output_shape(input: Shape, weights: Shape, bias_len: usize, p: &ConvParams) -> Result<(Shape, ConvGeometry)> {
    check_kernel_size(p.kernel_height)?;
    check_kernel_size(p.kernel_width)?;
    ensure!(p.stride >= 1, Config, "stride must be >= 1");
    ensure!(p.groups >= 1, Config, "groups must be >= 1");
    let [out_c, kh, kw, in_per_group] = weights.dims();
    ensure!(
        kh == p.kernel_height && kw == p.kernel_width,
        Config,
        "weight kernel {kh}x{kw} does not match params {}x{}",
        p.kernel_height,
        p.kernel_width
    );
    ensure!(
        input.channels == p.groups * in_per_group,
        Config,
        "input channels {} != groups {} * per-group channels {in_per_group}",
        input.channels,
        p.groups
    );
    ensure!(
        out_c % p.groups == 0,
        Config,
        "output channels {out_c} not divisible by groups {}",
        p.groups
    );
    ensure!(
        bias_len == out_c,
        Config,
        "bias length {bias_len} != output channels {out_c}"
    );
    let geo = conv_geometry(input.height, input.width, kh, kw, p.stride, p.padding)?;
    Ok((
        Shape {
            height: geo.out_height,
            width: geo.out_width,
            channels: out_c,
            ..input
        },
        geo,
    ))
}

/// Depthwise weights are stored as a `(channels, kh, kw, 1)` tensor.
pub fn depthwise_output_shape(input: Shape, weights: Shape, bias_len: usize, stride: usize) -> Result<(Shape, ConvGeometry)> {
    let [c, kh, kw, one] = weights.dims();
    ensure!(one == 1, Config, "depthwise weights must have a trailing extent of 1");
    check_kernel_size(kh)?;
    check_kernel_size(kw)?;
    ensure!(stride >= 1, Config, "stride must be >= 1");
    ensure!(
        c == input.channels,
        Config,
        "depthwise weight channels {c} != input channels {}",
        input.channels
    );
    ensure!(bias_len == c, Config, "bias length {bias_len} != channels {c}");
    let geo = conv_geometry(input.height, input.width, kh, kw, stride, Padding::SameZero)?;
    Ok((input.with_spatial(geo.out_height, geo.out_width), geo))
}

pub(crate) fn check_prelu(input: Shape, slopes: &[f32]) -> Result<()> {
    ensure!(
        slopes.len() == input.channels,
        Shape,
        "prelu slope count {} != channels {}",
        slopes.len(),
        input.channels
    );
    Ok(())
}

pub(crate) fn check_norm(input: Shape, p: &NormParams) -> Result<()> {
    ensure!(p.epsilon > 0.0, Config, "instance norm epsilon must be > 0");
    ensure!(
        p.gamma.len() == input.channels && p.beta.len() == input.channels,
        Shape,
        "gamma/beta lengths {}/{} != channels {}",
        p.gamma.len(),
        p.beta.len(),
        input.channels
    );
    Ok(())
}

pub fn space_to_depth_shape(input: Shape) -> Result<Shape> {
    ensure!(
        input.height.is_multiple_of(2) && input.width.is_multiple_of(2),
        Shape,
        "space_to_depth needs even spatial dims, got {}x{}",
        input.height,
        input.width
    );
    Ok(Shape {
        height: input.height / 2,
        width: input.width / 2,
        channels: input.channels * 4,
        ..input
    })
}

pub fn depth_to_space_shape(input: Shape) -> Result<Shape> {
    ensure!(
        input.channels.is_multiple_of(4),
        Shape,
        "depth_to_space needs channels divisible by 4, got {}",
        input.channels
    );
    Ok(Shape {
        height: input.height * 2,
        width: input.width * 2,
        channels: input.channels / 4,
        ..input
    })
}

pub fn max_pool_shape(input: Shape) -> Result<Shape> {
    ensure!(
        input.height.is_multiple_of(2) && input.width.is_multiple_of(2),
        Shape,
        "max_pool_2x2 needs even spatial dims, got {}x{}",
        input.height,
        input.width
    );
    Ok(input.with_spatial(input.height / 2, input.width / 2))
}

pub fn concat_shape(a: Shape, b: Shape) -> Result<Shape> {
    ensure!(
        a.batch == b.batch && a.height == b.height && a.width == b.width,
        Shape,
        "concat needs equal batch/spatial dims, got {a} and {b}"
    );
    Ok(a.with_channels(a.channels + b.channels))
}

/// `b` must match `a` or be 1 in every dimension; it broadcasts over the
/// unit dimensions.
pub fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let ok = a
        .dims()
        .iter()
        .zip(b.dims())
        .all(|(&da, db)| db == da || db == 1);
    ensure!(ok, Shape, "cannot broadcast {b} onto {a}");
    Ok(a)
}

pub fn slice_shape(input: Shape, start: usize, len: usize) -> Result<Shape> {
    ensure!(
        len >= 1 && start + len <= input.channels,
        Shape,
        "channel slice {start}..{} outside {} channels",
        start + len,
        input.channels
    );
    Ok(input.with_channels(len))
}

/// The full operator set. Implementations must be pure functions of their
/// arguments.
pub trait Backend: Send + Sync {
    fn name(&self) -> &'static str;

    fn conv2d(&self, input: &Tensor, weights: &Tensor, bias: &[f32], p: &ConvParams) -> Result<Tensor>;

    fn depthwise_conv2d(&self, input: &Tensor, weights: &Tensor, bias: &[f32], stride: usize) -> Result<Tensor>;

    fn prelu(&self, input: &Tensor, slopes: &[f32]) -> Result<Tensor>;

    fn activation(&self, kind: Activation, input: &Tensor) -> Tensor;

    fn instance_norm(&self, input: &Tensor, p: &NormParams) -> Result<Tensor>;

    fn bilinear_upsample_x2(&self, input: &Tensor) -> Tensor;

    fn space_to_depth(&self, input: &Tensor) -> Result<Tensor>;

    fn depth_to_space(&self, input: &Tensor) -> Result<Tensor>;

    fn max_pool_2x2(&self, input: &Tensor) -> Result<Tensor>;

    fn global_avg_pool(&self, input: &Tensor) -> Tensor;

    fn concat_channels(&self, a: &Tensor, b: &Tensor) -> Result<Tensor>;

    fn elementwise(&self, kind: Elementwise, a: &Tensor, b: &Tensor) -> Result<Tensor>;

    fn slice_channels(&self, input: &Tensor, start: usize, len: usize) -> Result<Tensor>;
}

/// Source coordinate and interpolation weight for one output index of a
/// half-pixel-centre ×2 resize: `(low, high, frac)`.
#[inline]
pub(crate) fn bilinear_tap(out_index: usize, in_extent: usize) -> (usize, usize, f32) {
    let src = ((out_index as f32 + 0.5) * 0.5 - 0.5).max(0.0);
    let low = (src.floor() as usize).min(in_extent - 1);
    let high = (low + 1).min(in_extent - 1);
    (low, high, src - low as f32)
}
