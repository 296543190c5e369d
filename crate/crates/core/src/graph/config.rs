use std::fmt;
use std::str::FromStr;

use crate::error::{ensure, Error, Result};

/// Finest-scale channel count of the shipped default. Chosen by
/// [`calibrate_base_width`](super::calibrate_base_width) as the width whose
/// FP32 parameter payload lands nearest 3.6 MB.
pub const DEFAULT_BASE_WIDTH: usize = 32;

/// FP32 export size the default configuration is calibrated against.
pub const TARGET_MODEL_BYTES: u64 = 3_600_000;

pub const SCALES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Base,
    /// No instance normalization anywhere.
    NoNorm,
    /// Stride-2 stem, doubled widths, one extra pixel-shuffle stage.
    Slim,
    /// Slim with depthwise 5×5 convolutions after each upsample.
    SlimPlus,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::NoNorm, Variant::Slim, Variant::SlimPlus];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::NoNorm => "nonorm",
            Variant::Slim => "slim",
            Variant::SlimPlus => "slim+",
        }
    }

    pub fn is_slim(self) -> bool {
        matches!(self, Variant::Slim | Variant::SlimPlus)
    }

    pub fn uses_norm(self) -> bool {
        !matches!(self, Variant::NoNorm)
    }

    /// Required divisor of the sensor height and width.
    pub fn alignment(self) -> usize {
        if self.is_slim() {
            16
        } else {
            8
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Variant::Base),
            "nonorm" => Ok(Variant::NoNorm),
            "slim" => Ok(Variant::Slim),
            "slim+" | "slim_plus" | "slimplus" => Ok(Variant::SlimPlus),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected base, nonorm, slim or slim+)"
            ))),
        }
    }
}

/// Attention block appended after a scale's residual stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attention {
    None,
    Channel,
    Spatial,
}

/// How features move from one scale to the next coarser one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Downsample {
    /// 2×2 max pooling followed by a 3×3 convolution to the new width.
    MaxPool,
    /// A single stride-2 3×3 convolution.
    StridedConv,
}

/// Structural constants of the network. Per-scale arrays are ordered from
/// the coarsest scale to the finest.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub base_width: usize,
    pub blocks_per_scale: [usize; SCALES],
    pub groups_per_scale: [usize; SCALES],
    pub attention: [Attention; SCALES],
    pub downsample: Downsample,
    pub variant: Variant,
    pub instance_norm_epsilon: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: DEFAULT_BASE_WIDTH,
            blocks_per_scale: [4, 2, 2],
            groups_per_scale: [4, 2, 2],
            attention: [Attention::Channel, Attention::Channel, Attention::Spatial],
            downsample: Downsample::MaxPool,
            variant: Variant::Base,
            instance_norm_epsilon: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn for_variant(variant: Variant) -> Self {
        ModelConfig {
            variant,
            ..Default::default()
        }
    }

    /// Channel count at scale `i` (0 = coarsest). Halves towards finer
    /// scales; slim variants double everything.
    pub fn width(&self, scale: usize) -> usize {
        let mult = if self.variant.is_slim() { 2 } else { 1 };
        (self.base_width * mult) << (SCALES - 1 - scale)
    }

    pub fn alignment(&self) -> usize {
        self.variant.alignment()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_width >= 1, Config, "base_width must be >= 1");
        ensure!(
            self.instance_norm_epsilon > 0.0 && self.instance_norm_epsilon.is_finite(),
            Config,
            "instance_norm_epsilon must be a positive finite number"
        );
        for scale in 0..SCALES {
            let groups = self.groups_per_scale[scale];
            ensure!(
                (2..=4).contains(&groups),
                Config,
                "groups at scale {scale} is {groups}, must be in 2..=4"
            );
            let width = self.width(scale);
            ensure!(
                width.is_multiple_of(groups),
                Config,
                "width {width} at scale {scale} not divisible by {groups} groups"
            );
        }
        Ok(())
    }
}
