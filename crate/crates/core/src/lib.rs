//! RAW-to-RGB photo processing with a three-scale mobile CNN.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `(batch, height, width, channels)` tensors.
//! - [`kernels`]: the operator library, each operator with a reference and
//!   an optimized implementation.
//! - [`graph`]: model construction, execution and static analysis.
//! - [`weights`]: the `.p2w` named-tensor container.
//! - [`raw`]: Bayer frame ingestion and RGB output.
//! - [`metrics`]: PSNR and SSIM.
//! - [`bench`] and [`verify`]: latency measurement and oracle suites.

pub mod error;
pub mod graph;
pub mod kernels;
pub mod tensor;
pub mod weights;
pub mod raw;
pub mod metrics;
pub mod bench;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
