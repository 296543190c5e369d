//! Dense rank-4 `f32` tensors in batch, row, column, channel order.

use std::fmt;

use crate::error::{ensure, Error, Result};

/// Extents of a rank-4 tensor. Every extent is at least one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(batch: usize, height: usize, width: usize, channels: usize) -> Result<Self> {
        ensure!(
            batch >= 1 && height >= 1 && width >= 1 && channels >= 1,
            InvalidShape,
            "every extent must be >= 1, got ({batch}, {height}, {width}, {channels})"
        );
        Ok(Shape {
            batch,
            height,
            width,
            channels,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.height, self.width, self.channels]
    }

    pub fn len(&self) -> usize {
        self.batch * self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of bytes an `f32` tensor of this shape occupies.
    pub fn bytes(&self) -> u64 {
        self.len() as u64 * 4
    }

    /// Flat offset of `(b, h, w, c)` in the canonical layout.
    #[inline]
    pub fn offset(&self, b: usize, h: usize, w: usize, c: usize) -> usize {
        ((b * self.height + h) * self.width + w) * self.channels + c
    }

    pub(crate) fn with_channels(self, channels: usize) -> Self {
        Shape { channels, ..self }
    }

    pub(crate) fn with_spatial(self, height: usize, width: usize) -> Self {
        Shape {
            height,
            width,
            ..self
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.height, self.width, self.channels
        )
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn filled(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Builds a tensor from raw dims, rejecting zero extents.
    pub fn filled_dims(dims: [usize; 4], value: f32) -> Result<Self> {
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
        Ok(Self::filled(shape, value))
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == shape.len(),
            InvalidShape,
            "data length {} does not match shape {shape} ({} elements)",
            data.len(),
            shape.len()
        );
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.batch {
            for h in 0..shape.height {
                for w in 0..shape.width {
                    for c in 0..shape.channels {
                        data.push(f(b, h, w, c));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    fn checked_offset(&self, b: usize, h: usize, w: usize, c: usize) -> Result<usize> {
        let s = self.shape;
        if b >= s.batch || h >= s.height || w >= s.width || c >= s.channels {
            return Err(Error::Bounds(format!(
                "index ({b}, {h}, {w}, {c}) outside shape {s}"
            )));
        }
        Ok(s.offset(b, h, w, c))
    }

    pub fn at(&self, b: usize, h: usize, w: usize, c: usize) -> Result<f32> {
        Ok(self.data[self.checked_offset(b, h, w, c)?])
    }

    /// Writes one element. Only available while the tensor is singly owned,
    /// i.e. before it is handed to a graph.
    pub fn set(&mut self, b: usize, h: usize, w: usize, c: usize, value: f32) -> Result<()> {
        let i = self.checked_offset(b, h, w, c)?;
        self.data[i] = value;
        Ok(())
    }

    /// Unchecked read for hot loops; panics on out-of-range indices.
    #[inline]
    pub fn get(&self, b: usize, h: usize, w: usize, c: usize) -> f32 {
        self.data[self.shape.offset(b, h, w, c)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        ensure!(
            self.shape == other.shape,
            Shape,
            "cannot compare {} with {}",
            self.shape,
            other.shape
        );
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}
