//! Image, mask and label-map containers.
//!
//! Layout is channel-planar and row-major everywhere: element `(c, i, j)`
//! lives at `c * H * W + i * W + j`. Pixel values use the `[-1, 1]` range.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest label code of the 19-class face parsing convention.
pub const MAX_LABEL: u8 = 18;

/// Real-valued `C x H x W` image with `C` in {1, 3}.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<S> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<S>,
}

fn check_dims(channels: usize, height: usize, width: usize) -> Result<usize> {
    if channels != 1 && channels != 3 {
        return Err(Error::invalid(format!("channels must be 1 or 3, got {channels}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("image must have at least one pixel"));
    }
    channels
        .checked_mul(height)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Error::invalid("image dimensions overflow"))
}

impl<S: Scalar> ImageTensor<S> {
    /// Builds a tensor from planar data, rejecting non-finite values.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<S>) -> Result<Self> {
        let len = check_dims(channels, height, width)?;
        if data.len() != len {
            return Err(Error::shape(format!(
                "expected {len} values for {channels}x{height}x{width}, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at index {pos}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Crate-internal constructor for results of arithmetic on valid tensors.
    /// Finiteness is checked where it matters (the sampler), not here.
    pub(crate) fn from_parts(channels: usize, height: usize, width: usize, data: Vec<S>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: S) -> Result<Self> {
        let len = check_dims(channels, height, width)?;
        Self::new(channels, height, width, vec![value; len])
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::filled(channels, height, width, S::zero())
    }

    /// Builds a tensor by evaluating `f(c, i, j)` at every element.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> S,
    ) -> Result<Self> {
        let len = check_dims(channels, height, width)?;
        let mut data = Vec::with_capacity(len);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    data.push(f(c, i, j));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.height + i) * self.width + j
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> S {
        self.data[self.index(c, i, j)]
    }

    /// One channel plane as a flat `H * W` slice.
    pub fn plane(&self, c: usize) -> &[S] {
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn ensure_mask_fits(&self, mask: &BinaryMask, what: &str) -> Result<()> {
        if mask.height() == self.height && mask.width() == self.width {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: image {}x{} vs mask {}x{}",
                self.height,
                self.width,
                mask.height(),
                mask.width()
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::from_parts(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Elementwise combination; fails on shape mismatch.
    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.ensure_same_shape(other, "elementwise operation")?;
        Ok(Self::from_parts(
            self.channels,
            self.height,
            self.width,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum_abs(&self) -> S {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn norm_l2(&self) -> S {
        self.data.iter().map(|&v| v * v).sum::<S>().sqrt()
    }

    /// Converts the element type, e.g. `f64 -> f32` for the wire.
    pub fn cast<T: Scalar>(&self) -> ImageTensor<T> {
        ImageTensor::from_parts(
            self.channels,
            self.height,
            self.width,
            self.data
                .iter()
                .map(|v| T::from_f64(v.as_f64()).unwrap_or_else(T::nan))
                .collect(),
        )
    }
}

/// Binary `H x W` indicator; `true` marks breakage (or, generally, selection).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("mask must have at least one pixel"));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "expected {} mask values for {height}x{width}, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, false)
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, true)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn ensure_same_dims(&self, other: &Self) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn not(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.ensure_same_dims(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        })
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.ensure_same_dims(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// `true` when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.same_dims(other) && self.data.iter().zip(&other.data).all(|(a, b)| !a || *b)
    }

    pub fn ensure_fits(&self, height: usize, width: usize, what: &str) -> Result<()> {
        if self.height == height && self.width == width {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: mask {}x{} vs {height}x{width}",
                self.height, self.width
            )))
        }
    }
}

/// Per-pixel semantic label codes in `0..=18`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsingMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ParsingMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("parsing map must have at least one pixel"));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "expected {} labels for {height}x{width}, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&c| c > MAX_LABEL) {
            return Err(Error::invalid(format!("label code {bad} outside 0..={MAX_LABEL}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, code: u8) -> Result<Self> {
        Self::new(height, width, vec![code; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }
}
