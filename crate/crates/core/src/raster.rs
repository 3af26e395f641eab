//! Raster containers for equirectangular data.
//!
//! All rasters are row-major with row 0 at the top (north pole side) and
//! column 0 at longitude -180°. Color and depth are stored as f32; masks as
//! u8 in {0, 1}.

use crate::error::{Error, Result};
use crate::geometry::SphereDims;

/// Row-major multi-channel raster over the sphere (interleaved channels).
#[derive(Debug, Clone, PartialEq)]
pub struct EquirectImage {
    pub dims: SphereDims,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl EquirectImage {
    pub fn new(dims: SphereDims, channels: usize) -> Self {
        Self {
            dims,
            channels,
            data: vec![0.0; dims.width * dims.height * channels],
        }
    }

    pub fn from_data(dims: SphereDims, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.width * dims.height * channels {
            return Err(Error::shape(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                dims.width,
                dims.height,
                channels
            )));
        }
        Ok(Self {
            dims,
            channels,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, u: usize, v: usize) -> usize {
        (v * self.dims.width + u) * self.channels
    }

    #[inline]
    pub fn pixel(&self, u: usize, v: usize) -> &[f32] {
        let i = self.idx(u, v);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f32] {
        let i = self.idx(u, v);
        &mut self.data[i..i + self.channels]
    }
}

/// Per-pixel radial distance in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub dims: SphereDims,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(dims: SphereDims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.width * dims.height],
        }
    }

    pub fn from_data(dims: SphereDims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.width * dims.height {
            return Err(Error::shape(format!(
                "depth data length {} does not match {}x{}",
                data.len(),
                dims.width,
                dims.height
            )));
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.dims.width + u]
    }
}

/// Binary validity mask; 1 marks pixels with real geometry behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMask {
    pub dims: SphereDims,
    pub data: Vec<u8>,
}

impl ValidityMask {
    pub fn new(dims: SphereDims) -> Self {
        Self {
            dims,
            data: vec![0; dims.width * dims.height],
        }
    }

    pub fn filled(dims: SphereDims, value: u8) -> Self {
        Self {
            dims,
            data: vec![value; dims.width * dims.height],
        }
    }

    pub fn from_data(dims: SphereDims, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.width * dims.height {
            return Err(Error::shape(format!(
                "mask data length {} does not match {}x{}",
                data.len(),
                dims.width,
                dims.height
            )));
        }
        if let Some(bad) = data.iter().find(|&&m| m > 1) {
            return Err(Error::shape(format!("mask value {bad} outside {{0,1}}")));
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> u8 {
        self.data[v * self.dims.width + u]
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|&&m| m == 1).count()
    }
}
