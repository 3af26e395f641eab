//! Minimal dense N×C×H×W tensor library with reverse-mode differentiation.
//!
//! The op vocabulary is exactly what the two depth networks need: conv2d,
//! strided transpose conv, ELU, dropout, channel concat, nearest upsample,
//! residual add, plus the masked loss reductions. Storage is f32 for
//! training and f64 for gradient checking; both go through the same generic
//! code paths.
//!
//! Determinism contract: every op reduces in a fixed order, so outputs and
//! gradients are bit-identical across runs and worker counts.

mod conv;
mod gradcheck;
mod tape;

pub use conv::{conv_output_dims, conv_transpose_output_dims};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};

/// Element type for tensor storage; implemented for f32 and f64.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn exp(self) -> Self {
        f32::exp(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f32::abs(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// N×C×H×W dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    pub shape: Shape,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![T::ZERO; shape.numel()],
        }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![value],
        }
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.shape.numel(), 1);
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts between storage types (f32 ↔ f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}

/// Padding semantics for convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Circular along longitude (width), zero along latitude (height) —
    /// matches the panorama's wrap-around topology.
    Sphere,
    Zero,
}

impl std::fmt::Display for PadMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PadMode::Sphere => write!(f, "sphere"),
            PadMode::Zero => write!(f, "zero"),
        }
    }
}

/// Convolution configuration. Output spatial dims are "same"-style,
/// ceil(in/stride), with any odd padding surplus applied at bottom/right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub padding: PadMode,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.0 < 1 || self.kernel.1 < 1 || self.stride < 1 || self.dilation < 1 {
            return Err(Error::config(format!(
                "conv spec requires kernel/stride/dilation >= 1, got {:?}/{}/{}",
                self.kernel, self.stride, self.dilation
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config(
                "conv spec requires nonzero channels".to_string(),
            ));
        }
        Ok(())
    }

    /// Expected weight shape (out, in, kh, kw).
    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        )
    }

    /// Transpose-conv weight shape (in, out, kh, kw): the layout of the
    /// stride-s conv this op is the adjoint of.
    pub fn transpose_weight_shape(&self) -> Shape {
        Shape::new(
            self.in_channels,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
        )
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }
}
