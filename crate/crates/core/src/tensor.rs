//! Dense row-major tensors over a float scalar type.
//!
//! Everything in this crate runs on plain `Vec<F>` storage. Shapes are
//! validated at construction; indexing helpers assume the rank they are
//! named for.

use std::fmt;

use crate::error::{Error, Result};

/// Scalar dtype tag used by the checkpoint format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Float scalar used throughout the crate. `f32` is the working precision;
/// `f64` exists for finite-difference gradient checks.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one scalar from exactly `DTYPE.byte_width()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} wants {} elements, got {}", shape, expect, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    /// 1-D tensor from a flat vector.
    pub fn from_vec(data: Vec<F>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("Tensor::from_rows", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![r, c],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    #[inline]
    pub fn at1(&self, i: usize) -> F {
        self.data[i]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> F {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set2(&mut self, r: usize, c: usize, v: F) {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    /// Contiguous row slice of a rank-2 tensor.
    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "Tensor::zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Self, scale: F) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "Tensor::add_scaled",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + scale * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: F) {
        for a in self.data.iter_mut() {
            *a = v;
        }
    }

    pub fn scale(&mut self, s: F) {
        for a in self.data.iter_mut() {
            *a = *a * s;
        }
    }

    /// Largest absolute elementwise difference, as f64. Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, F> {
        self.data.iter()
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!("non-finite values in {what}")));
        }
        Ok(())
    }

    /// Lossy dtype conversion, used to lift f32 models into f64 for checks.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }
}
