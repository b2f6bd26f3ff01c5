//! Dense tensors, sparse and dense matrices, pivoted LU, resampling and the
//! finite-difference Jacobian oracle.
//!
//! Feature maps are channel-first (`D × H × W`) and stored row-major. Values are
//! kept in `f64`; files store `f32`.

mod dense;
mod fd;
mod resample;
mod sparse;

pub use dense::{lu_factor, lu_solve, DenseMatrix, LuFactors, PIVOT_RELATIVE_THRESHOLD};
pub use fd::{fd_jacobian, DEFAULT_FD_STEP};
pub use resample::bilinear_upsample;
pub use sparse::SparseMatrix;

use std::fmt;

use crate::error::{Error, Result};

/// Tensor extents. Every extent is at least 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::Shape("a shape needs at least one extent".into()));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Shape(format!("extent {pos} of {dims:?} is zero")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Shape(format!("element count of {dims:?} overflows")))?;
        Ok(Shape(dims))
    }

    pub fn chw(c: usize, h: usize, w: usize) -> Result<Self> {
        Shape::new(vec![c, h, w])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// `(channels, height, width)` of a rank-3 feature-map shape.
    pub fn as_chw(&self) -> Result<(usize, usize, usize)> {
        match self.0.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::ShapeMismatch(format!(
                "expected a rank-3 feature map shape, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("×"))
    }
}

/// Row-major n-dimensional array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape} holds {} elements but {} values were given",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-1 tensor over `values`. Panics on an empty vector.
    pub fn vector(values: Vec<f64>) -> Self {
        let shape = Shape::new(vec![values.len()]).expect("vector must be non-empty");
        Tensor { shape, data: values }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rank-1 view of the same values in row-major order.
    pub fn flatten(&self) -> Tensor {
        Tensor::vector(self.data.clone())
    }

    pub fn reshape(&self, shape: Shape) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let at = self.offset(index);
        self.data[at] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.rank(), "index rank");
        index.iter().zip(self.shape.dims()).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for extent {d}");
            acc * d + i
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn ensure_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}
