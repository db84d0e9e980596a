//! Dense row-major tensors.
//!
//! The only ranks this crate needs are vectors (`[d]`) and matrices
//! (`[n, d]`), so the type stays deliberately small: storage, shape
//! bookkeeping and a handful of accessors. Linear algebra lives with the
//! algorithms that need it.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense row-major numeric array with explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBase<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> TensorBase<S> {
    /// Builds a tensor, validating that the shape matches the data length and
    /// every value is finite.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                context: "tensor construction".into(),
                expected: format!("{expected} values for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        let t = Self { shape, data };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    /// 1-D tensor from a value list.
    pub fn vector(data: Vec<S>) -> Result<Self> {
        let d = data.len();
        Self::new([d], data)
    }

    /// 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * d);
        for row in rows {
            if row.len() != d {
                return Err(Error::ShapeMismatch {
                    context: "from_rows".into(),
                    expected: format!("{d} columns"),
                    got: format!("{}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new([n, d], data)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix, or 1 for a vector.
    pub fn n_rows(&self) -> usize {
        match self.shape.as_slice() {
            [n, _] => *n,
            _ => 1,
        }
    }

    /// Column count of a matrix, or the length of a vector.
    pub fn n_cols(&self) -> usize {
        match self.shape.as_slice() {
            [_, d] => *d,
            [d] => *d,
            _ => self.data.len(),
        }
    }

    /// Borrows row `r` of a matrix (a vector is its own single row).
    pub fn row(&self, r: usize) -> &[S] {
        let d = self.n_cols();
        &self.data[r * d..(r + 1) * d]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let d = self.n_cols();
        &mut self.data[r * d..(r + 1) * d]
    }

    /// Reinterprets a vector as a single-row matrix; matrices pass through.
    pub fn as_matrix(&self) -> TensorBase<S> {
        match self.shape.as_slice() {
            [_, _] => self.clone(),
            [d] => TensorBase {
                shape: vec![1, *d],
                data: self.data.clone(),
            },
            _ => self.clone(),
        }
    }

    /// Copies a subset of rows, preserving their given order.
    pub fn gather_rows(&self, indices: &[usize]) -> TensorBase<S> {
        let d = self.n_cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        TensorBase {
            shape: vec![indices.len(), d],
            data,
        }
    }

    /// Converts every element to another scalar width.
    pub fn cast<T: Real>(&self) -> TensorBase<T> {
        TensorBase {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| T::from_f64(x.to_f64().expect("finite")).expect("representable"))
                .collect(),
        }
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.into()))
        }
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> S {
        self.data
            .iter()
            .map(|&x| x * x)
            .fold(S::zero(), |a, b| a + b)
            .sqrt()
    }
}

/// Index of the first maximum element.
pub fn argmax<S: PartialOrd + Copy>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Squared Euclidean distance between two equal-length slices.
pub fn squared_distance<S: Real>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .fold(S::zero(), |acc, v| acc + v)
}
