use crate::error::{Error, Result};
use crate::volume::{Dims, Grid};

use super::Real;

/// Feature maps of shape `(n, c, x, y, z)`.
///
/// Linearized with x fastest, then y, z, channel and batch, so each
/// `(n, c)` plane is one contiguous block laid out like a [`Grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5<T> {
    n: usize,
    c: usize,
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> Tensor5<T> {
    pub fn zeros(n: usize, c: usize, dims: Dims) -> Self {
        Self::filled(n, c, dims, T::zero())
    }

    pub fn filled(n: usize, c: usize, dims: Dims, value: T) -> Self {
        assert!(n >= 1 && c >= 1 && dims.iter().all(|&d| d >= 1), "tensor dims must be >= 1");
        Self {
            n,
            c,
            dims,
            data: vec![value; n * c * dims.iter().product::<usize>()],
        }
    }

    pub fn from_vec(n: usize, c: usize, dims: Dims, data: Vec<T>) -> Result<Self> {
        if n == 0 || c == 0 || dims.contains(&0) {
            return Err(Error::Shape(format!("tensor dims must be >= 1, got n={n} c={c} {dims:?}")));
        }
        let expected = n * c * dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::Shape(format!("tensor data length {} != {expected}", data.len())));
        }
        Ok(Self { n, c, dims, data })
    }

    /// Single-sample, single-channel tensor from a grid.
    pub fn from_grid(grid: &Grid<f32>) -> Self {
        Self {
            n: 1,
            c: 1,
            dims: grid.dims(),
            data: grid.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn shape(&self) -> [usize; 5] {
        [self.n, self.c, self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn plane_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The contiguous `(n, c)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let len = self.plane_len();
        let start = (n * self.c + c) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let len = self.plane_len();
        let start = (n * self.c + c) * len;
        &mut self.data[start..start + len]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            n: self.n,
            c: self.c,
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "shape mismatch in add");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor5<U> {
        Tensor5 {
            n: self.n,
            c: self.c,
            dims: self.dims,
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// The `(n, c)` plane as an `f32` grid with the given spacing.
    pub fn to_grid(&self, n: usize, c: usize, spacing: [f64; 3]) -> Grid<f32> {
        Grid::from_vec(
            self.dims,
            spacing,
            self.plane(n, c).iter().map(|&v| v.as_f64() as f32).collect(),
        )
        .expect("tensor plane geometry is valid")
    }
}
