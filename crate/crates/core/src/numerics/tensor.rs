use crate::error::{Error, Result};

use super::Real;

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    /// Panics on shape/data mismatch; for internal construction where the
    /// shape is computed from the data.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, requires_grad: false }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n], requires_grad: false }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::dim("tensor", "ragged rows"));
        }
        Ok(Tensor::from_parts(vec![n, m], rows.concat()))
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor { shape, data: (0..n).map(&mut f).collect(), requires_grad: false }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(vec![n, n], |k| if k / n == k % n { T::one() } else { T::zero() })
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", format!("{:?} -> {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn transpose2(&self) -> Tensor<T> {
        let (n, m) = (self.rows(), self.cols());
        Tensor::from_parts(vec![m, n], super::kernels::transpose(&self.data, n, m))
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        if self.shape.len() != 2 || other.shape.len() != 2 || k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor::from_parts(vec![n, m], super::kernels::matmul(&self.data, &other.data, n, k, m)))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn row_sums(&self) -> Vec<T> {
        let c = self.cols();
        self.data.chunks(c.max(1)).map(|r| r.iter().copied().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<T> {
        let c = self.cols();
        let mut out = vec![T::zero(); c];
        for r in self.data.chunks(c.max(1)) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += *v;
            }
        }
        out
    }
}
