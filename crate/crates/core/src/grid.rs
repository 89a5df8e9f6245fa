//! Token grids: row-major `[h*w, c]` feature maps.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T = f64> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub tokens: Tensor<T>,
}

impl<T: Real> TokenGrid<T> {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::dim("token_grid", format!("{} values for {h}x{w}x{c}", data.len())));
        }
        Ok(TokenGrid { h, w, c, tokens: Tensor::new(vec![h * w, c], data)? })
    }

    pub fn from_tensor(h: usize, w: usize, tokens: Tensor<T>) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != h * w {
            return Err(Error::dim("token_grid", format!("{:?} for {h}x{w}", tokens.shape())));
        }
        let c = tokens.cols();
        Ok(TokenGrid { h, w, c, tokens })
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, r: usize, c: usize) -> &[T] {
        self.tokens.row(r * self.w + c)
    }

    /// `[h*w*3]` image values to a three-channel grid.
    pub fn from_image(h: usize, w: usize, rgb: &[T]) -> Result<Self> {
        Self::new(h, w, 3, rgb.to_vec())
    }
}
