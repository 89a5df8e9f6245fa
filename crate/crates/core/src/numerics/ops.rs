//! Value-level primitives for callers that do not need gradients.

use crate::error::{Error, Result};
use crate::grid::TokenGrid;

use super::kernels::{self, ConvGeom};
use super::{ensure_finite, Real, Tensor};

/// `x W + b`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = (x.rows(), x.cols());
    if x.shape().len() != 2 || w.shape().len() != 2 || w.rows() != k || b.numel() != w.cols() {
        return Err(Error::dim("linear", format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape())));
    }
    let m = w.cols();
    let mut y = kernels::matmul(x.data(), w.data(), n, k, m);
    for row in y.chunks_mut(m) {
        row.iter_mut().zip(b.data()).for_each(|(v, c)| *v += *c);
    }
    ensure_finite("linear", &y)?;
    Ok(Tensor::from_parts(vec![n, m], y))
}

pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = x.cols();
    if d == 0 || gamma.numel() != d || beta.numel() != d {
        return Err(Error::dim("layer_norm", format!("x {:?}, gamma {:?}", x.shape(), gamma.shape())));
    }
    if eps <= T::zero() {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let out = kernels::layer_norm(x.data(), d, gamma.data(), beta.data(), eps);
    ensure_finite("layer_norm", &out.y)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), out.y))
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 2 {
        return Err(Error::dim("softmax_rows", format!("expected a matrix, got {:?}", x.shape())));
    }
    ensure_finite("softmax_rows", x.data())?;
    let y = kernels::softmax_rows(x.data(), x.rows(), x.cols(), None);
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

/// Cross-correlation with a `[k, k, c_in, c_out]` kernel and no bias.
pub fn strided_conv2d<T: Real>(x: &TokenGrid<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<TokenGrid<T>> {
    let [k, k2, c_in, c_out] = kernel.shape() else {
        return Err(Error::dim("strided_conv2d", format!("kernel shape {:?}", kernel.shape())));
    };
    if k != k2 || *c_in != x.c {
        return Err(Error::dim("strided_conv2d", format!("kernel {:?} on {} channels", kernel.shape(), x.c)));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let geom = ConvGeom::new(x.h, x.w, x.c, *k, stride, pad)
        .ok_or_else(|| Error::Config(format!("kernel {k} stride {stride} pad {pad} gives no output on {}x{}", x.h, x.w)))?;
    let cols = kernels::unfold(x.tokens.data(), &geom);
    let y = kernels::matmul(&cols, kernel.data(), geom.h_out * geom.w_out, geom.patch_len(), *c_out);
    ensure_finite("strided_conv2d", &y)?;
    TokenGrid::new(geom.h_out, geom.w_out, *c_out, y)
}
