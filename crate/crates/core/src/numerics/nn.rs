//! Parameterized layers recorded on a [`Bound`] tape.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels::ConvGeom;
use super::params::{Bound, Init, ParamId, ParamStore};
use super::{Real, Var};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.weight"), [d_in, d_out], Init::TruncNormal(INIT_STD));
        let b = bias.then(|| store.add(format!("{name}.bias"), [d_out], Init::Zeros));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Bound<T>, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let y = g.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b)?;
                g.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), [dim], Init::Ones);
        let beta = store.add(format!("{name}.beta"), [dim], Init::Zeros);
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward<T: Real>(&self, g: &mut Bound<T>, x: Var) -> Result<Var> {
        let gm = g.param(self.gamma)?;
        let bt = g.param(self.beta)?;
        g.tape.layer_norm(x, gm, bt, T::lit(LN_EPS))
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, true),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Bound<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

/// Square-kernel cross-correlation over a `[h*w, c_in]` grid. The weight is
/// stored as `[k*k*c_in, c_out]` in (ky, kx, channel) row order.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        let w = store.add(format!("{name}.weight"), [k * k * c_in, c_out], Init::TruncNormal(INIT_STD));
        let b = store.add(format!("{name}.bias"), [c_out], Init::Zeros);
        Conv2d { w, b, c_in, c_out, k, stride, pad }
    }

    pub fn geom(&self, h: usize, w: usize) -> Result<ConvGeom> {
        ConvGeom::new(h, w, self.c_in, self.k, self.stride, self.pad)
            .ok_or_else(|| Error::Config(format!("{}x{} kernel {} stride {} leaves no output for {h}x{w}", self.k, self.k, self.k, self.stride)))
    }

    /// Returns the output and its grid size.
    pub fn forward<T: Real>(&self, g: &mut Bound<T>, x: Var, h: usize, w: usize) -> Result<(Var, usize, usize)> {
        let geom = self.geom(h, w)?;
        let cols = g.tape.unfold(x, geom)?;
        let wv = g.param(self.w)?;
        let bv = g.param(self.b)?;
        let y = g.tape.matmul(cols, wv)?;
        let y = g.tape.add_row(y, bv)?;
        Ok((y, geom.h_out, geom.w_out))
    }
}

/// Mean of the squared entries, handy as a generic test loss.
pub fn mean_square<T: Real>(g: &mut Bound<T>, x: Var) -> Result<Var> {
    let sq = g.tape.mul(x, x)?;
    g.tape.mean_all(sq)
}

/// `sum(x ⊙ w)` for a fixed random weight tensor; gives every entry of `x`
/// a distinct sensitivity.
pub fn weighted_sum<T: Real>(g: &mut Bound<T>, x: Var, weights: Arc<Vec<T>>) -> Result<Var> {
    let shape = g.tape.shape(x).to_vec();
    let w = g.tape.constant(super::Tensor::new(shape, weights.as_ref().clone())?)?;
    let p = g.tape.mul(x, w)?;
    g.tape.sum_all(p)
}
