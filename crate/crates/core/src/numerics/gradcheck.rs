//! Central finite differences and a sampled tape-vs-numeric comparison.

use crate::error::{Error, Result};

use std::sync::Arc;

use super::params::{Bound, ParamGrads, ParamId, ParamStore};
use super::{nn, Rng, Tensor, Var};

/// Denominator floor for [`rel_err`]; below it the error is effectively
/// absolute. Central differences at `h = 1e-5` carry round-off near
/// `1e-16 * |f| / h`, so exactly-zero gradients read as `~1e-10` numerically.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor<f64>) -> Result<f64>, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>> {
    if h <= 0.0 {
        return Err(Error::Config("finite difference step must be positive".into()));
    }
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric { op: "finite_diff_grad" });
        }
        *o = (fp - fm) / (2.0 * h);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(analytic, numeric)` at the worst entry.
    pub worst_pair: (f64, f64),
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares the tape gradient of `loss` against central differences on up
/// to `per_tensor` sampled entries of every parameter in `store`.
pub fn check_params(
    store: &ParamStore,
    per_tensor: usize,
    h: f64,
    seed: u64,
    loss: impl Fn(&mut Bound<f64>) -> Result<Var>,
) -> Result<CheckReport> {
    check_params_with(store, per_tensor, h, seed, loss, |_| {})
}

/// [`check_params`] with a hook that may alter the tape gradients before
/// comparison; used to confirm a broken backward pass is caught.
pub fn check_params_with(
    store: &ParamStore,
    per_tensor: usize,
    h: f64,
    seed: u64,
    loss: impl Fn(&mut Bound<f64>) -> Result<Var>,
    adjust: impl FnOnce(&mut ParamGrads),
) -> Result<CheckReport> {
    let mut b = Bound::training(store);
    let l = loss(&mut b)?;
    let mut analytic = b.param_grads(l)?;
    adjust(&mut analytic);
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut b = Bound::inference(s);
        let l = loss(&mut b)?;
        Ok(b.value(l).data()[0])
    };
    let mut rng = Rng::new(seed);
    let mut probe = store.clone();
    let mut tensors = Vec::new();
    for id in store.ids() {
        let n = store.get(id).numel();
        let picks = sample_indices(&mut rng, n, per_tensor);
        let mut worst = 0.0f64;
        let mut worst_pair = (0.0, 0.0);
        for &e in &picks {
            let num = central(&mut probe, id, e, h, &eval)?;
            let a = analytic.get(id)[e];
            let r = rel_err(a, num);
            if r >= worst {
                worst = r;
                worst_pair = (a, num);
            }
        }
        tensors.push(TensorCheck { name: store.entry(id).name.clone(), checked: picks.len(), max_rel_err: worst, worst_pair });
    }
    Ok(CheckReport { tensors })
}

/// Tape gradient of `f` with respect to each input tensor against central
/// differences on every entry. Returns the largest relative error.
pub fn check_inputs(inputs: &[Tensor<f64>], h: f64, f: impl Fn(&mut Bound<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    check_inputs_with(inputs, h, f, |_| {})
}

/// [`check_inputs`] with a hook applied to each tape gradient before comparison.
pub fn check_inputs_with(
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&mut Bound<f64>, &[Var]) -> Result<Var>,
    mut adjust: impl FnMut(&mut [f64]),
) -> Result<f64> {
    let empty = ParamStore::new(0);
    let mut b = Bound::training(&empty);
    let vars = inputs.iter().map(|t| b.tape.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut b, &vars)?;
    let grads = b.tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let mut analytic = grads.wrt(*v).data().to_vec();
        adjust(&mut analytic);
        let numeric = finite_diff_grad(
            |x| {
                let mut b = Bound::inference(&empty);
                let vs = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| b.tape.constant(if j == k { x.clone() } else { t.clone() }))
                    .collect::<Result<Vec<_>>>()?;
                let l = f(&mut b, &vs)?;
                Ok(b.value(l).data()[0])
            },
            &inputs[k],
            h,
        )?;
        for (a, n) in analytic.iter().zip(numeric.data()) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    Ok(worst)
}

/// `sum(v * w)` with fixed pseudo-random `w` derived from `salt`; turns any
/// tensor into a scalar whose gradient exercises every entry.
pub fn probe(g: &mut Bound<f64>, v: Var, salt: u64) -> Result<Var> {
    let n = g.tape.value(v).numel();
    let flat = g.tape.reshape(v, vec![n])?;
    nn::weighted_sum(g, flat, Arc::new(Rng::new(salt).normal_vec(n, 1.0)))
}

/// Redraws every parameter so that biases, LN affine terms and relative
/// bias tables are all non-trivial. Temperatures stay near 0.5.
pub fn randomize(store: &mut ParamStore, rng: &mut Rng, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        for v in store.get_mut(id).data_mut() {
            *v = if name.ends_with("log_tau") {
                0.5f64.ln() + 0.1 * rng.normal()
            } else if name.ends_with("gamma") {
                1.0 + 0.2 * rng.normal()
            } else {
                std * rng.normal()
            };
        }
    }
}

fn central(probe: &mut ParamStore, id: ParamId, e: usize, h: f64, eval: &impl Fn(&ParamStore) -> Result<f64>) -> Result<f64> {
    let orig = probe.get(id).data()[e];
    probe.get_mut(id).data_mut()[e] = orig + h;
    let fp = eval(probe)?;
    probe.get_mut(id).data_mut()[e] = orig - h;
    let fm = eval(probe)?;
    probe.get_mut(id).data_mut()[e] = orig;
    Ok((fp - fm) / (2.0 * h))
}

fn sample_indices(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::new(vec![2, 2], vec![0.1, -3.0, 7.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn nan_is_numeric_error() {
        let r = finite_diff_grad(|_| Ok(f64::NAN), &Tensor::scalar(1.0), 1e-5);
        assert!(matches!(r, Err(Error::Numeric { .. })));
    }

    #[test]
    fn rel_err_is_symmetric_and_floored() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert_eq!(rel_err(2.0, 1.0), rel_err(1.0, 2.0));
        assert!(rel_err(1e-9, 0.0) < 2e-5);
    }
}
