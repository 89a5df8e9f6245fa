//! Named parameter storage and per-tape binding.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{Gradients, Real, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Truncated normal at two standard deviations.
    TruncNormal(f64),
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
    pub value: Tensor<f64>,
}

/// Ordered collection of learnable tensors.
///
/// A store built with [`ParamStore::shapes_only`] records names and shapes
/// without allocating values; model constructors run unchanged against it,
/// which is how parameter counts are obtained for large variants.
#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    rng: Rng,
    materialize: bool,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new(), rng: Rng::new(seed), materialize: true }
    }

    pub fn shapes_only() -> Self {
        ParamStore { materialize: false, ..Self::new(0) }
    }

    pub fn is_materialized(&self) -> bool {
        self.materialize
    }

    /// Registers a tensor and draws its initial value. Weight decay is
    /// applied to tensors of rank two or more.
    pub fn add(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> ParamId {
        let shape = shape.into();
        let decay = shape.len() >= 2;
        let name = name.into();
        let n: usize = shape.iter().product();
        let value = if !self.materialize {
            Tensor::from_parts(vec![0], Vec::new())
        } else {
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Constant(c) => vec![c; n],
                Init::TruncNormal(std) => (0..n).map(|_| self.rng.trunc_normal(std)).collect(),
            };
            Tensor::from_parts(shape.clone(), data)
        };
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, shape, decay, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f64> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Replaces a value, checking the shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<f64>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if value.shape() != e.shape.as_slice() {
            return Err(Error::dim("set_param", format!("{}: {:?} vs {:?}", e.name, value.shape(), e.shape)));
        }
        e.value = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum()
    }

    /// Scalar counts summed by the name prefix before the first `.`.
    pub fn breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for e in &self.entries {
            let key = e.name.split('.').next().unwrap_or("").to_string();
            let n: usize = e.shape.iter().product();
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, c)) => *c += n,
                None => out.push((key, n)),
            }
        }
        out
    }
}

/// A tape plus the lazily registered variables of a [`ParamStore`].
pub struct Bound<'a, T: Real = f64> {
    pub tape: Tape<T>,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a, T: Real> Bound<'a, T> {
    /// Parameters are differentiable on `tape` when it records.
    pub fn new(store: &'a ParamStore, tape: Tape<T>) -> Self {
        Bound { tape, store, vars: vec![None; store.len()] }
    }

    pub fn training(store: &'a ParamStore) -> Self {
        Self::new(store, Tape::new())
    }

    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, Tape::inference())
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        if !self.store.is_materialized() {
            return Err(Error::Usage("parameter store holds shapes only".into()));
        }
        let v = self.tape.param(self.store.get(id).cast::<T>())?;
        self.vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Runs backward and returns one gradient buffer per stored parameter
    /// (zeros where unused).
    pub fn param_grads(self, loss: Var) -> Result<ParamGrads> {
        let store = self.store;
        let vars = self.vars;
        let grads: Gradients<T> = self.tape.backward(loss)?;
        let out = store
            .entries()
            .iter()
            .zip(&vars)
            .map(|(e, v)| match v.and_then(|v| grads.raw(v)) {
                Some(g) => g.iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; e.shape.iter().product()],
            })
            .collect();
        Ok(ParamGrads { grads: out })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub grads: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads { grads: store.entries().iter().map(|e| vec![0.0; e.shape.iter().product()]).collect() }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.grads.iter_mut().flatten().for_each(|x| *x *= c);
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_only_counts_without_values() {
        let mut s = ParamStore::shapes_only();
        s.add("a.w", [3, 4], Init::TruncNormal(0.02));
        s.add("a.b", [4], Init::Zeros);
        s.add("b.w", [2, 2], Init::Ones);
        assert_eq!(s.num_scalars(), 20);
        assert_eq!(s.breakdown(), vec![("a".to_string(), 16), ("b".to_string(), 4)]);
        assert!(s.get(ParamId(0)).data().is_empty());
    }

    #[test]
    fn same_seed_same_init() {
        let build = || {
            let mut s = ParamStore::new(11);
            s.add("w", [5, 5], Init::TruncNormal(0.02));
            s
        };
        assert_eq!(build().get(ParamId(0)).data(), build().get(ParamId(0)).data());
    }

    #[test]
    fn unused_params_get_zero_grads() {
        let mut s = ParamStore::new(0);
        let a = s.add("a", [2], Init::Ones);
        let b = s.add("b", [3], Init::Ones);
        let mut g = Bound::<f64>::training(&s);
        let va = g.param(a).unwrap();
        let l = g.tape.sum_all(va).unwrap();
        let pg = g.param_grads(l).unwrap();
        assert_eq!(pg.get(a), &[1.0, 1.0]);
        assert_eq!(pg.get(b), &[0.0; 3]);
    }
}
