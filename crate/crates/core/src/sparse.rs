//! Block-sparse grouping. Only the entries permitted by a local mask are
//! ever computed or stored: `qk` and softmax sweep input-major, column
//! renormalization and aggregation sweep the output-major mirror.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::grouping::{self, AssignmentPair, GroupingLayer, GroupingMode, Layout, LocalityMask, Path};
use crate::numerics::{pattern, ParamStore, Pattern, Real, Tensor};

/// Values over the entries of a locality pattern (at most 9 per input).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSparseAssignment<T = f64> {
    pub pattern: Arc<Pattern>,
    pub values: Vec<T>,
}

impl<T: Real> BlockSparseAssignment<T> {
    pub fn new(pattern: Arc<Pattern>, values: Vec<T>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(Error::dim("block_sparse", format!("{} values for {} entries", values.len(), pattern.nnz())));
        }
        Ok(BlockSparseAssignment { pattern, values })
    }

    pub fn valid_count(&self, i: usize) -> usize {
        self.pattern.row_range(i).len()
    }

    pub fn output_index(&self, i: usize) -> &[usize] {
        self.pattern.row_cols(i)
    }

    pub fn row_values(&self, i: usize) -> &[T] {
        &self.values[self.pattern.row_range(i)]
    }

    pub fn entries(&self) -> usize {
        self.values.len()
    }

    pub fn to_dense(&self) -> Tensor<T> {
        Tensor::new(vec![self.pattern.n_rows(), self.pattern.n_cols()], self.pattern.to_dense(&self.values))
            .expect("pattern geometry")
    }
}

/// Scratch buffers for one geometry.
#[derive(Clone, Debug)]
pub struct SparseWorkspace<T = f64> {
    pattern: Arc<Pattern>,
    rows_of: Vec<usize>,
    logits: Vec<T>,
    ups: Vec<T>,
    down: Vec<T>,
    denom: Vec<T>,
}

impl<T: Real> SparseWorkspace<T> {
    pub fn new(mask: &LocalityMask) -> Self {
        let p = mask.pattern().clone();
        let nnz = p.nnz();
        SparseWorkspace {
            rows_of: p.entry_rows(),
            logits: vec![T::zero(); nnz],
            ups: vec![T::zero(); nnz],
            down: vec![T::zero(); nnz],
            denom: vec![T::zero(); p.n_cols()],
            pattern: p,
        }
    }

    pub fn fits(&self, mask: &LocalityMask) -> bool {
        *self.pattern == **mask.pattern()
    }

    pub fn qk(&mut self, k: &TokenGrid<T>, q: &TokenGrid<T>, bias: &[T], tau: T) -> Result<&[T]> {
        let p = &self.pattern;
        if k.len() != p.n_rows() || q.len() != p.n_cols() || k.c != q.c || bias.len() != p.bias_len() {
            return Err(Error::Geometry(format!(
                "keys {}x{}x{}, queries {}x{}x{} do not fit the mask",
                k.h, k.w, k.c, q.h, q.w, q.c
            )));
        }
        pattern::qk(p, k.tokens.data(), q.tokens.data(), k.c, bias, tau, &mut self.logits);
        Ok(&self.logits)
    }

    /// Softmax over the stored logits, then `(a + eps)` normalized per
    /// output column. Reads the logits left by [`Self::qk`].
    pub fn softmax_renorm(&mut self, eps: T) -> Result<(&[T], &[T])> {
        if eps < T::zero() {
            return Err(Error::Config("epsilon must be non-negative".into()));
        }
        pattern::softmax_rows(&self.pattern, &self.logits, &mut self.ups);
        pattern::col_renorm(&self.pattern, &self.ups, eps, &mut self.down, &mut self.denom)?;
        Ok((&self.ups, &self.down))
    }

    pub fn set_logits(&mut self, logits: &[T]) -> Result<()> {
        if logits.len() != self.logits.len() {
            return Err(Error::dim("set_logits", "entry count"));
        }
        self.logits.copy_from_slice(logits);
        Ok(())
    }

    /// `updates_j = sum_i down_ij v_i` using the `down` values in the
    /// workspace.
    pub fn av(&self, v: &TokenGrid<T>, h_out: usize, w_out: usize) -> Result<TokenGrid<T>> {
        let p = &self.pattern;
        if v.len() != p.n_rows() || h_out * w_out != p.n_cols() {
            return Err(Error::Geometry("values do not fit the assignment".into()));
        }
        let mut out = vec![T::zero(); p.n_cols() * v.c];
        pattern::apply_t(p, &self.down, v.tokens.data(), v.c, &mut out, &self.rows_of);
        TokenGrid::new(h_out, w_out, v.c, out)
    }
}

pub fn sparse_qk<T: Real>(k: &TokenGrid<T>, q: &TokenGrid<T>, bias: &[T], tau: T, mask: &LocalityMask) -> Result<BlockSparseAssignment<T>> {
    if mask.mode != GroupingMode::Local || (k.h, k.w) != (mask.h_in, mask.w_in) || (q.h, q.w) != (mask.h_out, mask.w_out) {
        return Err(Error::Geometry("sparse qk needs a local mask matching both grids".into()));
    }
    let mut ws = SparseWorkspace::new(mask);
    let logits = ws.qk(k, q, bias, tau)?.to_vec();
    BlockSparseAssignment::new(mask.pattern().clone(), logits)
}

pub fn sparse_softmax_renorm<T: Real>(logits: &BlockSparseAssignment<T>, eps: T) -> Result<(BlockSparseAssignment<T>, BlockSparseAssignment<T>)> {
    let p = &logits.pattern;
    let mut ups = vec![T::zero(); p.nnz()];
    let mut down = vec![T::zero(); p.nnz()];
    let mut denom = vec![T::zero(); p.n_cols()];
    if eps < T::zero() {
        return Err(Error::Config("epsilon must be non-negative".into()));
    }
    pattern::softmax_rows(p, &logits.values, &mut ups);
    pattern::col_renorm(p, &ups, eps, &mut down, &mut denom)?;
    Ok((
        BlockSparseAssignment { pattern: p.clone(), values: ups },
        BlockSparseAssignment { pattern: p.clone(), values: down },
    ))
}

pub fn sparse_av<T: Real>(down: &BlockSparseAssignment<T>, v: &TokenGrid<T>, h_out: usize, w_out: usize) -> Result<TokenGrid<T>> {
    let p = &down.pattern;
    if v.len() != p.n_rows() || h_out * w_out != p.n_cols() {
        return Err(Error::Geometry("values do not fit the assignment".into()));
    }
    let mut out = vec![T::zero(); p.n_cols() * v.c];
    pattern::apply_t(p, &down.values, v.tokens.data(), v.c, &mut out, &p.entry_rows());
    TokenGrid::new(h_out, w_out, v.c, out)
}

/// Full grouping forward on the sparse path. Only local layers qualify.
pub fn sparse_grouping_forward<T: Real>(
    layer: &GroupingLayer,
    store: &ParamStore,
    x: &TokenGrid<T>,
    eps: f64,
) -> Result<(TokenGrid<T>, SparsePair<T>)> {
    if layer.cfg.mode != GroupingMode::Local {
        return Err(Error::Config("the sparse path runs local grouping only".into()));
    }
    let (y, pair) = grouping::grouping_forward(layer, store, x, Path::Sparse { eps })?;
    Ok((y, SparsePair::from_pair(pair)?))
}

/// Sparse `a_ups` / `a_down` of one layer.
#[derive(Clone, Debug)]
pub struct SparsePair<T = f64> {
    pub ups: BlockSparseAssignment<T>,
    pub down: BlockSparseAssignment<T>,
    pub inner: AssignmentPair<T>,
}

impl<T: Real> SparsePair<T> {
    fn from_pair(pair: AssignmentPair<T>) -> Result<Self> {
        let Layout::Sparse(p) = &pair.layout else {
            return Err(Error::Usage("assignment is not sparse".into()));
        };
        Ok(SparsePair {
            ups: BlockSparseAssignment::new(p.clone(), pair.ups.clone())?,
            down: BlockSparseAssignment::new(p.clone(), pair.down.clone())?,
            inner: pair,
        })
    }

    pub fn entries(&self) -> usize {
        self.ups.entries()
    }
}
