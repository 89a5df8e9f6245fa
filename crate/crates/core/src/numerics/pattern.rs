//! Row-compressed sparsity pattern with an output-major mirror.
//!
//! Entries are stored input-major (`row_ptr`/`cols`). `col_ptr`/`col_pos`
//! list, for every column, the positions of its entries in ascending row
//! order, so column reductions are a single gather sweep. Each entry also
//! carries an index into a relative-position bias table.

use crate::error::{Error, Result};

use super::kernels::dot;
use super::Real;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pattern {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    bias_idx: Vec<usize>,
    bias_len: usize,
    col_ptr: Vec<usize>,
    col_pos: Vec<usize>,
}

impl Pattern {
    /// `rows[i]` lists `(column, bias index)` for row `i`, columns strictly
    /// ascending.
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, usize)>>, bias_len: usize) -> Result<Self> {
        let n_rows = rows.len();
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut cols = Vec::new();
        let mut bias_idx = Vec::new();
        row_ptr.push(0);
        for (i, row) in rows.iter().enumerate() {
            let mut prev = None;
            for &(c, b) in row {
                if c >= n_cols || b >= bias_len.max(1) || prev.is_some_and(|p| p >= c) {
                    return Err(Error::Geometry(format!("invalid pattern entry ({i}, {c})")));
                }
                prev = Some(c);
                cols.push(c);
                bias_idx.push(b);
            }
            row_ptr.push(cols.len());
        }
        let mut counts = vec![0usize; n_cols + 1];
        for &c in &cols {
            counts[c + 1] += 1;
        }
        for j in 0..n_cols {
            counts[j + 1] += counts[j];
        }
        let col_ptr = counts.clone();
        let mut fill = counts;
        let mut col_pos = vec![0usize; cols.len()];
        for e in 0..cols.len() {
            let c = cols[e];
            col_pos[fill[c]] = e;
            fill[c] += 1;
        }
        Ok(Pattern { n_rows, n_cols, row_ptr, cols, bias_idx, bias_len, col_ptr, col_pos })
    }

    /// Every `(row, col)` pair, with bias index supplied by `bias`.
    pub fn full(n_rows: usize, n_cols: usize, bias_len: usize, bias: impl Fn(usize, usize) -> usize) -> Result<Self> {
        let rows = (0..n_rows)
            .map(|i| (0..n_cols).map(|j| (j, bias(i, j))).collect())
            .collect();
        Self::from_rows(n_cols, rows, bias_len)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn bias_len(&self) -> usize {
        self.bias_len
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    pub fn row_cols(&self, i: usize) -> &[usize] {
        &self.cols[self.row_range(i)]
    }

    pub fn col_of(&self, e: usize) -> usize {
        self.cols[e]
    }

    pub fn bias_of(&self, e: usize) -> usize {
        self.bias_idx[e]
    }

    /// Entry positions of column `j`, ascending by row.
    pub fn col_entries(&self, j: usize) -> &[usize] {
        &self.col_pos[self.col_ptr[j]..self.col_ptr[j + 1]]
    }

    /// Row index of every entry.
    pub fn entry_rows(&self) -> Vec<usize> {
        let mut r = vec![0; self.nnz()];
        for i in 0..self.n_rows {
            for e in self.row_range(i) {
                r[e] = i;
            }
        }
        r
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.row_cols(i).binary_search(&j).is_ok()
    }

    pub fn dense_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.n_rows * self.n_cols];
        for i in 0..self.n_rows {
            for &j in self.row_cols(i) {
                m[i * self.n_cols + j] = true;
            }
        }
        m
    }

    /// Scatter entry values into a dense `[n_rows, n_cols]` buffer.
    pub fn to_dense<T: Real>(&self, values: &[T]) -> Vec<T> {
        let mut d = vec![T::zero(); self.n_rows * self.n_cols];
        for i in 0..self.n_rows {
            for e in self.row_range(i) {
                d[i * self.n_cols + self.cols[e]] = values[e];
            }
        }
        d
    }

    /// Same sparsity with rows and columns swapped (bias indices kept).
    pub fn transposed(&self) -> Pattern {
        let rows_of = self.entry_rows();
        let rows = (0..self.n_cols)
            .map(|j| self.col_entries(j).iter().map(|&e| (rows_of[e], self.bias_idx[e])).collect())
            .collect();
        Pattern::from_rows(self.n_rows, rows, self.bias_len).expect("transpose of a valid pattern")
    }
}

/// `logit_e = scale * <rows_i, cols_j> + bias[bias_idx_e]`.
pub fn qk<T: Real>(p: &Pattern, rows: &[T], cols: &[T], d: usize, bias: &[T], scale: T, out: &mut [T]) {
    for i in 0..p.n_rows {
        let ri = &rows[i * d..(i + 1) * d];
        for e in p.row_range(i) {
            let j = p.cols[e];
            out[e] = scale * dot(ri, &cols[j * d..(j + 1) * d]) + bias[p.bias_idx[e]];
        }
    }
}

pub struct QkGrads<T> {
    pub d_rows: Vec<T>,
    pub d_cols: Vec<T>,
    pub d_bias: Vec<T>,
    pub d_scale: T,
}

pub fn qk_backward<T: Real>(
    p: &Pattern,
    rows: &[T],
    cols: &[T],
    d: usize,
    bias_len: usize,
    scale: T,
    g: &[T],
) -> QkGrads<T> {
    let mut d_rows = vec![T::zero(); rows.len()];
    let mut d_cols = vec![T::zero(); cols.len()];
    let mut d_bias = vec![T::zero(); bias_len];
    let mut d_scale = T::zero();
    for i in 0..p.n_rows {
        let ri = &rows[i * d..(i + 1) * d];
        for e in p.row_range(i) {
            let j = p.cols[e];
            let cj = &cols[j * d..(j + 1) * d];
            let ge = g[e];
            d_bias[p.bias_idx[e]] += ge;
            d_scale += ge * dot(ri, cj);
            let gs = ge * scale;
            for k in 0..d {
                d_rows[i * d + k] += gs * cj[k];
                d_cols[j * d + k] += gs * ri[k];
            }
        }
    }
    QkGrads { d_rows, d_cols, d_bias, d_scale }
}

/// Softmax over the stored entries of each row.
pub fn softmax_rows<T: Real>(p: &Pattern, x: &[T], out: &mut [T]) {
    for i in 0..p.n_rows {
        let r = p.row_range(i);
        if r.is_empty() {
            continue;
        }
        let mx = x[r.clone()].iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for e in r.clone() {
            out[e] = (x[e] - mx).exp();
            z += out[e];
        }
        for e in r {
            out[e] /= z;
        }
    }
}

pub fn softmax_rows_backward<T: Real>(p: &Pattern, y: &[T], g: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for i in 0..p.n_rows {
        let r = p.row_range(i);
        let s = dot(&y[r.clone()], &g[r.clone()]);
        for e in r {
            dx[e] = y[e] * (g[e] - s);
        }
    }
    dx
}

/// `out_e = (a_e + eps) / sum_{e' in col(e)} (a_e' + eps)`; the per-column
/// denominators are written to `denom`. With `eps == 0` a column whose mass
/// falls below `1e-12` is reported as degenerate.
pub fn col_renorm<T: Real>(p: &Pattern, a: &[T], eps: T, out: &mut [T], denom: &mut [T]) -> Result<()> {
    let floor = T::lit(1e-12);
    for j in 0..p.n_cols {
        let entries = p.col_entries(j);
        let mut s = T::zero();
        for &e in entries {
            s += a[e] + eps;
        }
        if eps == T::zero() && s < floor {
            return Err(Error::DegenerateColumn { column: j, mass: s.as_f64() });
        }
        denom[j] = s;
        for &e in entries {
            out[e] = (a[e] + eps) / s;
        }
    }
    Ok(())
}

pub fn col_renorm_backward<T: Real>(p: &Pattern, y: &[T], denom: &[T], g: &[T]) -> Vec<T> {
    let mut da = vec![T::zero(); y.len()];
    for j in 0..p.n_cols {
        let entries = p.col_entries(j);
        let mut s = T::zero();
        for &e in entries {
            s += g[e] * y[e];
        }
        for &e in entries {
            da[e] = (g[e] - s) / denom[j];
        }
    }
    da
}

/// `out_i = sum_j a_ij x_j` (gather from columns into rows).
pub fn apply<T: Real>(p: &Pattern, a: &[T], x: &[T], d: usize, out: &mut [T]) {
    for i in 0..p.n_rows {
        let o = &mut out[i * d..(i + 1) * d];
        o.iter_mut().for_each(|v| *v = T::zero());
        for e in p.row_range(i) {
            let j = p.cols[e];
            let w = a[e];
            for (ov, xv) in o.iter_mut().zip(&x[j * d..(j + 1) * d]) {
                *ov += w * *xv;
            }
        }
    }
}

/// `out_j = sum_i a_ij x_i` (scatter from rows into columns), swept
/// column by column through the output-major index.
pub fn apply_t<T: Real>(p: &Pattern, a: &[T], x: &[T], d: usize, out: &mut [T], rows_of: &[usize]) {
    for j in 0..p.n_cols {
        let o = &mut out[j * d..(j + 1) * d];
        o.iter_mut().for_each(|v| *v = T::zero());
        for &e in p.col_entries(j) {
            let i = rows_of[e];
            let w = a[e];
            for (ov, xv) in o.iter_mut().zip(&x[i * d..(i + 1) * d]) {
                *ov += w * *xv;
            }
        }
    }
}

/// Gradients of `out = apply(a, x)`: returns `(d_a, d_x)`.
pub fn apply_backward<T: Real>(p: &Pattern, a: &[T], x: &[T], d: usize, g: &[T]) -> (Vec<T>, Vec<T>) {
    let mut da = vec![T::zero(); a.len()];
    let mut dx = vec![T::zero(); x.len()];
    for i in 0..p.n_rows {
        let gi = &g[i * d..(i + 1) * d];
        for e in p.row_range(i) {
            let j = p.cols[e];
            da[e] = dot(gi, &x[j * d..(j + 1) * d]);
            let w = a[e];
            for (dv, gv) in dx[j * d..(j + 1) * d].iter_mut().zip(gi) {
                *dv += w * *gv;
            }
        }
    }
    (da, dx)
}

/// Gradients of `out = apply_t(a, x)`: returns `(d_a, d_x)`.
pub fn apply_t_backward<T: Real>(p: &Pattern, a: &[T], x: &[T], d: usize, g: &[T]) -> (Vec<T>, Vec<T>) {
    let mut da = vec![T::zero(); a.len()];
    let mut dx = vec![T::zero(); x.len()];
    for i in 0..p.n_rows {
        let xi = &x[i * d..(i + 1) * d];
        for e in p.row_range(i) {
            let j = p.cols[e];
            let gj = &g[j * d..(j + 1) * d];
            da[e] = dot(gj, xi);
            let w = a[e];
            for (dv, gv) in dx[i * d..(i + 1) * d].iter_mut().zip(gj) {
                *dv += w * *gv;
            }
        }
    }
    (da, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Pattern {
        // 3 rows, 2 cols: row0 {0}, row1 {0,1}, row2 {1}
        Pattern::from_rows(2, vec![vec![(0, 0)], vec![(0, 1), (1, 2)], vec![(1, 0)]], 3).unwrap()
    }

    #[test]
    fn output_major_index_lists_rows_in_order() {
        let p = small();
        assert_eq!(p.col_entries(0), &[0, 1]);
        assert_eq!(p.col_entries(1), &[2, 3]);
        assert_eq!(p.entry_rows(), vec![0, 1, 1, 2]);
    }

    #[test]
    fn transpose_round_trips() {
        let p = small();
        assert_eq!(p.transposed().transposed(), p);
        assert!(p.transposed().contains(1, 2));
    }

    #[test]
    fn rejects_unsorted_rows() {
        assert!(Pattern::from_rows(3, vec![vec![(2, 0), (1, 0)]], 1).is_err());
    }

    #[test]
    fn renorm_columns_sum_to_one() {
        let p = small();
        let a = [0.3, 0.5, 0.5, 1.0];
        let mut out = [0.0f64; 4];
        let mut den = [0.0; 2];
        col_renorm(&p, &a, 0.0, &mut out, &mut den).unwrap();
        assert!((out[0] + out[1] - 1.0).abs() < 1e-15);
        assert!((out[2] + out[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn renorm_flags_empty_column_without_eps() {
        let p = small();
        let a = [0.0, 0.0, 0.5, 1.0];
        let mut out = [0.0f64; 4];
        let mut den = [0.0; 2];
        let err = col_renorm(&p, &a, 0.0, &mut out, &mut den).unwrap_err();
        assert!(matches!(err, Error::DegenerateColumn { column: 0, .. }));
        col_renorm(&p, &a, 1e-6, &mut out, &mut den).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-12);
    }
}
