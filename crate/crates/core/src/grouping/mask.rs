//! Which output cells each input token may be assigned to.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Pattern;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingMode {
    Local,
    Dense,
}

/// Permitted `(input, output)` pairs with their relative-bias indices.
///
/// Offsets are measured from an input's parent cell `(r/2, c/2)` to the
/// candidate output cell. Local masks keep the 3×3 parent window (bias
/// table of 9). Dense masks keep every pair and index a table covering all
/// offsets of a `table_h × table_w` output grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalityMask {
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub mode: GroupingMode,
    pub table_h: usize,
    pub table_w: usize,
    pattern: Arc<Pattern>,
}

pub const LOCAL_BIAS_LEN: usize = 9;

pub fn dense_bias_len(table_h: usize, table_w: usize) -> usize {
    (2 * table_h - 1) * (2 * table_w - 1)
}

pub fn build_local_mask(h_in: usize, w_in: usize) -> Result<LocalityMask> {
    if h_in < 2 || w_in < 2 || h_in % 2 != 0 || w_in % 2 != 0 {
        return Err(Error::Geometry(format!("local grouping needs even sides >= 2, got {h_in}x{w_in}")));
    }
    let (h_out, w_out) = (h_in / 2, w_in / 2);
    let mut rows = Vec::with_capacity(h_in * w_in);
    for r in 0..h_in {
        for c in 0..w_in {
            let (pr, pc) = (r / 2, c / 2);
            let mut row = Vec::with_capacity(9);
            for rr in pr.saturating_sub(1)..=(pr + 1).min(h_out - 1) {
                for cc in pc.saturating_sub(1)..=(pc + 1).min(w_out - 1) {
                    let b = (rr + 1 - pr) * 3 + (cc + 1 - pc);
                    row.push((rr * w_out + cc, b));
                }
            }
            rows.push(row);
        }
    }
    let pattern = Pattern::from_rows(h_out * w_out, rows, LOCAL_BIAS_LEN)?;
    Ok(LocalityMask { h_in, w_in, h_out, w_out, mode: GroupingMode::Local, table_h: 2, table_w: 2, pattern: Arc::new(pattern) })
}

/// Output grid is `ceil(h/2) × ceil(w/2)`, matching a 3×3 stride-2 pad-1
/// convolution.
pub fn build_dense_mask(h_in: usize, w_in: usize, table_h: usize, table_w: usize) -> Result<LocalityMask> {
    if h_in == 0 || w_in == 0 {
        return Err(Error::Geometry("empty input grid".into()));
    }
    let (h_out, w_out) = (h_in.div_ceil(2), w_in.div_ceil(2));
    if h_out > table_h || w_out > table_w {
        return Err(Error::Config(format!(
            "dense grouping output {h_out}x{w_out} exceeds the {table_h}x{table_w} bias table"
        )));
    }
    let tw = 2 * table_w - 1;
    let pattern = Pattern::full(h_in * w_in, h_out * w_out, dense_bias_len(table_h, table_w), |i, j| {
        let (pr, pc) = ((i / w_in) / 2, (i % w_in) / 2);
        let (rr, cc) = (j / w_out, j % w_out);
        let dr = rr + table_h - 1 - pr;
        let dc = cc + table_w - 1 - pc;
        dr * tw + dc
    })?;
    Ok(LocalityMask { h_in, w_in, h_out, w_out, mode: GroupingMode::Dense, table_h, table_w, pattern: Arc::new(pattern) })
}

impl LocalityMask {
    pub fn n_in(&self) -> usize {
        self.h_in * self.w_in
    }

    pub fn n_out(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn bias_len(&self) -> usize {
        self.pattern.bias_len()
    }

    /// Output indices permitted for input `i`, ascending.
    pub fn permitted(&self, i: usize) -> &[usize] {
        self.pattern.row_cols(i)
    }

    /// Inputs that may feed output `j`, ascending.
    pub fn contributors(&self, j: usize) -> Vec<usize> {
        let rows = self.pattern.entry_rows();
        self.pattern.col_entries(j).iter().map(|&e| rows[e]).collect()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.pattern.contains(i, j)
    }

    pub fn entries(&self) -> usize {
        self.pattern.nnz()
    }

    pub fn dense_mask(&self) -> Vec<bool> {
        self.pattern.dense_mask()
    }

    /// Bias-table index for every dense `(i, j)` cell; cells outside the
    /// mask point at entry 0 and are never read through the softmax.
    pub fn dense_bias_index(&self) -> Vec<usize> {
        let n = self.n_out();
        let mut idx = vec![0; self.n_in() * n];
        for i in 0..self.n_in() {
            for e in self.pattern.row_range(i) {
                idx[i * n + self.pattern.col_of(e)] = self.pattern.bias_of(e);
            }
        }
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_by_four_permits_whole_output() {
        let m = build_local_mask(4, 4).unwrap();
        assert!((0..16).all(|i| m.permitted(i) == [0, 1, 2, 3]));
    }

    #[test]
    fn eight_by_eight_corner_and_interior() {
        let m = build_local_mask(8, 8).unwrap();
        assert_eq!(m.permitted(0), &[0, 1, 4, 5]);
        let i33 = 3 * 8 + 3;
        assert_eq!(m.permitted(i33), &[0, 1, 2, 4, 5, 6, 8, 9, 10]);
    }

    #[test]
    fn eight_by_eight_entry_count() {
        // Parent sides have clipped window widths 2,3,3,2, each covering two input rows.
        let per_axis: usize = [2, 3, 3, 2].iter().map(|w| 2 * w).sum();
        assert_eq!(build_local_mask(8, 8).unwrap().entries(), per_axis * per_axis);
        assert_eq!(per_axis * per_axis, 400);
    }

    #[test]
    fn odd_sides_are_rejected() {
        assert!(matches!(build_local_mask(5, 4), Err(Error::Geometry(_))));
        assert!(matches!(build_local_mask(0, 4), Err(Error::Geometry(_))));
    }

    #[test]
    fn local_bias_indices_encode_offsets() {
        let m = build_local_mask(8, 8).unwrap();
        let p = m.pattern();
        let i = 3 * 8 + 3;
        let b: Vec<usize> = p.row_range(i).map(|e| p.bias_of(e)).collect();
        assert_eq!(b, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn dense_mask_is_full_and_centered() {
        let m = build_dense_mask(4, 4, 2, 2).unwrap();
        assert_eq!(m.entries(), 16 * 4);
        assert_eq!(m.bias_len(), 9);
        let big = build_dense_mask(4, 4, 7, 7).unwrap();
        let p = big.pattern();
        // input 0 has parent (0,0); output 0 is offset (0,0), the table centre.
        assert_eq!(p.bias_of(p.row_range(0).start), 6 * 13 + 6);
        assert!(matches!(build_dense_mask(16, 16, 7, 7), Err(Error::Config(_))));
    }
}
