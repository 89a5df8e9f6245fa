//! Minimum-cost bipartite matching.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `pairs` holds `(pred, gt)` sorted by prediction index.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

impl Matching {
    /// Ground-truth index matched to each prediction.
    pub fn gt_of(&self, n_pred: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_pred];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }
}

fn check(cost: &Tensor<f64>) -> Result<(usize, usize)> {
    if cost.shape().len() != 2 {
        return Err(Error::dim("hungarian", format!("cost must be a matrix, got {:?}", cost.shape())));
    }
    if cost.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { op: "hungarian" });
    }
    Ok((cost.rows(), cost.cols()))
}

fn finish(cost: &Tensor<f64>, mut pairs: Vec<(usize, usize)>) -> Matching {
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(p, g)| cost.get2(p, g)).sum();
    Matching { pairs, total }
}

/// Matches `min(n_pred, n_gt)` pairs at minimum total cost using potentials
/// and shortest augmenting paths, `O(n² m)`.
pub fn hungarian(cost: &Tensor<f64>) -> Result<Matching> {
    let (n, m) = check(cost)?;
    if n == 0 || m == 0 {
        return Ok(Matching { pairs: Vec::new(), total: 0.0 });
    }
    let transposed = n > m;
    let (rows, cols) = if transposed { (m, n) } else { (n, m) };
    let a = |i: usize, j: usize| if transposed { cost.get2(j, i) } else { cost.get2(i, j) };

    // 1-based potentials; p[j] is the row holding column j.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let pairs = (1..=cols)
        .filter(|&j| p[j] != 0)
        .map(|j| if transposed { (j - 1, p[j] - 1) } else { (p[j] - 1, j - 1) })
        .collect();
    Ok(finish(cost, pairs))
}

/// Exhaustive search over injective assignments; the first optimum in
/// lexicographic order wins. Only sensible for small matrices.
pub fn brute_force(cost: &Tensor<f64>) -> Result<Matching> {
    let (n, m) = check(cost)?;
    let transposed = n > m;
    let (rows, cols) = if transposed { (m, n) } else { (n, m) };
    let a = |i: usize, j: usize| if transposed { cost.get2(j, i) } else { cost.get2(i, j) };
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut cur = Vec::with_capacity(rows);
    let mut used = vec![false; cols];
    fn rec(i: usize, rows: usize, cols: usize, a: &dyn Fn(usize, usize) -> f64, cur: &mut Vec<usize>, used: &mut [bool], best: &mut Option<(f64, Vec<usize>)>) {
        if i == rows {
            let t: f64 = cur.iter().enumerate().map(|(r, &c)| a(r, c)).sum();
            if best.as_ref().is_none_or(|(b, _)| t < *b) {
                *best = Some((t, cur.clone()));
            }
            return;
        }
        for j in 0..cols {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(i + 1, rows, cols, a, cur, used, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    rec(0, rows, cols, &a, &mut cur, &mut used, &mut best);
    let pairs = best
        .map(|(_, assign)| assign.into_iter().enumerate().map(|(r, c)| if transposed { (c, r) } else { (r, c) }).collect())
        .unwrap_or_default();
    Ok(finish(cost, pairs))
}
