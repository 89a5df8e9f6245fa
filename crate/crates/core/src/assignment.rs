//! Composition of per-layer assignments across stages.
//!
//! Stage 1 is the patch grid; link `s` maps stage `s` to stage `s + 1`.
//! Products stay in compressed-row form and only turn dense when a dense
//! link enters the product.

use crate::error::{Error, Result};
use crate::grouping::{AssignmentPair, GroupingMode, Layout};
use crate::numerics::{kernels, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn identity(n: usize) -> Self {
        CsrMatrix { n_rows: n, n_cols: n, row_ptr: (0..=n).collect(), cols: (0..n).collect(), vals: vec![1.0; n] }
    }

    /// Keeps the nonzero entries of a dense row-major matrix.
    pub fn from_dense(t: &Tensor<f64>) -> Self {
        let (n, m) = (t.rows(), t.cols());
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for i in 0..n {
            for (j, &v) in t.row(i).iter().enumerate() {
                if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        CsrMatrix { n_rows: n, n_cols: m, row_ptr, cols, vals }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn to_dense(&self) -> Tensor<f64> {
        let mut d = vec![0.0; self.n_rows * self.n_cols];
        for i in 0..self.n_rows {
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                d[i * self.n_cols + self.cols[e]] += self.vals[e];
            }
        }
        Tensor::new(vec![self.n_rows, self.n_cols], d).expect("csr geometry")
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.cols {
            counts[c + 1] += 1;
        }
        for j in 0..self.n_cols {
            counts[j + 1] += counts[j];
        }
        let row_ptr = counts.clone();
        let mut fill = counts;
        let mut cols = vec![0; self.nnz()];
        let mut vals = vec![0.0; self.nnz()];
        for i in 0..self.n_rows {
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                let c = self.cols[e];
                cols[fill[c]] = i;
                vals[fill[c]] = self.vals[e];
                fill[c] += 1;
            }
        }
        CsrMatrix { n_rows: self.n_cols, n_cols: self.n_rows, row_ptr, cols, vals }
    }

    /// Row-by-row sparse product with a dense accumulator.
    pub fn matmul(&self, other: &CsrMatrix) -> Result<CsrMatrix> {
        if self.n_cols != other.n_rows {
            return Err(Error::dim("csr_matmul", format!("{}x{} * {}x{}", self.n_rows, self.n_cols, other.n_rows, other.n_cols)));
        }
        let m = other.n_cols;
        let mut acc = vec![0.0; m];
        let mut seen = vec![false; m];
        let mut touched = Vec::new();
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for i in 0..self.n_rows {
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                let (k, a) = (self.cols[e], self.vals[e]);
                for f in other.row_ptr[k]..other.row_ptr[k + 1] {
                    let j = other.cols[f];
                    if !seen[j] {
                        seen[j] = true;
                        touched.push(j);
                    }
                    acc[j] += a * other.vals[f];
                }
            }
            touched.sort_unstable();
            for &j in &touched {
                cols.push(j);
                vals.push(acc[j]);
                acc[j] = 0.0;
                seen[j] = false;
            }
            touched.clear();
            row_ptr.push(cols.len());
        }
        Ok(CsrMatrix { n_rows: self.n_rows, n_cols: m, row_ptr, cols, vals })
    }

    pub fn matmul_dense(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        if x.shape().len() != 2 || x.rows() != self.n_cols {
            return Err(Error::dim("csr_matmul_dense", format!("{}x{} * {:?}", self.n_rows, self.n_cols, x.shape())));
        }
        let d = x.cols();
        let mut out = vec![0.0; self.n_rows * d];
        for i in 0..self.n_rows {
            let o = &mut out[i * d..(i + 1) * d];
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                let a = self.vals[e];
                for (ov, xv) in o.iter_mut().zip(x.row(self.cols[e])) {
                    *ov += a * *xv;
                }
            }
        }
        Tensor::new(vec![self.n_rows, d], out)
    }
}

fn pair_csr(pair: &AssignmentPair<f64>, values: &[f64]) -> CsrMatrix {
    match &pair.layout {
        Layout::Dense => CsrMatrix::from_dense(&Tensor::new(vec![pair.n_in(), pair.n_out()], values.to_vec()).expect("pair geometry")),
        Layout::Sparse(p) => {
            let row_ptr = std::iter::once(0).chain((0..p.n_rows()).map(|i| p.row_range(i).end)).collect();
            let cols = (0..p.nnz()).map(|e| p.col_of(e)).collect();
            CsrMatrix { n_rows: p.n_rows(), n_cols: p.n_cols(), row_ptr, cols, vals: values.to_vec() }
        }
    }
}

/// Links in stage order; `links[k]` maps stage `k + 1` to stage `k + 2`.
#[derive(Clone, Debug)]
pub struct AssignmentChain {
    links: Vec<AssignmentPair<f64>>,
}

impl AssignmentChain {
    pub fn new(links: Vec<AssignmentPair<f64>>) -> Result<Self> {
        for w in links.windows(2) {
            if w[0].n_out() != w[1].n_in() || (w[0].h_out, w[0].w_out) != (w[1].h_in, w[1].w_in) {
                return Err(Error::Geometry(format!(
                    "link output {}x{} does not feed next input {}x{}",
                    w[0].h_out, w[0].w_out, w[1].h_in, w[1].w_in
                )));
            }
        }
        Ok(AssignmentChain { links })
    }

    pub fn links(&self) -> &[AssignmentPair<f64>] {
        &self.links
    }

    /// Number of stages covered (links + 1).
    pub fn stages(&self) -> usize {
        self.links.len() + 1
    }

    pub fn stage_grid(&self, stage: usize) -> Result<(usize, usize)> {
        self.check_stage(stage)?;
        Ok(if stage == 1 {
            (self.links[0].h_in, self.links[0].w_in)
        } else {
            let l = &self.links[stage - 2];
            (l.h_out, l.w_out)
        })
    }

    fn check_stage(&self, s: usize) -> Result<()> {
        if self.links.is_empty() || s == 0 || s > self.stages() {
            return Err(Error::Usage(format!("stage {s} outside a chain of {} stages", self.stages())));
        }
        Ok(())
    }

    pub fn ups_csr(&self, link: usize) -> CsrMatrix {
        let p = &self.links[link];
        pair_csr(p, &p.ups)
    }

    pub fn down_csr(&self, link: usize) -> CsrMatrix {
        let p = &self.links[link];
        pair_csr(p, &p.down)
    }
}

/// `A_to · … · A_{from-1}`: the `N_to × N_from` map lifting stage-`from`
/// features to stage `to`.
pub fn compose_ups(chain: &AssignmentChain, from_stage: usize, to_stage: usize) -> Result<Tensor<f64>> {
    chain.check_stage(from_stage)?;
    chain.check_stage(to_stage)?;
    if to_stage >= from_stage {
        return Err(Error::Usage(format!("compose_ups needs to < from, got {to_stage} >= {from_stage}")));
    }
    let mut prod = chain.ups_csr(to_stage - 1);
    for link in to_stage..from_stage - 1 {
        if chain.links[link].mode == GroupingMode::Dense {
            let dense = chain.links[link].ups_dense();
            let mut out = prod.matmul_dense(&dense)?;
            for rest in link + 1..from_stage - 1 {
                out = matmul_dense(&out, &chain.links[rest].ups_dense())?;
            }
            return Ok(out);
        }
        prod = prod.matmul(&chain.ups_csr(link))?;
    }
    Ok(prod.to_dense())
}

/// `1ᵀ A_{1→stage}`: stage-1 probability mass held by each stage token.
/// Sums to the stage-1 token count.
pub fn column_mass(chain: &AssignmentChain, stage: usize) -> Result<Vec<f64>> {
    chain.check_stage(stage)?;
    let (h, w) = chain.stage_grid(1)?;
    let mut mass = vec![1.0; h * w];
    for link in 0..stage - 1 {
        let a = chain.ups_csr(link);
        let mut next = vec![0.0; a.n_cols];
        for (i, &m) in mass.iter().enumerate() {
            for e in a.row_ptr[i]..a.row_ptr[i + 1] {
                next[a.cols[e]] += m * a.vals[e];
            }
        }
        mass = next;
    }
    Ok(mass)
}

/// `A_downᵀ_{to-1} · … · A_downᵀ_{from}`: the `N_to × N_from` pooling map
/// from stage `from` to stage `to`. Rows sum to one.
pub fn compose_down(chain: &AssignmentChain, from_stage: usize, to_stage: usize) -> Result<Tensor<f64>> {
    chain.check_stage(from_stage)?;
    chain.check_stage(to_stage)?;
    if to_stage <= from_stage {
        return Err(Error::Usage(format!("compose_down needs to > from, got {to_stage} <= {from_stage}")));
    }
    let mut prod = chain.down_csr(from_stage - 1).transpose();
    for link in from_stage..to_stage - 1 {
        prod = chain.down_csr(link).transpose().matmul(&prod)?;
    }
    Ok(prod.to_dense())
}

fn matmul_dense(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    a.matmul(b)
}

/// `a_ups · x`.
pub fn upsample_features(a_ups: &Tensor<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    if a_ups.shape().len() != 2 || x.shape().len() != 2 || a_ups.cols() != x.rows() {
        return Err(Error::dim("upsample_features", format!("{:?} * {:?}", a_ups.shape(), x.shape())));
    }
    let (n, k, m) = (a_ups.rows(), a_ups.cols(), x.cols());
    Tensor::new(vec![n, m], kernels::matmul(a_ups.data(), x.data(), n, k, m))
}

/// Per-cell segment labels on the patch grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMap {
    pub labels: Vec<u32>,
    pub n_segments: usize,
    pub stage: usize,
    pub h: usize,
    pub w: usize,
}

impl SegmentMap {
    /// Labels that own at least one cell.
    pub fn occupied(&self) -> usize {
        let mut seen = vec![false; self.n_segments];
        self.labels.iter().for_each(|&l| seen[l as usize] = true);
        seen.iter().filter(|s| **s).count()
    }

    pub fn empty_segments(&self) -> Vec<usize> {
        let mut seen = vec![false; self.n_segments];
        self.labels.iter().for_each(|&l| seen[l as usize] = true);
        (0..self.n_segments).filter(|&l| !seen[l]).collect()
    }

    /// Nearest-neighbour replication by `factor` on both axes.
    pub fn upscale(&self, factor: usize) -> SegmentMap {
        let (h, w) = (self.h * factor, self.w * factor);
        let labels = (0..h * w).map(|e| self.labels[(e / w / factor) * self.w + (e % w) / factor]).collect();
        SegmentMap { labels, h, w, ..self.clone() }
    }
}

/// Row argmax; ties go to the lowest column.
pub fn hard_assign(a_ups: &Tensor<f64>, h: usize, w: usize, stage: usize) -> Result<SegmentMap> {
    if a_ups.shape().len() != 2 || a_ups.rows() != h * w {
        return Err(Error::dim("hard_assign", format!("{:?} for a {h}x{w} grid", a_ups.shape())));
    }
    let labels = (0..a_ups.rows()).map(|i| argmax(a_ups.row(i)) as u32).collect();
    Ok(SegmentMap { labels, n_segments: a_ups.cols(), stage, h, w })
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = j;
        }
    }
    best
}

/// Hard maps of stages 2.. on the stage-1 grid.
pub fn stage_segmentations(chain: &AssignmentChain) -> Result<Vec<SegmentMap>> {
    let (h, w) = chain.stage_grid(1)?;
    (2..=chain.stages()).map(|s| hard_assign(&compose_ups(chain, s, 1)?, h, w, s)).collect()
}
