//! Reverse-mode tape.
//!
//! Every primitive appends one node holding its output value and the
//! operands its vector-Jacobian product needs. `backward` walks the nodes in
//! exact reverse order and accumulates parent gradients additively, so a
//! value used twice receives the sum of both contributions.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom};
use super::pattern::{self, Pattern};
use super::{ensure_finite, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian callback for [`Tape::custom`]: receives the operand
/// values, the output value and the output gradient; returns one gradient
/// buffer per operand.
pub type CustomVjp<T> = Arc<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>> + Send + Sync>;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, n: usize, k: usize, m: usize },
    Transpose { a: Var, n: usize, m: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddRow { x: Var, b: Var },
    Affine { x: Var, scale: T },
    ScaleVar { x: Var, s: Var },
    Exp { x: Var },
    Ln { x: Var },
    Gelu { x: Var },
    Clamp { x: Var, lo: T, hi: T },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T>, d: usize },
    SoftmaxRows { x: Var, n: usize, m: usize },
    ColRenorm { x: Var, n: usize, m: usize, sums: Vec<T> },
    Unfold { x: Var, geom: ConvGeom },
    GatherRows { x: Var, idx: Arc<Vec<usize>>, cols: usize },
    GatherTable { table: Var, idx: Arc<Vec<usize>> },
    ConcatCols { a: Var, b: Var, n: usize, ca: usize, cb: usize },
    SliceCols { x: Var, start: usize, len: usize, n: usize, c: usize },
    SliceRows { x: Var, start: usize, len: usize, c: usize },
    Reshape { x: Var },
    SumAll { x: Var },
    MeanRows { x: Var, n: usize, c: usize },
    PatternQk { rows: Var, cols: Var, bias: Var, scale: Var, p: Arc<Pattern>, d: usize },
    PatternSoftmax { x: Var, p: Arc<Pattern> },
    PatternColRenorm { x: Var, p: Arc<Pattern>, denom: Vec<T> },
    PatternApply { a: Var, x: Var, p: Arc<Pattern>, d: usize },
    PatternApplyT { a: Var, x: Var, p: Arc<Pattern>, d: usize },
    CrossEntropy { logits: Var, targets: Arc<Vec<Option<usize>>>, probs: Vec<T>, count: usize },
    Custom { inputs: Vec<Var>, vjp: CustomVjp<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-owner record of executed primitives.
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Real = f64> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of `v`, zeros when nothing reached it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn matrix_dims<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [n, m] => Ok((*n, *m)),
        s => Err(Error::dim(op, format!("expected a matrix, got {s:?}"))),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true }
    }

    /// A tape that evaluates values only; nothing is retained for backward.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a tensor; it is differentiated when its `requires_grad`
    /// flag is set and the tape is recording.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        ensure_finite("leaf", t.data())?;
        let needs_grad = self.recording && t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t.with_requires_grad(true))
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        ensure_finite(name, value.data())?;
        let needs_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, m) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{n},{k}] x [{k2},{m}]")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push("matmul", Tensor::from_parts(vec![n, m], out), Op::MatMul { a, b, n, k, m }, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = matrix_dims("transpose", self.value(a))?;
        let out = kernels::transpose(self.value(a).data(), n, m);
        self.push("transpose", Tensor::from_parts(vec![m, n], out), Op::Transpose { a, n, m }, &[a])
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(name, self.value(a), self.value(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(x);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul { a, b }, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("div", a, b, |x, y| x / y)?;
        self.push("div", out, Op::Div { a, b }, &[a, b])
    }

    /// `x + b` with `b` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(b).numel() != c {
            return Err(Error::dim("add_row", format!("{:?} + {:?}", self.shape(x), self.shape(b))));
        }
        let bias = self.value(b).data().to_vec();
        let t = self.value(x);
        let data = t.data().chunks(c).flat_map(|r| r.iter().zip(&bias).map(|(v, w)| *v + *w)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("add_row", out, Op::AddRow { x, b }, &[x, b])
    }

    /// `scale * x + shift` for constants.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.map(x, |v| scale * v + shift);
        self.push("affine", out, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.affine(x, c, T::zero())
    }

    /// `s * x` where `s` is a one-element variable.
    pub fn scale_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("scale_var", "scale must have one element"));
        }
        let sv = self.value(s).data()[0];
        let out = self.map(x, |v| sv * v);
        self.push("scale_var", out, Op::ScaleVar { x, s }, &[x, s])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, T::exp);
        self.push("exp", out, Op::Exp { x }, &[x])
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::Numeric { op: "ln" });
        }
        let out = self.map(x, T::ln);
        self.push("ln", out, Op::Ln { x }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, kernels::gelu);
        self.push("gelu", out, Op::Gelu { x }, &[x])
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let out = self.map(x, |v| v.max(lo).min(hi));
        self.push("clamp", out, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 || self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim("layer_norm", format!("x {:?}, gamma {:?}", self.shape(x), self.shape(gamma))));
        }
        if eps <= T::zero() {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let r = kernels::layer_norm(self.value(x).data(), d, self.value(gamma).data(), self.value(beta).data(), eps);
        let out = Tensor::from_parts(self.shape(x).to_vec(), r.y);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm { x, gamma, beta, xhat: r.xhat, rstd: r.rstd, d },
            &[x, gamma, beta],
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_rows_masked(x, None)
    }

    /// Row softmax restricted to entries where `mask` is true; excluded
    /// entries are exact zeros and receive no gradient.
    pub fn softmax_rows_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (n, m) = matrix_dims("softmax_rows", self.value(x))?;
        if let Some(mk) = mask {
            if mk.len() != n * m {
                return Err(Error::dim("softmax_rows", "mask size"));
            }
        }
        let y = kernels::softmax_rows(self.value(x).data(), n, m, mask);
        self.push("softmax_rows", Tensor::from_parts(vec![n, m], y), Op::SoftmaxRows { x, n, m }, &[x])
    }

    /// Divide every column by its sum. Columns with total mass below
    /// `1e-12` cannot be renormalized.
    pub fn col_renorm(&mut self, x: Var) -> Result<Var> {
        let (n, m) = matrix_dims("col_renorm", self.value(x))?;
        let sums = self.value(x).col_sums();
        if let Some((j, s)) = sums.iter().enumerate().find(|(_, s)| **s < T::lit(1e-12)) {
            return Err(Error::DegenerateColumn { column: j, mass: s.as_f64() });
        }
        let data = self.value(x).data();
        let y = (0..n * m).map(|e| data[e] / sums[e % m]).collect();
        self.push("col_renorm", Tensor::from_parts(vec![n, m], y), Op::ColRenorm { x, n, m, sums }, &[x])
    }

    /// im2col over a `[h*w, c]` grid.
    pub fn unfold(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        if self.shape(x) != [geom.h * geom.w, geom.c] {
            return Err(Error::dim("unfold", format!("{:?} vs grid {}x{}x{}", self.shape(x), geom.h, geom.w, geom.c)));
        }
        let cols = kernels::unfold(self.value(x).data(), &geom);
        let out = Tensor::from_parts(vec![geom.h_out * geom.w_out, geom.patch_len()], cols);
        self.push("unfold", out, Op::Unfold { x, geom }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (n, c) = matrix_dims("gather_rows", self.value(x))?;
        if idx.iter().any(|&i| i >= n) {
            return Err(Error::dim("gather_rows", "row index out of range"));
        }
        let src = self.value(x).data();
        let data: Vec<T> = idx.iter().flat_map(|&i| src[i * c..(i + 1) * c].iter().copied()).collect();
        let out = Tensor::from_parts(vec![idx.len(), c], data);
        self.push("gather_rows", out, Op::GatherRows { x, idx, cols: c }, &[x])
    }

    /// Builds a tensor of `shape` whose element `e` is `table[idx[e]]`.
    pub fn gather_table(&mut self, table: Var, idx: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let len = self.value(table).numel();
        if idx.len() != shape.iter().product::<usize>() || idx.iter().any(|&i| i >= len) {
            return Err(Error::dim("gather_table", "index/shape mismatch"));
        }
        let tv = self.value(table).data();
        let data = idx.iter().map(|&i| tv[i]).collect();
        self.push("gather_table", Tensor::from_parts(shape, data), Op::GatherTable { table, idx }, &[table])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = matrix_dims("concat_cols", self.value(a))?;
        let (n2, cb) = matrix_dims("concat_cols", self.value(b))?;
        if n != n2 {
            return Err(Error::dim("concat_cols", format!("{n} vs {n2} rows")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(&da[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        self.push("concat_cols", Tensor::from_parts(vec![n, ca + cb], data), Op::ConcatCols { a, b, n, ca, cb }, &[a, b])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = matrix_dims("slice_cols", self.value(x))?;
        if start + len > c {
            return Err(Error::dim("slice_cols", format!("{start}+{len} > {c}")));
        }
        let src = self.value(x).data();
        let data = (0..n).flat_map(|i| src[i * c + start..i * c + start + len].iter().copied()).collect();
        self.push("slice_cols", Tensor::from_parts(vec![n, len], data), Op::SliceCols { x, start, len, n, c }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = matrix_dims("slice_rows", self.value(x))?;
        if start + len > n {
            return Err(Error::dim("slice_rows", format!("{start}+{len} > {n}")));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", Tensor::from_parts(vec![len, c], data), Op::SliceRows { x, start, len, c }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?.with_requires_grad(false);
        self.push("reshape", out, Op::Reshape { x }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll { x }, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s = self.sum_all(x)?;
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Column means, `[n, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = matrix_dims("mean_rows", self.value(x))?;
        if n == 0 {
            return Err(Error::dim("mean_rows", "no rows"));
        }
        let inv = T::one() / T::from_usize(n).unwrap();
        let data = self.value(x).col_sums().into_iter().map(|s| s * inv).collect();
        self.push("mean_rows", Tensor::from_parts(vec![1, c], data), Op::MeanRows { x, n, c }, &[x])
    }

    /// Sparse logits `scale * <rows_i, cols_j> + bias[b(i,j)]` over the
    /// entries of `p`; output is one value per stored entry.
    pub fn pattern_qk(&mut self, rows: Var, cols: Var, bias: Var, scale: Var, p: Arc<Pattern>) -> Result<Var> {
        let (nr, d) = matrix_dims("pattern_qk", self.value(rows))?;
        let (nc, d2) = matrix_dims("pattern_qk", self.value(cols))?;
        if nr != p.n_rows() || nc != p.n_cols() || d != d2 {
            return Err(Error::dim("pattern_qk", format!("rows [{nr},{d}], cols [{nc},{d2}], pattern {}x{}", p.n_rows(), p.n_cols())));
        }
        if self.value(bias).numel() != p.bias_len() || self.value(scale).numel() != 1 {
            return Err(Error::dim("pattern_qk", "bias table or scale size"));
        }
        let mut out = vec![T::zero(); p.nnz()];
        let sc = self.value(scale).data()[0];
        pattern::qk(&p, self.value(rows).data(), self.value(cols).data(), d, self.value(bias).data(), sc, &mut out);
        let t = Tensor::from_parts(vec![p.nnz()], out);
        self.push("pattern_qk", t, Op::PatternQk { rows, cols, bias, scale, p, d }, &[rows, cols, bias, scale])
    }

    pub fn pattern_softmax(&mut self, x: Var, p: Arc<Pattern>) -> Result<Var> {
        if self.value(x).numel() != p.nnz() {
            return Err(Error::dim("pattern_softmax", "entry count"));
        }
        let mut out = vec![T::zero(); p.nnz()];
        pattern::softmax_rows(&p, self.value(x).data(), &mut out);
        self.push("pattern_softmax", Tensor::from_parts(vec![p.nnz()], out), Op::PatternSoftmax { x, p }, &[x])
    }

    /// `(a + eps) / column sum of (a + eps)` over the pattern's columns.
    pub fn pattern_col_renorm(&mut self, x: Var, p: Arc<Pattern>, eps: T) -> Result<Var> {
        if self.value(x).numel() != p.nnz() {
            return Err(Error::dim("pattern_col_renorm", "entry count"));
        }
        if eps < T::zero() {
            return Err(Error::Config("epsilon must be non-negative".into()));
        }
        let mut out = vec![T::zero(); p.nnz()];
        let mut denom = vec![T::zero(); p.n_cols()];
        pattern::col_renorm(&p, self.value(x).data(), eps, &mut out, &mut denom)?;
        self.push(
            "pattern_col_renorm",
            Tensor::from_parts(vec![p.nnz()], out),
            Op::PatternColRenorm { x, p, denom },
            &[x],
        )
    }

    /// Rows gather from columns: `out_i = sum_j a_ij x_j`.
    pub fn pattern_apply(&mut self, a: Var, x: Var, p: Arc<Pattern>) -> Result<Var> {
        let (nc, d) = matrix_dims("pattern_apply", self.value(x))?;
        if nc != p.n_cols() || self.value(a).numel() != p.nnz() {
            return Err(Error::dim("pattern_apply", format!("x {:?} vs pattern {}x{}", self.shape(x), p.n_rows(), p.n_cols())));
        }
        let mut out = vec![T::zero(); p.n_rows() * d];
        pattern::apply(&p, self.value(a).data(), self.value(x).data(), d, &mut out);
        let t = Tensor::from_parts(vec![p.n_rows(), d], out);
        self.push("pattern_apply", t, Op::PatternApply { a, x, p, d }, &[a, x])
    }

    /// Columns gather from rows: `out_j = sum_i a_ij x_i`.
    pub fn pattern_apply_t(&mut self, a: Var, x: Var, p: Arc<Pattern>) -> Result<Var> {
        let (nr, d) = matrix_dims("pattern_apply_t", self.value(x))?;
        if nr != p.n_rows() || self.value(a).numel() != p.nnz() {
            return Err(Error::dim("pattern_apply_t", format!("x {:?} vs pattern {}x{}", self.shape(x), p.n_rows(), p.n_cols())));
        }
        let rows_of = p.entry_rows();
        let mut out = vec![T::zero(); p.n_cols() * d];
        pattern::apply_t(&p, self.value(a).data(), self.value(x).data(), d, &mut out, &rows_of);
        let t = Tensor::from_parts(vec![p.n_cols(), d], out);
        self.push("pattern_apply_t", t, Op::PatternApplyT { a, x, p, d }, &[a, x])
    }

    /// Mean negative log-likelihood over entries whose target is `Some`.
    /// An all-ignored batch yields zero with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<Option<usize>>>) -> Result<Var> {
        let (n, c) = matrix_dims("cross_entropy", self.value(logits))?;
        if targets.len() != n || targets.iter().flatten().any(|&t| t >= c) {
            return Err(Error::dim("cross_entropy", "targets do not match logits"));
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), n, c, None);
        let lg = self.value(logits).data();
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = &lg[i * c..(i + 1) * c];
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = mx + row.iter().map(|v| (*v - mx).exp()).sum::<T>().ln();
                total += lse - row[*t];
                count += 1;
            }
        }
        let loss = if count == 0 { T::zero() } else { total / T::from_usize(count).unwrap() };
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets, probs, count },
            &[logits],
        )
    }

    /// A primitive with a caller-supplied forward value and VJP.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, vjp: CustomVjp<T>) -> Result<Var> {
        self.push("custom", value, Op::Custom { inputs: inputs.to_vec(), vjp }, inputs)
    }

    /// Consumes the tape and returns `d loss / d v` for every variable that
    /// requires a gradient.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.vjp(i, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn vjp(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, n, k, m } => {
                if self.needs(*a) {
                    self.acc(grads, *a, kernels::matmul_nt(g, val(*b), *n, *m, *k));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, kernels::matmul_tn(val(*a), g, *n, *k, *m));
                }
            }
            Op::Transpose { a, n, m } => self.acc(grads, *a, kernels::transpose(g, *m, *n)),
            Op::Add { a, b } => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|v| -*v).collect());
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                if self.needs(*a) {
                    self.acc(grads, *a, g.iter().zip(vb).map(|(g, y)| *g * *y).collect());
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.iter().zip(va).map(|(g, x)| *g * *x).collect());
                }
            }
            Op::Div { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                if self.needs(*a) {
                    self.acc(grads, *a, g.iter().zip(vb).map(|(g, y)| *g / *y).collect());
                }
                if self.needs(*b) {
                    let d = g.iter().zip(va.iter().zip(vb)).map(|(g, (x, y))| -*g * *x / (*y * *y)).collect();
                    self.acc(grads, *b, d);
                }
            }
            Op::AddRow { x, b } => {
                self.acc(grads, *x, g.to_vec());
                if self.needs(*b) {
                    let c = self.nodes[b.0].value.numel();
                    let mut db = vec![T::zero(); c];
                    for r in g.chunks(c) {
                        db.iter_mut().zip(r).for_each(|(d, v)| *d += *v);
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::Affine { x, scale } => self.acc(grads, *x, g.iter().map(|v| *v * *scale).collect()),
            Op::ScaleVar { x, s } => {
                let sv = val(*s)[0];
                if self.needs(*x) {
                    self.acc(grads, *x, g.iter().map(|v| *v * sv).collect());
                }
                if self.needs(*s) {
                    self.acc(grads, *s, vec![kernels::dot(g, val(*x))]);
                }
            }
            Op::Exp { x } => self.acc(grads, *x, g.iter().zip(out).map(|(g, y)| *g * *y).collect()),
            Op::Ln { x } => self.acc(grads, *x, g.iter().zip(val(*x)).map(|(g, v)| *g / *v).collect()),
            Op::Gelu { x } => {
                self.acc(grads, *x, g.iter().zip(val(*x)).map(|(g, v)| *g * kernels::gelu_grad(*v)).collect())
            }
            Op::Clamp { x, lo, hi } => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, v)| if *v < *lo || *v > *hi { T::zero() } else { *g })
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd, d } => {
                let (dx, dg, db) = kernels::layer_norm_backward(g, xhat, rstd, val(*gamma), *d);
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dg);
                self.acc(grads, *beta, db);
            }
            Op::SoftmaxRows { x, n, m } => self.acc(grads, *x, kernels::softmax_rows_backward(out, g, *n, *m)),
            Op::ColRenorm { x, n, m, sums } => {
                let mut colg = vec![T::zero(); *m];
                for e in 0..n * m {
                    colg[e % m] += g[e] * out[e];
                }
                let d = (0..n * m).map(|e| (g[e] - colg[e % m]) / sums[e % m]).collect();
                self.acc(grads, *x, d);
            }
            Op::Unfold { x, geom } => self.acc(grads, *x, kernels::fold_add(g, geom)),
            Op::GatherRows { x, idx, cols } => {
                if self.needs(*x) {
                    let mut d = vec![T::zero(); self.nodes[x.0].value.numel()];
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..*cols {
                            d[src * cols + c] += g[r * cols + c];
                        }
                    }
                    self.acc(grads, *x, d);
                }
            }
            Op::GatherTable { table, idx } => {
                let mut d = vec![T::zero(); self.nodes[table.0].value.numel()];
                for (e, &t) in idx.iter().enumerate() {
                    d[t] += g[e];
                }
                self.acc(grads, *table, d);
            }
            Op::ConcatCols { a, b, n, ca, cb } => {
                let w = ca + cb;
                let ga = (0..*n).flat_map(|i| g[i * w..i * w + ca].iter().copied()).collect();
                let gb = (0..*n).flat_map(|i| g[i * w + ca..(i + 1) * w].iter().copied()).collect();
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::SliceCols { x, start, len, n, c } => {
                let mut d = vec![T::zero(); n * c];
                for i in 0..*n {
                    d[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.acc(grads, *x, d);
            }
            Op::SliceRows { x, start, len, c } => {
                let mut d = vec![T::zero(); self.nodes[x.0].value.numel()];
                d[start * c..(start + len) * c].copy_from_slice(g);
                self.acc(grads, *x, d);
            }
            Op::Reshape { x } => self.acc(grads, *x, g.to_vec()),
            Op::SumAll { x } => {
                let n = self.nodes[x.0].value.numel();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::MeanRows { x, n, c } => {
                let inv = T::one() / T::from_usize(*n).unwrap();
                let d = (0..n * c).map(|e| g[e % c] * inv).collect();
                self.acc(grads, *x, d);
            }
            Op::PatternQk { rows, cols, bias, scale, p, d } => {
                let r = pattern::qk_backward(p, val(*rows), val(*cols), *d, p.bias_len(), val(*scale)[0], g);
                self.acc(grads, *rows, r.d_rows);
                self.acc(grads, *cols, r.d_cols);
                self.acc(grads, *bias, r.d_bias);
                self.acc(grads, *scale, vec![r.d_scale]);
            }
            Op::PatternSoftmax { x, p } => self.acc(grads, *x, pattern::softmax_rows_backward(p, out, g)),
            Op::PatternColRenorm { x, p, denom } => {
                self.acc(grads, *x, pattern::col_renorm_backward(p, out, denom, g))
            }
            Op::PatternApply { a, x, p, d } => {
                let (da, dx) = pattern::apply_backward(p, val(*a), val(*x), *d, g);
                self.acc(grads, *a, da);
                self.acc(grads, *x, dx);
            }
            Op::PatternApplyT { a, x, p, d } => {
                let (da, dx) = pattern::apply_t_backward(p, val(*a), val(*x), *d, g);
                self.acc(grads, *a, da);
                self.acc(grads, *x, dx);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let c = self.nodes[logits.0].value.cols();
                let mut d = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let w = g[0] / T::from_usize(*count).unwrap();
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            for j in 0..c {
                                d[r * c + j] = probs[r * c + j] * w;
                            }
                            d[r * c + t] -= w;
                        }
                    }
                }
                self.acc(grads, *logits, d);
            }
            Op::Custom { inputs, vjp } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let parts = vjp(&vals, &self.nodes[i].value, g);
                for (v, d) in inputs.iter().zip(parts) {
                    self.acc(grads, *v, d);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 0., 9.]).unwrap()).unwrap();
        let s = t.sum_all(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 6]);
    }

    #[test]
    fn half_square_gives_identity() {
        let mut t = Tape::<f64>::new();
        let data = vec![0.3, -1.2, 4.0];
        let x = t.param(Tensor::new(vec![3], data.clone()).unwrap()).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum_all(sq).unwrap();
        let l = t.scale(s, 0.5).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).data(), &data[..]);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::scalar(2.0)).unwrap();
        let a = t.scale(x, 3.0).unwrap();
        let b = t.add(a, x).unwrap();
        let g = t.backward(b).unwrap();
        assert_eq!(g.wrt(x).data(), &[4.0]);
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(t.exp(x), Err(Error::Numeric { op: "exp" })));
    }

    #[test]
    fn inference_tape_keeps_no_backward_state() {
        let mut t = Tape::<f64>::inference();
        let x = t.param(Tensor::scalar(2.0)).unwrap();
        let y = t.mul(x, x).unwrap();
        assert!(!t.requires_grad(y));
        let g = t.backward(y).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn all_ignored_cross_entropy_is_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
        let l = t.cross_entropy(x, Arc::new(vec![None, None])).unwrap();
        assert_eq!(t.value(l).data(), &[0.0]);
        let g = t.backward(l).unwrap();
        assert!(g.wrt(x).data().iter().all(|v| *v == 0.0));
    }
}
