//! Content-aware downsampling: output tokens start as a strided convolution
//! of the input and are refined by iterated cross-attention in which every
//! input token distributes itself over the output tokens near its parent.

pub mod mask;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::numerics::nn::{Conv2d, LayerNorm, Linear, Mlp};
use crate::numerics::{Bound, Init, ParamId, ParamStore, Pattern, Real, Tensor, Var};

pub use mask::{build_dense_mask, build_local_mask, dense_bias_len, GroupingMode, LocalityMask, LOCAL_BIAS_LEN};

/// Default floor added before column renormalization on the sparse path.
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Path {
    /// Dense matrices with an explicit mask.
    Reference,
    /// Only permitted entries are stored; `eps` may be zero.
    Sparse { eps: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupingConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub mlp_ratio: f64,
    pub iterations: usize,
    pub mode: GroupingMode,
    /// Largest output grid the dense bias table must cover.
    pub table: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct GroupingLayer {
    pub cfg: GroupingConfig,
    pub conv: Conv2d,
    pub ln_init: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub bias: ParamId,
    pub log_tau: ParamId,
    pub ln_update: LayerNorm,
    pub mlp: Mlp,
    pub ln_mlp: LayerNorm,
}

/// How assignment values are laid out on the tape.
#[derive(Clone, Debug)]
pub enum Layout {
    /// Row-major `[n_in, n_out]`.
    Dense,
    /// One value per pattern entry.
    Sparse(Arc<Pattern>),
}

/// Assignment matrices of one layer as tape variables.
#[derive(Clone, Debug)]
pub struct AssignLink {
    pub ups: Var,
    pub down: Var,
    pub layout: Layout,
    pub mode: GroupingMode,
    pub n_in: usize,
    pub n_out: usize,
}

impl AssignLink {
    /// `A x`: lift per-output rows to the input grid.
    pub fn upsample<T: Real>(&self, g: &mut Bound<T>, x: Var) -> Result<Var> {
        match &self.layout {
            Layout::Dense => g.tape.matmul(self.ups, x),
            Layout::Sparse(p) => g.tape.pattern_apply(self.ups, x, p.clone()),
        }
    }

    /// `A_downᵀ x`: pool input rows into outputs.
    pub fn downsample<T: Real>(&self, g: &mut Bound<T>, x: Var) -> Result<Var> {
        match &self.layout {
            Layout::Dense => {
                let t = g.tape.transpose(self.down)?;
                g.tape.matmul(t, x)
            }
            Layout::Sparse(p) => g.tape.pattern_apply_t(self.down, x, p.clone()),
        }
    }

    pub fn to_pair<T: Real>(&self, g: &Bound<T>, geometry: [usize; 4]) -> AssignmentPair<T> {
        AssignmentPair {
            mode: self.mode,
            layout: self.layout.clone(),
            ups: g.value(self.ups).data().to_vec(),
            down: g.value(self.down).data().to_vec(),
            h_in: geometry[0],
            w_in: geometry[1],
            h_out: geometry[2],
            w_out: geometry[3],
        }
    }
}

/// Row-stochastic `a_ups` and column-stochastic `a_down`, both `n_in × n_out`.
#[derive(Clone, Debug)]
pub struct AssignmentPair<T = f64> {
    pub mode: GroupingMode,
    pub layout: Layout,
    pub ups: Vec<T>,
    pub down: Vec<T>,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl<T: Real> AssignmentPair<T> {
    pub fn n_in(&self) -> usize {
        self.h_in * self.w_in
    }

    pub fn n_out(&self) -> usize {
        self.h_out * self.w_out
    }

    fn densify(&self, v: &[T]) -> Tensor<T> {
        let data = match &self.layout {
            Layout::Dense => v.to_vec(),
            Layout::Sparse(p) => p.to_dense(v),
        };
        Tensor::new(vec![self.n_in(), self.n_out()], data).expect("assignment geometry")
    }

    pub fn ups_dense(&self) -> Tensor<T> {
        self.densify(&self.ups)
    }

    pub fn down_dense(&self) -> Tensor<T> {
        self.densify(&self.down)
    }

    /// Largest `|row sum - 1|` of `a_ups`.
    pub fn ups_row_error(&self) -> f64 {
        self.ups_dense().row_sums().iter().map(|s| (s.as_f64() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Largest `|column sum - 1|` of `a_down`.
    pub fn down_col_error(&self) -> f64 {
        self.down_dense().col_sums().iter().map(|s| (s.as_f64() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Row entropies of `a_ups` in nats.
    pub fn ups_row_entropy(&self) -> Vec<f64> {
        let d = self.ups_dense();
        (0..d.rows())
            .map(|i| {
                d.row(i)
                    .iter()
                    .map(|p| p.as_f64())
                    .filter(|p| *p > 0.0)
                    .map(|p| -p * p.ln())
                    .sum()
            })
            .collect()
    }
}

impl GroupingLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: GroupingConfig) -> Self {
        let (d_in, d) = (cfg.d_in, cfg.d_out);
        let bias_len = match cfg.mode {
            GroupingMode::Local => LOCAL_BIAS_LEN,
            GroupingMode::Dense => dense_bias_len(cfg.table.0, cfg.table.1),
        };
        let hidden = ((d as f64) * cfg.mlp_ratio).round() as usize;
        GroupingLayer {
            cfg,
            conv: Conv2d::new(store, &format!("{name}.conv"), d_in, d, 3, 2, 1),
            ln_init: LayerNorm::new(store, &format!("{name}.ln_init"), d),
            q: Linear::new(store, &format!("{name}.q"), d, d, true),
            k: Linear::new(store, &format!("{name}.k"), d_in, d, true),
            v: Linear::new(store, &format!("{name}.v"), d_in, d, true),
            bias: store.add(format!("{name}.rel_bias"), [bias_len], Init::Zeros),
            log_tau: store.add(format!("{name}.log_tau"), [1], Init::Constant((1.0 / (d as f64).sqrt()).ln())),
            ln_update: LayerNorm::new(store, &format!("{name}.ln_update"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, hidden.max(1), d),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), d),
        }
    }

    pub fn mask(&self, h_in: usize, w_in: usize) -> Result<LocalityMask> {
        match self.cfg.mode {
            GroupingMode::Local => build_local_mask(h_in, w_in),
            GroupingMode::Dense => build_dense_mask(h_in, w_in, self.cfg.table.0, self.cfg.table.1),
        }
    }

    /// `LN(Conv(x))`, halving each side.
    pub fn init<T: Real>(&self, g: &mut Bound<T>, x_in: Var, h: usize, w: usize) -> Result<(Var, usize, usize)> {
        if self.cfg.mode == GroupingMode::Local && (h % 2 != 0 || w % 2 != 0) {
            return Err(Error::Geometry(format!("grouping input {h}x{w} has an odd side")));
        }
        let (y, ho, wo) = self.conv.forward(g, x_in, h, w)?;
        Ok((self.ln_init.forward(g, y)?, ho, wo))
    }

    fn operands<T: Real>(&self, g: &mut Bound<T>, x_in: Var) -> Result<Operands> {
        let k = self.k.forward(g, x_in)?;
        let v = self.v.forward(g, x_in)?;
        let s = g.param(self.log_tau)?;
        let tau = g.tape.exp(s)?;
        let bias = g.param(self.bias)?;
        Ok(Operands { k, v, tau, bias })
    }

    fn step<T: Real>(&self, g: &mut Bound<T>, ops: &Operands, x_out: Var, mask: &LocalityMask, path: Path) -> Result<(Var, AssignLink)> {
        let q = self.q.forward(g, x_out)?;
        let link = match path {
            Path::Reference => {
                let qt = g.tape.transpose(q)?;
                let kq = g.tape.matmul(ops.k, qt)?;
                let scaled = g.tape.scale_var(kq, ops.tau)?;
                let b = g.tape.gather_table(ops.bias, Arc::new(mask.dense_bias_index()), vec![mask.n_in(), mask.n_out()])?;
                let logits = g.tape.add(scaled, b)?;
                let ups = match mask.mode {
                    GroupingMode::Local => g.tape.softmax_rows_masked(logits, Some(&mask.dense_mask()))?,
                    GroupingMode::Dense => g.tape.softmax_rows(logits)?,
                };
                let down = g.tape.col_renorm(ups)?;
                AssignLink { ups, down, layout: Layout::Dense, mode: mask.mode, n_in: mask.n_in(), n_out: mask.n_out() }
            }
            Path::Sparse { eps } => {
                let p = mask.pattern().clone();
                let logits = g.tape.pattern_qk(ops.k, q, ops.bias, ops.tau, p.clone())?;
                let ups = g.tape.pattern_softmax(logits, p.clone())?;
                let down = g.tape.pattern_col_renorm(ups, p.clone(), T::lit(eps))?;
                AssignLink { ups, down, layout: Layout::Sparse(p), mode: mask.mode, n_in: mask.n_in(), n_out: mask.n_out() }
            }
        };
        let upd = link.downsample(g, ops.v)?;
        let upd = self.ln_update.forward(g, upd)?;
        let x = g.tape.add(x_out, upd)?;
        let m = self.mlp.forward(g, x)?;
        let m = self.ln_mlp.forward(g, m)?;
        let x = g.tape.add(x, m)?;
        Ok((x, link))
    }

    /// One attention refinement of `x_out` against `x_in`.
    pub fn iteration<T: Real>(&self, g: &mut Bound<T>, x_in: Var, x_out: Var, mask: &LocalityMask, path: Path) -> Result<(Var, AssignLink)> {
        self.check_counts(g, x_in, x_out, mask)?;
        let ops = self.operands(g, x_in)?;
        self.step(g, &ops, x_out, mask, path)
    }

    fn check_counts<T: Real>(&self, g: &Bound<T>, x_in: Var, x_out: Var, mask: &LocalityMask) -> Result<()> {
        let (ni, no) = (g.tape.shape(x_in)[0], g.tape.shape(x_out)[0]);
        if ni != mask.n_in() || no != mask.n_out() {
            return Err(Error::Geometry(format!("{ni} inputs and {no} outputs do not fit mask {}x{}", mask.n_in(), mask.n_out())));
        }
        Ok(())
    }

    /// Initialization followed by all iterations. The returned link is the
    /// final iteration's.
    pub fn forward<T: Real>(&self, g: &mut Bound<T>, x_in: Var, h: usize, w: usize, path: Path) -> Result<GroupingOut> {
        if self.cfg.iterations == 0 {
            return Err(Error::Config("grouping needs at least one iteration".into()));
        }
        let mask = self.mask(h, w)?;
        let (mut x, h_out, w_out) = self.init(g, x_in, h, w)?;
        self.check_counts(g, x_in, x, &mask)?;
        let ops = self.operands(g, x_in)?;
        let mut last = None;
        for _ in 0..self.cfg.iterations {
            let (nx, link) = self.step(g, &ops, x, &mask, path)?;
            x = nx;
            last = Some(link);
        }
        Ok(GroupingOut { x, h_out, w_out, link: last.expect("at least one iteration") })
    }
}

struct Operands {
    k: Var,
    v: Var,
    tau: Var,
    bias: Var,
}

pub struct GroupingOut {
    pub x: Var,
    pub h_out: usize,
    pub w_out: usize,
    pub link: AssignLink,
}

pub fn grouping_init<T: Real>(layer: &GroupingLayer, store: &ParamStore, x: &TokenGrid<T>) -> Result<TokenGrid<T>> {
    let mut g = Bound::<T>::inference(store);
    let xv = g.input(x.tokens.clone())?;
    let (y, h, w) = layer.init(&mut g, xv, x.h, x.w)?;
    TokenGrid::from_tensor(h, w, g.value(y).clone())
}

pub fn grouping_iteration<T: Real>(
    layer: &GroupingLayer,
    store: &ParamStore,
    x_in: &TokenGrid<T>,
    x_out: &TokenGrid<T>,
    mask: &LocalityMask,
    path: Path,
) -> Result<(TokenGrid<T>, AssignmentPair<T>)> {
    let mut g = Bound::<T>::inference(store);
    let xi = g.input(x_in.tokens.clone())?;
    let xo = g.input(x_out.tokens.clone())?;
    let (y, link) = layer.iteration(&mut g, xi, xo, mask, path)?;
    let pair = link.to_pair(&g, [mask.h_in, mask.w_in, mask.h_out, mask.w_out]);
    Ok((TokenGrid::from_tensor(mask.h_out, mask.w_out, g.value(y).clone())?, pair))
}

pub fn grouping_forward<T: Real>(
    layer: &GroupingLayer,
    store: &ParamStore,
    x: &TokenGrid<T>,
    path: Path,
) -> Result<(TokenGrid<T>, AssignmentPair<T>)> {
    let mut g = Bound::<T>::inference(store);
    let xv = g.input(x.tokens.clone())?;
    let out = layer.forward(&mut g, xv, x.h, x.w, path)?;
    let pair = out.link.to_pair(&g, [x.h, x.w, out.h_out, out.w_out]);
    Ok((TokenGrid::from_tensor(out.h_out, out.w_out, g.value(out.x).clone())?, pair))
}
