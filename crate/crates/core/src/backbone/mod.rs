//! Four-stage hierarchical encoder joined by grouping layers.

pub mod block;
pub mod config;

use std::sync::Arc;

use crate::assignment::AssignmentChain;
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::grouping::{AssignLink, AssignmentPair, GroupingConfig, GroupingLayer, GroupingMode, Layout, Path, DEFAULT_EPS};
use crate::numerics::nn::{Conv2d, LayerNorm, Linear};
use crate::numerics::{pattern, Bound, ParamStore, Pattern, Real, Tensor, Var};

pub use block::{neighborhood_pattern, EncoderBlock};
pub use config::{BackboneConfig, GroupingKind, StageConfig};

pub const PATCH: usize = 4;

/// Downsampler between two stages.
#[derive(Clone, Debug)]
pub enum Downsample {
    Group(GroupingLayer),
    /// 3×3 stride-2 convolution + LN; its link is a fixed bilinear map.
    Conv { conv: Conv2d, ln: LayerNorm },
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch: Conv2d,
    pub patch_ln: LayerNorm,
    pub blocks: Vec<Vec<EncoderBlock>>,
    pub downs: Vec<Downsample>,
    pub head: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    /// Execution path for local grouping layers.
    pub path: Path,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { path: Path::Sparse { eps: DEFAULT_EPS } }
    }
}

/// Tape handles produced by [`Backbone::forward`].
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub stages: Vec<Var>,
    pub grids: Vec<(usize, usize)>,
    pub links: Vec<AssignLink>,
    /// Output of every stage-4 block, last one equal to `stages[3]`.
    pub stage4_blocks: Vec<Var>,
    pub pooled: Var,
}

/// Plain values of a forward pass.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub stage_tokens: Vec<TokenGrid<f64>>,
    pub chain: AssignmentChain,
    pub pooled: Tensor<f64>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let d1 = cfg.stages[0].dim;
        let patch = Conv2d::new(store, "patch_embed.conv", cfg.in_chans, d1, PATCH, PATCH, 0);
        let patch_ln = LayerNorm::new(store, "patch_embed.ln", d1);
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        let final_side = cfg.image_size / 32;
        for (s, st) in cfg.stages.iter().enumerate() {
            let stage: Vec<EncoderBlock> = (0..st.depth)
                .map(|b| EncoderBlock::new(store, &format!("stage{}.block{b}", s + 1), st.dim, st.heads(), st.attn_window, st.mlp_ratio))
                .collect();
            blocks.push(stage);
            if s < 3 {
                let name = format!("group{}", s + 1);
                let next = cfg.stages[s + 1];
                let down = match cfg.grouping[s] {
                    GroupingKind::Off => Downsample::Conv {
                        conv: Conv2d::new(store, &format!("{name}.conv"), st.dim, next.dim, 3, 2, 1),
                        ln: LayerNorm::new(store, &format!("{name}.ln"), next.dim),
                    },
                    kind => {
                        let mode = if kind == GroupingKind::Dense { GroupingMode::Dense } else { GroupingMode::Local };
                        let side = final_side << (2 - s);
                        let gc = GroupingConfig {
                            d_in: st.dim,
                            d_out: next.dim,
                            mlp_ratio: next.mlp_ratio,
                            iterations: cfg.iterations,
                            mode,
                            table: (side, side),
                        };
                        Downsample::Group(GroupingLayer::new(store, &name, gc))
                    }
                };
                downs.push(down);
            }
        }
        let head = Linear::new(store, "head", cfg.stages[3].dim, cfg.num_classes.max(1), true);
        Ok(Backbone { cfg: cfg.clone(), patch, patch_ln, blocks, downs, head })
    }

    pub fn check_image(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("image {h}x{w} must have sides divisible by 32")));
        }
        Ok(())
    }

    /// `[h*w, in_chans]` image to the stride-4 token grid.
    pub fn patch_embed<T: Real>(&self, g: &mut Bound<T>, image: Var, h: usize, w: usize) -> Result<(Var, usize, usize)> {
        self.check_image(h, w)?;
        let (y, ho, wo) = self.patch.forward(g, image, h, w)?;
        Ok((self.patch_ln.forward(g, y)?, ho, wo))
    }

    pub fn forward<T: Real>(&self, g: &mut Bound<T>, image: Var, h: usize, w: usize, opts: &ForwardOptions) -> Result<BackboneVars> {
        let (mut x, mut gh, mut gw) = self.patch_embed(g, image, h, w)?;
        let mut stages = Vec::new();
        let mut grids = Vec::new();
        let mut links = Vec::new();
        let mut stage4_blocks = Vec::new();
        for s in 0..4 {
            let pat = Arc::new(neighborhood_pattern(gh, gw, self.cfg.stages[s].attn_window)?);
            for blk in &self.blocks[s] {
                x = blk.forward(g, x, &pat)?;
                if s == 3 {
                    stage4_blocks.push(x);
                }
            }
            stages.push(x);
            grids.push((gh, gw));
            if s < 3 {
                let (nx, link, nh, nw) = match &self.downs[s] {
                    Downsample::Group(layer) => {
                        let out = layer.forward(g, x, gh, gw, opts.path)?;
                        (out.x, out.link, out.h_out, out.w_out)
                    }
                    Downsample::Conv { conv, ln } => {
                        let (y, nh, nw) = conv.forward(g, x, gh, gw)?;
                        let y = ln.forward(g, y)?;
                        (y, bilinear_link(g, gh, gw, nh, nw)?, nh, nw)
                    }
                };
                links.push(link);
                x = nx;
                gh = nh;
                gw = nw;
            }
        }
        let pooled = g.tape.mean_rows(x)?;
        Ok(BackboneVars { stages, grids, links, stage4_blocks, pooled })
    }

    /// Linear classifier over mean-pooled final tokens, `[1, classes]`.
    pub fn classification_logits<T: Real>(&self, g: &mut Bound<T>, pooled: Var) -> Result<Var> {
        self.head.forward(g, pooled)
    }

    /// Plain-value chain of the three links recorded in `vars`.
    pub fn chain<T: Real>(&self, g: &Bound<T>, vars: &BackboneVars) -> Result<AssignmentChain> {
        let links = vars
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (hi, wi) = vars.grids[i];
                let (ho, wo) = vars.grids[i + 1];
                let p = l.to_pair(g, [hi, wi, ho, wo]);
                AssignmentPair {
                    mode: p.mode,
                    layout: p.layout,
                    ups: p.ups.iter().map(|v| v.as_f64()).collect(),
                    down: p.down.iter().map(|v| v.as_f64()).collect(),
                    h_in: p.h_in,
                    w_in: p.w_in,
                    h_out: p.h_out,
                    w_out: p.w_out,
                }
            })
            .collect();
        AssignmentChain::new(links)
    }

    pub fn output<T: Real>(&self, g: &Bound<T>, vars: &BackboneVars) -> Result<BackboneOutput> {
        let stage_tokens = vars
            .stages
            .iter()
            .zip(&vars.grids)
            .map(|(v, &(h, w))| TokenGrid::from_tensor(h, w, g.value(*v).cast()))
            .collect::<Result<Vec<_>>>()?;
        let pooled = g.value(vars.pooled).cast();
        let d = pooled.numel();
        Ok(BackboneOutput { stage_tokens, chain: self.chain(g, vars)?, pooled: pooled.reshape(vec![d])? })
    }
}

fn axis_weights(p: usize, n_out: usize) -> Vec<(usize, f64)> {
    let y = (p as f64 + 0.5) / 2.0 - 0.5;
    let y0 = y.floor();
    let t = y - y0;
    let clamp = |v: f64| (v.max(0.0) as usize).min(n_out - 1);
    let (a, b) = (clamp(y0), clamp(y0 + 1.0));
    if a == b {
        vec![(a, 1.0)]
    } else {
        vec![(a, 1.0 - t), (b, t)]
    }
}

/// Bilinear correspondence from a fine grid to its half-resolution grid.
pub fn bilinear_pattern(h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> Result<(Pattern, Vec<f64>)> {
    let mut rows = Vec::with_capacity(h_in * w_in);
    let mut vals = Vec::new();
    for r in 0..h_in {
        let wr = axis_weights(r, h_out);
        for c in 0..w_in {
            let wc = axis_weights(c, w_out);
            let mut row = Vec::new();
            for &(rr, a) in &wr {
                for &(cc, b) in &wc {
                    row.push((rr * w_out + cc, 0));
                    vals.push(a * b);
                }
            }
            rows.push(row);
        }
    }
    Ok((Pattern::from_rows(h_out * w_out, rows, 0)?, vals))
}

fn bilinear_link<T: Real>(g: &mut Bound<T>, h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> Result<AssignLink> {
    let (p, ups) = bilinear_pattern(h_in, w_in, h_out, w_out)?;
    let mut down = vec![0.0; p.nnz()];
    let mut denom = vec![0.0; p.n_cols()];
    pattern::col_renorm(&p, &ups, 0.0, &mut down, &mut denom)?;
    let n = p.nnz();
    let cast = |v: &[f64]| Tensor::new(vec![n], v.iter().map(|x| T::lit(*x)).collect());
    let ups_v = g.tape.constant(cast(&ups)?)?;
    let down_v = g.tape.constant(cast(&down)?)?;
    Ok(AssignLink {
        ups: ups_v,
        down: down_v,
        layout: Layout::Sparse(Arc::new(p)),
        mode: GroupingMode::Local,
        n_in: h_in * w_in,
        n_out: h_out * w_out,
    })
}

/// Runs the backbone on an `h × w` image, either `[h, w, c]` or `[h*w, c]`.
pub fn backbone_forward(model: &Backbone, store: &ParamStore, image: &Tensor<f64>, h: usize, w: usize, opts: &ForwardOptions) -> Result<BackboneOutput> {
    let c = model.cfg.in_chans;
    if image.numel() != h * w * c {
        return Err(Error::dim("backbone_forward", format!("image {:?} is not {h}x{w}x{c}", image.shape())));
    }
    let mut g = Bound::<f64>::inference(store);
    let x = g.input(image.clone().reshape(vec![h * w, c])?)?;
    let vars = model.forward(&mut g, x, h, w, opts)?;
    model.output(&g, &vars)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub breakdown: Vec<(String, usize)>,
}

/// Exact learnable-scalar count, without allocating parameter values.
pub fn count_params(cfg: &BackboneConfig) -> Result<ParamCount> {
    let mut store = ParamStore::shapes_only();
    Backbone::new(&mut store, cfg)?;
    Ok(ParamCount { total: store.num_scalars(), breakdown: store.breakdown() })
}
