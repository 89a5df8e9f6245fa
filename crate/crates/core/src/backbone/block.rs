//! Pre-norm transformer block with neighborhood self-attention: every token
//! attends to a fixed-size window clamped to lie inside the grid.

use std::sync::Arc;

use crate::error::Result;
use crate::numerics::nn::{LayerNorm, Linear, Mlp};
use crate::numerics::{Bound, Init, ParamId, ParamStore, Pattern, Real, Tensor, Var};

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub rel_bias: ParamId,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

/// Start of the window along one axis of length `n`.
fn window_start(p: usize, n: usize, win: usize) -> usize {
    if n <= win {
        0
    } else {
        p.saturating_sub(win / 2).min(n - win)
    }
}

/// Query-to-key pattern with relative-offset bias indices into a
/// `(2w-1)²` table.
pub fn neighborhood_pattern(h: usize, w: usize, window: usize) -> Result<Pattern> {
    let (wh, ww) = (window.min(h), window.min(w));
    let side = 2 * window - 1;
    let rows = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let (r0, c0) = (window_start(r, h, window), window_start(c, w, window));
            let mut row = Vec::with_capacity(wh * ww);
            for kr in r0..r0 + wh {
                for kc in c0..c0 + ww {
                    let b = (kr + window - 1 - r) * side + (kc + window - 1 - c);
                    row.push((kr * w + kc, b));
                }
            }
            row
        })
        .collect();
    Pattern::from_rows(h * w, rows, side * side)
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, window: usize, mlp_ratio: f64) -> Self {
        let hidden = ((dim as f64) * mlp_ratio).round() as usize;
        let side = 2 * window - 1;
        EncoderBlock {
            dim,
            heads,
            window,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true),
            rel_bias: store.add(format!("{name}.rel_bias"), [heads, side * side], Init::Zeros),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, hidden.max(1), dim),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Bound<T>, x: Var, pattern: &Arc<Pattern>) -> Result<Var> {
        let dh = self.dim / self.heads;
        let h = self.ln1.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let table = g.param(self.rel_bias)?;
        let scale = g.tape.constant(Tensor::scalar(T::one() / T::from_usize(dh).unwrap().sqrt()))?;
        let side = (2 * self.window - 1).pow(2);
        let mut heads_out: Option<Var> = None;
        for hd in 0..self.heads {
            let q = g.tape.slice_cols(qkv, hd * dh, dh)?;
            let k = g.tape.slice_cols(qkv, self.dim + hd * dh, dh)?;
            let v = g.tape.slice_cols(qkv, 2 * self.dim + hd * dh, dh)?;
            let b = g.tape.slice_rows(table, hd, 1)?;
            let b = g.tape.reshape(b, vec![side])?;
            let logits = g.tape.pattern_qk(q, k, b, scale, pattern.clone())?;
            let a = g.tape.pattern_softmax(logits, pattern.clone())?;
            let o = g.tape.pattern_apply(a, v, pattern.clone())?;
            heads_out = Some(match heads_out {
                None => o,
                Some(prev) => g.tape.concat_cols(prev, o)?,
            });
        }
        let attn = self.proj.forward(g, heads_out.expect("at least one head"))?;
        let x = g.tape.add(x, attn)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.tape.add(x, m)
    }
}
