use std::sync::Arc;

use crate::error::{Error, Result};
use crate::heads::{PanopticVars, SemanticVars};
use crate::numerics::{nn, ops, Bound, Real, Tensor, Var};

use super::hungarian::{hungarian, Matching};

/// Probabilities are clamped to `[MASK_EPS, 1 - MASK_EPS]` inside the BCE.
pub const MASK_EPS: f64 = 1e-6;
pub const AUX_WEIGHT: f64 = 0.4;

/// Mean NLL over non-ignored rows.
pub fn cross_entropy<T: Real>(g: &mut Bound<T>, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    g.tape.cross_entropy(logits, Arc::new(targets.to_vec()))
}

/// Per-pixel BCE plus Dice with +1 smoothing, equal weights. `pred` holds
/// probabilities in any shape with `gt.len()` entries.
pub fn mask_loss<T: Real>(g: &mut Bound<T>, pred: Var, gt: &[f64]) -> Result<Var> {
    let n = g.tape.value(pred).numel();
    if n != gt.len() || n == 0 {
        return Err(Error::dim("mask_loss", format!("{n} predictions vs {} targets", gt.len())));
    }
    let p = g.tape.reshape(pred, vec![n])?;
    let pc = g.tape.clamp(p, T::lit(MASK_EPS), T::lit(1.0 - MASK_EPS))?;
    let lp = g.tape.ln(pc)?;
    let q = g.tape.affine(pc, -T::one(), T::one())?;
    let lq = g.tape.ln(q)?;
    let gt_t: Vec<T> = gt.iter().map(|v| T::lit(*v)).collect();
    let inv: Vec<T> = gt.iter().map(|v| T::lit(1.0 - v)).collect();
    let a = nn::weighted_sum(g, lp, Arc::new(gt_t.clone()))?;
    let b = nn::weighted_sum(g, lq, Arc::new(inv))?;
    let ll = g.tape.add(a, b)?;
    let bce = g.tape.scale(ll, T::lit(-1.0 / n as f64))?;
    let inter = nn::weighted_sum(g, p, Arc::new(gt_t))?;
    let sp = g.tape.sum_all(p)?;
    let sg: f64 = gt.iter().sum();
    let num = g.tape.affine(inter, T::lit(2.0), T::one())?;
    let den = g.tape.affine(sp, T::one(), T::lit(sg + 1.0))?;
    let ratio = g.tape.div(num, den)?;
    let dice = g.tape.affine(ratio, -T::one(), T::one())?;
    g.tape.add(bce, dice)
}

/// Value-level twin of [`mask_loss`] used to fill matching costs.
pub fn mask_loss_value(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let mut ll = 0.0;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(gt) {
        let pc = p.clamp(MASK_EPS, 1.0 - MASK_EPS);
        ll += t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        inter += p * t;
        sp += p;
        sg += t;
    }
    -ll / n + 1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0)
}

/// One ground-truth instance on the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GtInstance {
    /// Thing-class index (not the semantic label).
    pub thing: usize,
    /// Soft coverage per patch in `[0, 1]`.
    pub mask: Vec<f64>,
}

/// Class NLL plus mask loss for every (prediction, instance) pair.
pub fn matching_cost(class_logits: &Tensor<f64>, masks: &Tensor<f64>, gt: &[GtInstance]) -> Result<Tensor<f64>> {
    let k = class_logits.rows();
    if masks.cols() != k {
        return Err(Error::dim("matching_cost", format!("{k} predictions vs {} masks", masks.cols())));
    }
    let probs = ops::softmax_rows(class_logits)?;
    let mt = masks.transpose2();
    let mut cost = Vec::with_capacity(k * gt.len());
    for i in 0..k {
        for inst in gt {
            if inst.mask.len() != masks.rows() || inst.thing + 1 >= class_logits.cols() {
                return Err(Error::dim("matching_cost", "instance does not fit the predictions"));
            }
            cost.push(-probs.get2(i, inst.thing).max(f64::MIN_POSITIVE).ln() + mask_loss_value(mt.row(i), &inst.mask));
        }
    }
    Tensor::new(vec![k, gt.len()], cost)
}

/// Sums scalar terms in ascending value order, so the result depends only on
/// the multiset of term values.
pub fn canonical_sum<T: Real>(g: &mut Bound<T>, mut terms: Vec<Var>) -> Result<Var> {
    if terms.is_empty() {
        return g.tape.constant(Tensor::scalar(T::zero()));
    }
    terms.sort_by(|a, b| g.value(*a).data()[0].as_f64().total_cmp(&g.value(*b).data()[0].as_f64()));
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Bipartite-matched loss for one set of predictions, divided by the
/// prediction count. Unmatched predictions are pushed toward no-object.
pub fn panoptic_loss<T: Real>(g: &mut Bound<T>, out: &PanopticVars, gt: &[GtInstance]) -> Result<(Var, Matching)> {
    let logits_v = g.value(out.class_logits).cast::<f64>();
    let masks_v = g.value(out.masks).cast::<f64>();
    let (k, c) = (logits_v.rows(), logits_v.cols());
    let matching = hungarian(&matching_cost(&logits_v, &masks_v, gt)?)?;
    let gt_of = matching.gt_of(k);
    let mut terms = Vec::with_capacity(k);
    for (i, m) in gt_of.iter().enumerate() {
        let row = g.tape.slice_rows(out.class_logits, i, 1)?;
        let target = m.map_or(c - 1, |j| gt[j].thing);
        let ce = cross_entropy(g, row, &[Some(target)])?;
        let term = match m {
            Some(j) => {
                let col = g.tape.slice_cols(out.masks, i, 1)?;
                let ml = mask_loss(g, col, &gt[*j].mask)?;
                g.tape.add(ce, ml)?
            }
            None => ce,
        };
        terms.push(term);
    }
    let s = canonical_sum(g, terms)?;
    Ok((g.tape.scale(s, T::lit(1.0 / k as f64))?, matching))
}

/// Deep supervision: mean of [`panoptic_loss`] over all stage-4 outputs.
pub fn panoptic_training_loss<T: Real>(g: &mut Bound<T>, outs: &[PanopticVars], gt: &[GtInstance]) -> Result<Var> {
    mean_of(g, outs, |g, o| panoptic_loss(g, o, gt).map(|(l, _)| l))
}

/// Mean CE over the stage-4 outputs plus `aux_weight` times the auxiliary CE.
pub fn semantic_loss<T: Real>(g: &mut Bound<T>, sv: &SemanticVars, targets: &[Option<usize>], aux_weight: f64) -> Result<Var> {
    let main = mean_of(g, &sv.deep, |g, &l| cross_entropy(g, l, targets))?;
    if aux_weight == 0.0 {
        return Ok(main);
    }
    let aux = cross_entropy(g, sv.aux, targets)?;
    let aux = g.tape.scale(aux, T::lit(aux_weight))?;
    g.tape.add(main, aux)
}

fn mean_of<T: Real, X>(g: &mut Bound<T>, xs: &[X], mut f: impl FnMut(&mut Bound<T>, &X) -> Result<Var>) -> Result<Var> {
    if xs.is_empty() {
        return Err(Error::Usage("no outputs to supervise".into()));
    }
    let mut acc = f(g, &xs[0])?;
    for x in &xs[1..] {
        let l = f(g, x)?;
        acc = g.tape.add(acc, l)?;
    }
    g.tape.scale(acc, T::lit(1.0 / xs.len() as f64))
}
