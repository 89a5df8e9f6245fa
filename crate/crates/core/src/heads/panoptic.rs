use std::sync::Arc;

use crate::assignment::{argmax, column_mass, compose_ups, AssignmentChain};
use crate::backbone::{BackboneOutput, BackboneVars};
use crate::error::{Error, Result};
use crate::numerics::nn::{Linear, Mlp};
use crate::numerics::{ops, Bound, ParamStore, Real, Tensor, Var};

use super::lift;

pub const K_CANDIDATES: usize = 100;
/// Minimum thing-class probability for a candidate to claim pixels.
pub const THING_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct PanopticHead {
    pub thing_mlp: Mlp,
    pub refine_proj: Linear,
    pub k_candidates: usize,
    pub n_thing: usize,
}

#[derive(Clone, Debug)]
pub struct PanopticVars {
    /// `[K, n_thing + 1]`; the last column is no-object.
    pub class_logits: Var,
    /// `[N3, K]`, rows sum to one.
    pub masks3: Var,
    /// `[N1, K]` masks lifted to the patch grid.
    pub masks: Var,
}

/// Final-stage tokens ordered by total patch mass, ties toward the lower
/// index, truncated to `k`.
pub fn panoptic_candidates(chain: &AssignmentChain, k: usize) -> Result<Vec<usize>> {
    let mass = column_mass(chain, chain.stages())?;
    Ok(rank_by_mass(&mass, k))
}

pub fn rank_by_mass(mass: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..mass.len()).collect();
    idx.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    idx.truncate(k.min(mass.len()));
    idx
}

impl PanopticHead {
    pub fn new(store: &mut ParamStore, name: &str, d3: usize, d4: usize, hidden: usize, n_thing: usize, k_candidates: usize) -> Self {
        PanopticHead {
            thing_mlp: Mlp::new(store, &format!("{name}.thing_mlp"), d4, hidden, n_thing + 1),
            refine_proj: Linear::new(store, &format!("{name}.refine_proj"), d4, d3, true),
            k_candidates,
            n_thing,
        }
    }

    /// Class logits and refined masks for `cands` drawn from stage-4 tokens `x4`.
    pub fn forward<T: Real>(&self, g: &mut Bound<T>, vars: &BackboneVars, cands: &[usize], x4: Var) -> Result<PanopticVars> {
        if cands.is_empty() {
            return Err(Error::Usage("panoptic head needs at least one candidate".into()));
        }
        let (class_logits, masks3) = self.refine(g, x4, vars.stages[2], cands, |g, x| lift(g, &vars.links, x, 4, 3))?;
        let masks = lift(g, &vars.links, masks3, 3, 1)?;
        Ok(PanopticVars { class_logits, masks3, masks })
    }

    /// One output per stage-4 block.
    pub fn forward_deep<T: Real>(&self, g: &mut Bound<T>, vars: &BackboneVars, cands: &[usize]) -> Result<Vec<PanopticVars>> {
        vars.stage4_blocks.iter().map(|&x| self.forward(g, vars, cands, x)).collect()
    }

    fn refine<T: Real>(
        &self,
        g: &mut Bound<T>,
        x4: Var,
        x3: Var,
        cands: &[usize],
        lift43: impl FnOnce(&mut Bound<T>, Var) -> Result<Var>,
    ) -> Result<(Var, Var)> {
        let e = g.tape.gather_rows(x4, Arc::new(cands.to_vec()))?;
        let class_logits = self.thing_mlp.forward(g, e)?;
        let ctx = self.refine_proj.forward(g, x4)?;
        let ctx = lift43(g, ctx)?;
        let feat = g.tape.add(x3, ctx)?;
        let ce = self.refine_proj.forward(g, e)?;
        let cet = g.tape.transpose(ce)?;
        let logits = g.tape.matmul(feat, cet)?;
        Ok((class_logits, g.tape.softmax_rows(logits)?))
    }
}

/// Value-level refinement: `(class_logits [K, n_thing+1], masks [N3, K])`.
pub fn panoptic_refine(head: &PanopticHead, store: &ParamStore, out: &BackboneOutput, cands: &[usize]) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if cands.is_empty() {
        return Err(Error::Usage("panoptic head needs at least one candidate".into()));
    }
    let a43 = compose_ups(&out.chain, 4, 3)?;
    let mut g = Bound::<f64>::inference(store);
    let x4 = g.input(out.stage_tokens[3].tokens.clone())?;
    let x3 = g.input(out.stage_tokens[2].tokens.clone())?;
    let (c, m) = head.refine(&mut g, x4, x3, cands, |g, x| {
        let a = g.tape.constant(a43)?;
        g.tape.matmul(a, x)
    })?;
    Ok((g.value(c).clone(), g.value(m).clone()))
}

/// Per-pixel `(class, instance)`; instance 0 means stuff or unclaimed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticMap {
    pub h: usize,
    pub w: usize,
    pub class: Vec<u16>,
    pub instance: Vec<u16>,
}

impl PanopticMap {
    pub fn n_instances(&self) -> usize {
        self.instance.iter().copied().max().unwrap_or(0) as usize
    }
}

/// Semantic argmax everywhere, then each pixel whose maximal-mask candidate
/// is a confident thing of the pixel's semantic class becomes that instance.
/// `thing_classes[t]` is the semantic label of thing class `t`.
pub fn panoptic_merge(sem_logits: &Tensor<f64>, masks: &Tensor<f64>, class_logits: &Tensor<f64>, thing_classes: &[usize], h: usize, w: usize) -> Result<PanopticMap> {
    let n = h * w;
    if sem_logits.rows() != n || masks.rows() != n || masks.cols() != class_logits.rows() {
        return Err(Error::dim("panoptic_merge", format!("{:?} / {:?} / {:?} for {h}x{w}", sem_logits.shape(), masks.shape(), class_logits.shape())));
    }
    if class_logits.cols() != thing_classes.len() + 1 {
        return Err(Error::dim("panoptic_merge", "class logits must cover every thing class plus no-object"));
    }
    let probs = ops::softmax_rows(class_logits)?;
    let k = masks.cols();
    let cand: Vec<Option<usize>> = (0..k)
        .map(|j| {
            let row = &probs.row(j)[..thing_classes.len()];
            if row.is_empty() {
                return None;
            }
            let t = argmax(row);
            (row[t] > THING_THRESHOLD).then_some(thing_classes[t])
        })
        .collect();
    let mut class = Vec::with_capacity(n);
    let mut owner = Vec::with_capacity(n);
    for i in 0..n {
        let s = argmax(sem_logits.row(i));
        class.push(s as u16);
        let j = argmax(masks.row(i));
        owner.push((cand[j] == Some(s)).then_some(j));
    }
    let mut ids = vec![0u16; k];
    let mut next = 0u16;
    for j in 0..k {
        if owner.contains(&Some(j)) {
            next += 1;
            ids[j] = next;
        }
    }
    let instance = owner.iter().map(|o| o.map_or(0, |j| ids[j])).collect();
    Ok(PanopticMap { h, w, class, instance })
}
