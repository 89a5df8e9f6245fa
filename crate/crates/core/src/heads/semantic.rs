use crate::assignment::{compose_ups, upsample_features};
use crate::backbone::{BackboneOutput, BackboneVars};
use crate::error::{Error, Result};
use crate::numerics::nn::Mlp;
use crate::numerics::{Bound, ParamStore, Real, Tensor, Var};

use super::lift;

/// Main classifier on final tokens plus an auxiliary classifier on the
/// penultimate stage, both lifted to the stride-4 patch grid.
#[derive(Clone, Debug)]
pub struct SemanticHead {
    pub main: Mlp,
    pub aux: Mlp,
    pub n_classes: usize,
}

#[derive(Clone, Debug)]
pub struct SemanticVars {
    /// `[N1, C]` logits from the final block.
    pub logits: Var,
    /// One `[N1, C]` logit map per stage-4 block, ending with `logits`.
    pub deep: Vec<Var>,
    pub aux: Var,
}

impl SemanticHead {
    pub fn new(store: &mut ParamStore, name: &str, d3: usize, d4: usize, hidden: usize, n_classes: usize) -> Self {
        SemanticHead {
            main: Mlp::new(store, &format!("{name}.main"), d4, hidden, n_classes),
            aux: Mlp::new(store, &format!("{name}.aux"), d3 + d4, hidden, n_classes),
            n_classes,
        }
    }

    /// `[N4, C]` logits for one set of stage-4 tokens.
    pub fn token_logits<T: Real>(&self, g: &mut Bound<T>, x4: Var) -> Result<Var> {
        self.main.forward(g, x4)
    }

    pub fn patch_logits<T: Real>(&self, g: &mut Bound<T>, vars: &BackboneVars, x4: Var) -> Result<Var> {
        let t = self.token_logits(g, x4)?;
        lift(g, &vars.links, t, 4, 1)
    }

    /// Stage-3 tokens concatenated with the lifted final tokens.
    pub fn aux_logits<T: Real>(&self, g: &mut Bound<T>, vars: &BackboneVars) -> Result<Var> {
        let up = lift(g, &vars.links, vars.stages[3], 4, 3)?;
        let x = g.tape.concat_cols(vars.stages[2], up)?;
        let t = self.aux.forward(g, x)?;
        lift(g, &vars.links, t, 3, 1)
    }

    pub fn forward<T: Real>(&self, g: &mut Bound<T>, vars: &BackboneVars) -> Result<SemanticVars> {
        let deep = vars.stage4_blocks.iter().map(|&x| self.patch_logits(g, vars, x)).collect::<Result<Vec<_>>>()?;
        let logits = *deep.last().ok_or_else(|| Error::Usage("backbone has no stage-4 blocks".into()))?;
        let aux = self.aux_logits(g, vars)?;
        Ok(SemanticVars { logits, deep, aux })
    }
}

/// Per-patch class logits at stride 4 from stage-4 tokens and the chain.
pub fn semantic_segment(head: &SemanticHead, store: &ParamStore, out: &BackboneOutput) -> Result<Tensor<f64>> {
    if out.chain.stages() < 4 || out.stage_tokens.len() < 4 {
        return Err(Error::Usage("semantic_segment needs a complete four-stage chain".into()));
    }
    let mut g = Bound::<f64>::inference(store);
    let x = g.input(out.stage_tokens[3].tokens.clone())?;
    let t = head.token_logits(&mut g, x)?;
    upsample_features(&compose_ups(&out.chain, 4, 1)?, g.value(t))
}
