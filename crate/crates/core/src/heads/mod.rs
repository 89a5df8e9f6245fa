//! Heads that read predictions off the final tokens and the assignment chain.

pub mod panoptic;
pub mod semantic;
pub mod zero_shot;

pub use panoptic::{panoptic_candidates, panoptic_merge, PanopticHead, PanopticMap, PanopticVars, THING_THRESHOLD};
pub use semantic::{semantic_segment, SemanticHead, SemanticVars};
pub use zero_shot::{zero_shot_segment, ClassEmbeddingSet, ZeroShotHead, ZeroShotMap};

use crate::error::{Error, Result};
use crate::grouping::AssignLink;
use crate::numerics::{Bound, Real, Var};

/// Hidden width of the head MLPs for the named variants.
pub const HEAD_HIDDEN: usize = 512;

/// Lifts rows living at `stage` down to the stage-1 grid through the
/// recorded links.
pub fn lift_to_patches<T: Real>(g: &mut Bound<T>, links: &[AssignLink], x: Var, stage: usize) -> Result<Var> {
    lift(g, links, x, stage, 1)
}

pub fn lift<T: Real>(g: &mut Bound<T>, links: &[AssignLink], mut x: Var, from: usize, to: usize) -> Result<Var> {
    if to == 0 || from < to || from > links.len() + 1 {
        return Err(Error::Usage(format!("cannot lift stage {from} to stage {to} with {} links", links.len())));
    }
    for link in (to - 1..from - 1).rev() {
        x = links[link].upsample(g, x)?;
    }
    Ok(x)
}
