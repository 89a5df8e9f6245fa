//! Tape gradients against central differences, one entry per component.

use serde::Serialize;

use nsvt_core::backbone::ForwardOptions;
use nsvt_core::grouping::{GroupingConfig, GroupingLayer, GroupingMode, Path, DEFAULT_EPS};
use nsvt_core::heads::PanopticVars;
use nsvt_core::model::{Model, ModelConfig};
use nsvt_core::numerics::gradcheck::{check_inputs_with, check_params_with, probe, randomize};
use nsvt_core::numerics::{Bound, Init, ParamGrads, ParamStore, Rng, Tensor};
use nsvt_core::train::fit::sample_loss;
use nsvt_core::train::losses::cross_entropy;
use nsvt_core::train::{mask_loss, panoptic_loss, synth_dataset, Example, FitOptions, GtInstance, Task};
use nsvt_core::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Factor applied to every tape gradient by the corrupted control.
pub const CORRUPTION: f64 = 1.01;

#[derive(Clone, Debug, Serialize)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub corrupted: bool,
    pub components: Vec<ComponentCheck>,
    pub pass: bool,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Scale the tape gradients so every component must fail.
    pub corrupt: bool,
}

struct Ctx {
    opts: GradcheckOptions,
}

impl Ctx {
    fn adjust(&self) -> impl FnOnce(&mut ParamGrads) {
        let c = self.opts.corrupt;
        move |g| {
            if c {
                g.scale(CORRUPTION);
            }
        }
    }

    fn adjust_slice(&self) -> impl FnMut(&mut [f64]) {
        let c = self.opts.corrupt;
        move |g| {
            if c {
                g.iter_mut().for_each(|v| *v *= CORRUPTION);
            }
        }
    }
}

fn layer_check(ctx: &Ctx, mode: GroupingMode, side: usize, path: Path) -> Result<f64> {
    let mut s = ParamStore::new(ctx.opts.seed);
    let cfg = GroupingConfig { d_in: 2, d_out: 4, mlp_ratio: 2.0, iterations: 2, mode, table: (side / 2, side / 2) };
    let l = GroupingLayer::new(&mut s, "g", cfg);
    let mut rng = Rng::new(ctx.opts.seed ^ 0x51);
    randomize(&mut s, &mut rng, 0.5);
    let input = s.add("input", [side * side, 2], Init::Zeros);
    s.get_mut(input).data_mut().copy_from_slice(&rng.normal_vec(side * side * 2, 1.0));
    let r = check_params_with(
        &s,
        12,
        STEP,
        3,
        |g: &mut Bound<f64>| {
            let x = g.param(input)?;
            let out = l.forward(g, x, side, side, path)?;
            let a = probe(g, out.x, 1)?;
            let b = probe(g, out.link.ups, 2)?;
            let c = probe(g, out.link.down, 3)?;
            let ab = g.tape.add(a, b)?;
            g.tape.add(ab, c)
        },
        ctx.adjust(),
    )?;
    Ok(r.max_rel_err())
}

fn toy(ctx: &Ctx) -> Result<(Model, ParamStore, Example)> {
    let mut store = ParamStore::new(ctx.opts.seed);
    let cfg = ModelConfig::toy();
    let m = Model::new(&mut store, &cfg)?;
    randomize(&mut store, &mut Rng::new(ctx.opts.seed ^ 0x7a), 0.2);
    let ex = synth_dataset(ctx.opts.seed ^ 0x3c, 1, 64, 64, 3, cfg.semantic_classes, &cfg.thing_classes)?.remove(0);
    Ok((m, store, ex))
}

fn backbone_check(ctx: &Ctx, m: &Model, store: &ParamStore, ex: &Example) -> Result<f64> {
    let raw = |g: &mut Bound<f64>| -> Result<nsvt_core::numerics::Var> {
        let x = g.input(ex.image.clone())?;
        let v = m.backbone.forward(g, x, ex.h, ex.w, &ForwardOptions::default())?;
        let logits = m.backbone.classification_logits(g, v.pooled)?;
        let a = probe(g, logits, 1)?;
        let b = probe(g, v.stages[1], 2)?;
        let c = probe(g, v.links[2].ups, 3)?;
        let ab = g.tape.add(a, b)?;
        g.tape.add(ab, c)
    };
    // Normalized to unit value at the base point so that finite-difference
    // round-off on exactly-zero gradients stays far below the tolerance.
    let mut b0 = Bound::<f64>::inference(store);
    let l0 = raw(&mut b0)?;
    let f0 = b0.value(l0).data()[0].abs().max(1e-3);
    let r = check_params_with(
        store,
        2,
        STEP,
        2,
        |g| {
            let l = raw(g)?;
            g.tape.scale(l, 1.0 / f0)
        },
        ctx.adjust(),
    )?;
    Ok(r.max_rel_err())
}

fn task_check(ctx: &Ctx, m: &Model, store: &ParamStore, ex: &Example, task: Task) -> Result<f64> {
    let opts = FitOptions::default();
    let r = check_params_with(store, 1, STEP, 4, |g| sample_loss(m, g, ex, task, &opts).map(|p| p.0), ctx.adjust())?;
    Ok(r.max_rel_err())
}

fn loss_checks(ctx: &Ctx) -> Result<Vec<(String, f64)>> {
    let mut rng = Rng::new(ctx.opts.seed ^ 0x99);
    let mut out = Vec::new();
    let logits = Tensor::new(vec![6, 4], rng.normal_vec(24, 1.5))?;
    let targets: Vec<Option<usize>> = (0..6).map(|i| if i == 2 { None } else { Some(rng.below(4)) }).collect();
    let e = check_inputs_with(&[logits], STEP, |g, v| cross_entropy(g, v[0], &targets), ctx.adjust_slice())?;
    out.push(("loss.cross_entropy".into(), e));

    let pred = Tensor::new(vec![10], (0..10).map(|_| rng.range(0.05, 0.95)).collect())?;
    let gt: Vec<f64> = (0..10).map(|_| (rng.uniform() < 0.5) as u8 as f64).collect();
    let e = check_inputs_with(&[pred], STEP, |g, v| mask_loss(g, v[0], &gt), ctx.adjust_slice())?;
    out.push(("loss.mask".into(), e));

    let (k, n, n_thing) = (5, 12, 3);
    let cl = Tensor::new(vec![k, n_thing + 1], rng.normal_vec(k * (n_thing + 1), 1.5))?;
    let raw = Tensor::new(vec![n, k], rng.normal_vec(n * k, 1.0))?;
    let inst: Vec<GtInstance> = (0..3).map(|_| GtInstance { thing: rng.below(n_thing), mask: (0..n).map(|_| (rng.uniform() < 0.4) as u8 as f64).collect() }).collect();
    let e = check_inputs_with(
        &[cl, raw],
        STEP,
        |g, v| {
            let masks = g.tape.softmax_rows(v[1])?;
            panoptic_loss(g, &PanopticVars { class_logits: v[0], masks3: masks, masks }, &inst).map(|p| p.0)
        },
        ctx.adjust_slice(),
    )?;
    out.push(("loss.panoptic".into(), e));
    Ok(out)
}

pub fn run(opts: GradcheckOptions) -> Result<GradcheckReport> {
    let ctx = Ctx { opts };
    let sparse = Path::Sparse { eps: DEFAULT_EPS };
    let mut raw: Vec<(String, f64)> = vec![
        ("grouping.local.reference".into(), layer_check(&ctx, GroupingMode::Local, 8, Path::Reference)?),
        ("grouping.dense.reference".into(), layer_check(&ctx, GroupingMode::Dense, 8, Path::Reference)?),
        ("sparse.local".into(), layer_check(&ctx, GroupingMode::Local, 8, sparse)?),
        ("sparse.dense".into(), layer_check(&ctx, GroupingMode::Dense, 8, sparse)?),
    ];
    let (m, store, ex) = toy(&ctx)?;
    raw.push(("backbone.toy".into(), backbone_check(&ctx, &m, &store, &ex)?));
    raw.push(("heads.semantic".into(), task_check(&ctx, &m, &store, &ex, Task::Semantic)?));
    raw.push(("heads.panoptic".into(), task_check(&ctx, &m, &store, &ex, Task::Panoptic)?));
    raw.extend(loss_checks(&ctx)?);
    let components: Vec<ComponentCheck> = raw
        .into_iter()
        .map(|(component, e)| ComponentCheck { component, max_rel_err: e, tolerance: TOLERANCE, pass: e < TOLERANCE })
        .collect();
    let pass = components.iter().all(|c| c.pass);
    Ok(GradcheckReport { step: STEP, corrupted: opts.corrupt, components, pass })
}
