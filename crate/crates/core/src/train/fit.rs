use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::argmax;
use crate::backbone::ForwardOptions;
use crate::error::{Error, Result};
use crate::grouping::{Path, DEFAULT_EPS};
use crate::heads::{panoptic_candidates, panoptic_merge};
use crate::model::Model;
use crate::numerics::{Bound, ParamGrads, ParamStore, Real, Rng, Tensor, Var};

use super::data::{Example, PATCH_STRIDE};
use super::losses::{cross_entropy, panoptic_training_loss, semantic_loss, AUX_WEIGHT};
use super::metrics::{Confusion, PqAccumulator};
use super::optim::{AdamW, AdamWConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Semantic,
    Panoptic,
    Classification,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(Task::Semantic),
            "panoptic" => Ok(Task::Panoptic),
            "classification" => Ok(Task::Classification),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub steps: usize,
    pub batch: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
    pub path: Path,
    pub aux_weight: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { steps: 100, batch: 8, optim: AdamWConfig::default(), seed: 0, path: Path::Sparse { eps: DEFAULT_EPS }, aux_weight: AUX_WEIGHT }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Batch pixel accuracy (semantic), accuracy (classification) or none.
    pub metric: Option<f64>,
    pub wallclock_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub pixel_accuracy: Option<f64>,
    pub miou: Option<f64>,
    pub pq: Option<f64>,
    pub accuracy: Option<f64>,
}

impl EvalMetrics {
    /// The headline number for `task`.
    pub fn primary(&self, task: Task) -> f64 {
        match task {
            Task::Semantic => self.pixel_accuracy,
            Task::Panoptic => self.pq,
            Task::Classification => self.accuracy,
        }
        .unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub records: Vec<StepRecord>,
    pub final_metrics: EvalMetrics,
}

impl FitReport {
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("plain record") + "\n").collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Hits {
    pub correct: usize,
    pub total: usize,
}

fn check_example(model: &Model, ex: &Example, task: Task) -> Result<()> {
    let n1 = (ex.h / 4) * (ex.w / 4);
    match task {
        Task::Semantic | Task::Panoptic if ex.patch_labels.len() != n1 => {
            Err(Error::Usage(format!("example has {} patch labels, expected {n1}", ex.patch_labels.len())))
        }
        Task::Classification if ex.class_label.is_none_or(|c| c >= model.cfg.backbone.num_classes) => {
            Err(Error::Usage("classification example without a valid label".into()))
        }
        _ => Ok(()),
    }
}

/// Training loss of one example on `g`, with hit counts for the step metric.
pub fn sample_loss<T: Real>(model: &Model, g: &mut Bound<T>, ex: &Example, task: Task, opts: &FitOptions) -> Result<(Var, Hits)> {
    check_example(model, ex, task)?;
    let img = g.input(ex.image.cast())?;
    let fo = ForwardOptions { path: opts.path };
    let vars = model.backbone.forward(g, img, ex.h, ex.w, &fo)?;
    match task {
        Task::Classification => {
            let logits = model.backbone.classification_logits(g, vars.pooled)?;
            let pred = argmax(&g.value(logits).cast::<f64>().into_data());
            let loss = cross_entropy(g, logits, &[ex.class_label])?;
            Ok((loss, Hits { correct: (Some(pred) == ex.class_label) as usize, total: 1 }))
        }
        Task::Semantic => {
            let sv = model.semantic.forward(g, &vars)?;
            let hits = patch_hits(g.value(sv.logits).cast(), &ex.patch_labels);
            Ok((semantic_loss(g, &sv, &ex.patch_labels, opts.aux_weight)?, hits))
        }
        Task::Panoptic => {
            let sv = model.semantic.forward(g, &vars)?;
            let sem = semantic_loss(g, &sv, &ex.patch_labels, opts.aux_weight)?;
            let chain = model.backbone.chain(g, &vars)?;
            let cands = panoptic_candidates(&chain, model.panoptic.k_candidates)?;
            let outs = model.panoptic.forward_deep(g, &vars, &cands)?;
            let pan = panoptic_training_loss(g, &outs, &ex.instances)?;
            let hits = patch_hits(g.value(sv.logits).cast(), &ex.patch_labels);
            Ok((g.tape.add(sem, pan)?, hits))
        }
    }
}

fn patch_hits(logits: Tensor<f64>, labels: &[Option<usize>]) -> Hits {
    let mut h = Hits::default();
    for (i, t) in labels.iter().enumerate() {
        if let Some(t) = t {
            h.total += 1;
            h.correct += (argmax(logits.row(i)) == *t) as usize;
        }
    }
    h
}

/// Loss and gradients for one example on its own tape.
pub fn example_grads(model: &Model, store: &ParamStore, ex: &Example, task: Task, opts: &FitOptions) -> Result<(f64, ParamGrads)> {
    let (l, g, _) = example_grads_hits(model, store, ex, task, opts)?;
    Ok((l, g))
}

fn example_grads_hits(model: &Model, store: &ParamStore, ex: &Example, task: Task, opts: &FitOptions) -> Result<(f64, ParamGrads, Hits)> {
    let mut g = Bound::<f64>::training(store);
    let (loss, hits) = sample_loss(model, &mut g, ex, task, opts)?;
    let lv = g.value(loss).data()[0];
    Ok((lv, g.param_grads(loss)?, hits))
}

/// Mini-batch training with per-example tapes evaluated in parallel and
/// reduced in a fixed order, so results do not depend on thread count.
pub fn fit(model: &Model, store: &mut ParamStore, data: &[Example], task: Task, opts: &FitOptions, mut on_step: impl FnMut(&StepRecord)) -> Result<FitReport> {
    if data.is_empty() || opts.batch == 0 {
        return Err(Error::Usage("fit needs data and a positive batch size".into()));
    }
    let start = Instant::now();
    let mut opt = AdamW::new(store, opts.optim);
    let rng = Rng::new(opts.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    let mut records = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch);
        while batch.len() < opts.batch {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                rng.stream(epoch).shuffle(&mut order);
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let snapshot: &ParamStore = store;
        let results: Vec<Result<(f64, ParamGrads, Hits)>> =
            batch.par_iter().map(|&i| example_grads_hits(model, snapshot, &data[i], task, opts)).collect();
        let mut grads = ParamGrads::zeros_like(store);
        let mut loss = 0.0;
        let mut hits = Hits::default();
        for r in results {
            let (l, g, h) = r.map_err(|e| match e {
                Error::Numeric { .. } => Error::Diverged { step, loss: f64::NAN },
                e => e,
            })?;
            loss += l;
            grads.add_assign(&g);
            hits.correct += h.correct;
            hits.total += h.total;
        }
        let inv = 1.0 / batch.len() as f64;
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        grads.scale(inv);
        opt.update(store, &mut grads).map_err(|e| match e {
            Error::Numeric { .. } => Error::Diverged { step, loss },
            e => e,
        })?;
        let rec = StepRecord {
            step,
            loss,
            metric: (hits.total > 0).then(|| hits.correct as f64 / hits.total as f64),
            wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&rec);
        records.push(rec);
    }
    let final_metrics = evaluate(model, store, data, task, opts.path)?;
    Ok(FitReport { records, final_metrics })
}

/// Stride-4 semantic logits `[N1, C]` for one image.
pub fn predict_semantic(model: &Model, store: &ParamStore, image: &Tensor<f64>, h: usize, w: usize, path: Path) -> Result<Tensor<f64>> {
    let mut g = Bound::<f64>::inference(store);
    let x = g.input(image.clone().reshape(vec![h * w, model.cfg.backbone.in_chans])?)?;
    let vars = model.backbone.forward(&mut g, x, h, w, &ForwardOptions { path })?;
    let l = model.semantic.patch_logits(&mut g, &vars, vars.stages[3])?;
    Ok(g.value(l).clone())
}

fn eval_one(model: &Model, store: &ParamStore, ex: &Example, task: Task, path: Path) -> Result<(Confusion, PqAccumulator, Hits)> {
    check_example(model, ex, task)?;
    let mut g = Bound::<f64>::inference(store);
    let x = g.input(ex.image.clone())?;
    let vars = model.backbone.forward(&mut g, x, ex.h, ex.w, &ForwardOptions { path })?;
    let mut conf = Confusion::new(model.cfg.semantic_classes);
    let mut pq = PqAccumulator::default();
    let mut hits = Hits::default();
    match task {
        Task::Classification => {
            let l = model.backbone.classification_logits(&mut g, vars.pooled)?;
            hits.total = 1;
            hits.correct = (Some(argmax(g.value(l).data())) == ex.class_label) as usize;
        }
        Task::Semantic | Task::Panoptic => {
            let l = model.semantic.patch_logits(&mut g, &vars, vars.stages[3])?;
            let logits = g.value(l).clone();
            let pred: Vec<usize> = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
            if ex.pixel_labels.is_empty() {
                conf.add_all(&ex.patch_labels, &pred);
            } else {
                let pw = ex.w / PATCH_STRIDE;
                for (e, &t) in ex.pixel_labels.iter().enumerate() {
                    let (r, c) = (e / ex.w, e % ex.w);
                    conf.add(t as usize, pred[(r / PATCH_STRIDE) * pw + c / PATCH_STRIDE]);
                }
            }
            if task == Task::Panoptic {
                let chain = model.backbone.chain(&g, &vars)?;
                let cands = panoptic_candidates(&chain, model.panoptic.k_candidates)?;
                let p = model.panoptic.forward(&mut g, &vars, &cands, vars.stages[3])?;
                let map = panoptic_merge(&logits, g.value(p.masks), g.value(p.class_logits), &model.cfg.thing_classes, ex.h / 4, ex.w / 4)?;
                let pred_pairs: Vec<(u16, u16)> = map.class.iter().zip(&map.instance).map(|(c, i)| (*c, *i)).collect();
                pq.add(&gt_pairs(ex, &model.cfg.thing_classes), &pred_pairs);
            }
        }
    }
    Ok((conf, pq, hits))
}

/// Patch-level `(class, instance)` ground truth, instance ids in annotation order.
fn gt_pairs(ex: &Example, thing_classes: &[usize]) -> Vec<(u16, u16)> {
    (0..ex.patch_labels.len())
        .map(|i| {
            let c = ex.patch_labels[i].unwrap_or(0);
            let mut best: Option<(usize, f64)> = None;
            for (k, inst) in ex.instances.iter().enumerate() {
                if thing_classes.get(inst.thing) == Some(&c) && inst.mask[i] >= 0.5 && best.is_none_or(|(_, m)| inst.mask[i] > m) {
                    best = Some((k, inst.mask[i]));
                }
            }
            (c as u16, best.map_or(0, |(k, _)| k as u16 + 1))
        })
        .collect()
}

/// Metrics over `data`, accumulated across images.
pub fn evaluate(model: &Model, store: &ParamStore, data: &[Example], task: Task, path: Path) -> Result<EvalMetrics> {
    let parts: Vec<_> = data.par_iter().map(|ex| eval_one(model, store, ex, task, path)).collect::<Result<Vec<_>>>()?;
    let mut conf = Confusion::new(model.cfg.semantic_classes);
    let mut pq = PqAccumulator::default();
    let mut hits = Hits::default();
    for (c, p, h) in parts {
        conf.merge(&c);
        pq.iou_sum += p.iou_sum;
        pq.tp += p.tp;
        pq.fp += p.fp;
        pq.fn_ += p.fn_;
        hits.correct += h.correct;
        hits.total += h.total;
    }
    Ok(match task {
        Task::Classification => EvalMetrics { accuracy: Some(hits.correct as f64 / hits.total.max(1) as f64), ..Default::default() },
        Task::Semantic => EvalMetrics { pixel_accuracy: Some(conf.pixel_accuracy()), miou: Some(conf.miou()), ..Default::default() },
        Task::Panoptic => EvalMetrics { pixel_accuracy: Some(conf.pixel_accuracy()), miou: Some(conf.miou()), pq: Some(pq.pq()), ..Default::default() },
    })
}
