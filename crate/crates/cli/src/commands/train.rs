//! Toy training on synthetic shapes.

use serde::Serialize;

use nsvt_core::io::save_weights;
use nsvt_core::train::{fit, synth_dataset, AdamWConfig, EvalMetrics, FitOptions, FitReport, Task};
use nsvt_core::train::losses::AUX_WEIGHT;
use nsvt_core::Error;

use super::build_model;
use crate::config::RunConfig;
use crate::error::CliResult;

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub task: Task,
    pub steps: usize,
    pub n_train: usize,
    pub grouping: crate::config::StageToggles,
    pub final_loss: f64,
    pub metrics: EvalMetrics,
    pub seconds: f64,
}

pub fn fit_options(cfg: &RunConfig) -> CliResult<FitOptions> {
    let t = &cfg.train;
    if t.steps == 0 || t.batch == 0 || t.n_train == 0 {
        return Err(Error::Config("train steps, batch and n_train must be positive".into()).into());
    }
    Ok(FitOptions {
        steps: t.steps,
        batch: t.batch,
        optim: AdamWConfig { lr: t.lr, warmup: t.warmup, ..AdamWConfig::default() },
        seed: cfg.seed,
        path: cfg.grouping_path()?,
        aux_weight: AUX_WEIGHT,
    })
}

/// Trains from the seeded initialization (or the configured weights) and
/// returns the report together with the final weights' store.
pub fn run(cfg: &RunConfig, mut on_step: impl FnMut(&nsvt_core::train::StepRecord)) -> CliResult<(FitReport, super::Loaded, f64)> {
    let opts = fit_options(cfg)?;
    let mut loaded = build_model(cfg)?;
    let mc = &loaded.model.cfg;
    let t = &cfg.train;
    let data = synth_dataset(t.data_seed, t.n_train, t.image_size, t.image_size, t.max_shapes, mc.semantic_classes, &mc.thing_classes)?;
    let start = std::time::Instant::now();
    let report = fit(&loaded.model, &mut loaded.store, &data, cfg.task, &opts, |r| on_step(r))?;
    Ok((report, loaded, start.elapsed().as_secs_f64()))
}

/// Writes `train.jsonl`, `weights.nsvt` with its manifest, and `metrics.json`.
pub fn train_toy(cfg: &RunConfig, verbose: bool) -> CliResult<TrainSummary> {
    let every = (cfg.train.steps / 20).max(1);
    let (report, loaded, seconds) = run(cfg, |r| {
        if verbose && (r.step % every == 0 || r.step + 1 == cfg.train.steps) {
            eprintln!("step {:>5}  loss {:.4}  metric {}", r.step, r.loss, r.metric.map_or("-".into(), |m| format!("{m:.4}")));
        }
    })?;
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("train.jsonl"), report.to_jsonl())?;
    save_weights(&loaded.store, &cfg.out.join("weights.nsvt"))?;
    let summary = TrainSummary {
        task: cfg.task,
        steps: cfg.train.steps,
        n_train: cfg.train.n_train,
        grouping: cfg.grouping,
        final_loss: report.records.last().map_or(f64::NAN, |r| r.loss),
        metrics: report.final_metrics.clone(),
        seconds,
    };
    std::fs::write(cfg.out.join("metrics.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}
