//! Per-stage hard segmentations and label maps for one image.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;

use nsvt_core::assignment::{argmax, compose_ups, stage_segmentations, upsample_features};
use nsvt_core::backbone::{backbone_forward, ForwardOptions, GroupingKind};
use nsvt_core::grouping::GroupingMode;
use nsvt_core::heads::panoptic::panoptic_refine;
use nsvt_core::heads::{panoptic_candidates, panoptic_merge, semantic_segment, zero_shot_segment};
use nsvt_core::io::{write_pam_pairs, write_pgm16, write_ppm, RgbImage};
use nsvt_core::numerics::Tensor;
use nsvt_core::train::Task;
use nsvt_core::Error;

use super::{build_model, load_embeddings, load_image};
use crate::config::{PathKind, RunConfig};
use crate::error::CliResult;
use crate::palette::Palette;

#[derive(Clone, Debug, Serialize)]
pub struct EntropyStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// Largest attainable value: ln of the permitted outputs per row.
    pub bound: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StageStats {
    pub stage: usize,
    pub grid: [usize; 2],
    pub downsampler: GroupingKind,
    pub n_segments: usize,
    pub row_entropy: EntropyStats,
}

#[derive(Clone, Debug, Serialize)]
pub struct LabelStats {
    pub kind: &'static str,
    pub file: String,
    pub n_labels: usize,
    pub present: Vec<u32>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SegmentStats {
    pub image: [usize; 2],
    pub patch_grid: [usize; 2],
    pub variant: String,
    pub path: PathKind,
    pub eps: f64,
    pub stages: Vec<StageStats>,
    pub labels: LabelStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub panoptic_instances: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wallclock_ms: Option<BTreeMap<String, f64>>,
}

pub struct SegmentResult {
    pub files: Vec<PathBuf>,
    pub stats: SegmentStats,
}

pub fn entropy_stats(ent: &[f64], bound: f64) -> EntropyStats {
    let min = ent.iter().copied().fold(f64::INFINITY, f64::min);
    let max = ent.iter().copied().fold(0.0, f64::max);
    EntropyStats { min, mean: ent.iter().sum::<f64>() / ent.len().max(1) as f64, max, bound }
}

fn labels_u16(labels: &[u32]) -> CliResult<Vec<u16>> {
    labels.iter().map(|&l| u16::try_from(l).map_err(|_| Error::Usage(format!("label {l} does not fit 16 bits")).into())).collect()
}

/// Writes `stage{2,3,4}.ppm`, a label map (`semantic` or `zero_shot`, as
/// `.pgm` and colored `.ppm`), `panoptic.pam` for the panoptic task, and
/// `stats.json`. Wallclock is recorded only when `timing` is set so that
/// default outputs are reproducible byte for byte.
pub fn segment(cfg: &RunConfig, image: &std::path::Path, timing: bool) -> CliResult<SegmentResult> {
    let mut clock = BTreeMap::new();
    let mut t0 = Instant::now();
    let mut lap = |name: &str, clock: &mut BTreeMap<String, f64>| {
        clock.insert(name.to_string(), t0.elapsed().as_secs_f64() * 1e3);
        t0 = Instant::now();
    };
    let (img, h, w) = load_image(image)?;
    let emb = load_embeddings(cfg)?;
    let loaded = build_model(cfg)?;
    let (model, store) = (&loaded.model, &loaded.store);
    lap("load", &mut clock);

    let opts = ForwardOptions { path: cfg.grouping_path()? };
    let out = backbone_forward(&model.backbone, store, &img, h, w, &opts)?;
    lap("backbone", &mut clock);

    std::fs::create_dir_all(&cfg.out)?;
    let mut files = Vec::new();
    let mut write = |name: &str, bytes: &[u8]| -> CliResult<()> {
        let p = cfg.out.join(name);
        std::fs::write(&p, bytes)?;
        files.push(p);
        Ok(())
    };

    let (gh, gw) = out.chain.stage_grid(1)?;
    let seg_palette = Palette { background: false };
    let maps = stage_segmentations(&out.chain)?;
    let mut stages = Vec::new();
    for (k, map) in maps.iter().enumerate() {
        let link = &out.chain.links()[k];
        write(&format!("stage{}.ppm", map.stage), &write_ppm(&RgbImage::new(gw, gh, seg_palette.paint(&map.labels))?))?;
        let bound = match link.mode {
            GroupingMode::Dense => (link.n_out() as f64).ln(),
            GroupingMode::Local => 9f64.ln(),
        };
        stages.push(StageStats {
            stage: map.stage,
            grid: [link.h_out, link.w_out],
            downsampler: model.backbone.cfg.grouping[k],
            n_segments: map.occupied(),
            row_entropy: entropy_stats(&link.ups_row_entropy(), bound),
        });
    }
    lap("segments", &mut clock);

    let label_palette = Palette { background: true };
    let labels = match &emb {
        Some(e) => {
            let zs = zero_shot_segment(&model.zero_shot, store, &out, e)?;
            write("zero_shot.pgm", &write_pgm16(gw, gh, &labels_u16(&zs.labels)?)?)?;
            write("zero_shot.ppm", &write_ppm(&RgbImage::new(gw, gh, label_palette.paint(&zs.labels))?))?;
            let mut names = vec!["background".to_string()];
            names.extend(e.names.iter().cloned());
            write("zero_shot.json", (serde_json::to_string_pretty(&serde_json::json!({ "width": gw, "height": gh, "labels": names }))? + "\n").as_bytes())?;
            LabelStats { kind: "zero_shot", file: "zero_shot.pgm".into(), n_labels: e.len() + 1, present: present(&zs.labels) }
        }
        None => {
            let logits = semantic_segment(&model.semantic, store, &out)?;
            let labels: Vec<u32> = (0..logits.rows()).map(|i| argmax(logits.row(i)) as u32).collect();
            write("semantic.pgm", &write_pgm16(gw, gh, &labels_u16(&labels)?)?)?;
            write("semantic.ppm", &write_ppm(&RgbImage::new(gw, gh, label_palette.paint(&labels))?))?;
            write("semantic.json", (serde_json::to_string_pretty(&serde_json::json!({ "width": gw, "height": gh, "classes": logits.cols() }))? + "\n").as_bytes())?;
            LabelStats { kind: "semantic", file: "semantic.pgm".into(), n_labels: logits.cols(), present: present(&labels) }
        }
    };
    lap("labels", &mut clock);

    let mut panoptic_instances = None;
    if cfg.task == Task::Panoptic {
        let cands = panoptic_candidates(&out.chain, model.panoptic.k_candidates)?;
        let (class_logits, masks3) = panoptic_refine(&model.panoptic, store, &out, &cands)?;
        let masks = upsample_features(&compose_ups(&out.chain, 3, 1)?, &masks3)?;
        let sem = semantic_segment(&model.semantic, store, &out)?;
        let pan = panoptic_merge(&sem, &masks, &class_logits, &model.cfg.thing_classes, gh, gw)?;
        write("panoptic.pam", &write_pam_pairs(gw, gh, &pan.class, &pan.instance)?)?;
        panoptic_instances = Some(pan.n_instances());
        lap("panoptic", &mut clock);
    }

    let stats = SegmentStats {
        image: [h, w],
        patch_grid: [gh, gw],
        variant: model.backbone.cfg.variant.clone(),
        path: cfg.path,
        eps: cfg.eps,
        stages,
        labels,
        panoptic_instances,
        wallclock_ms: timing.then_some(clock),
    };
    write("stats.json", (serde_json::to_string_pretty(&stats)? + "\n").as_bytes())?;
    Ok(SegmentResult { files, stats })
}

fn present(labels: &[u32]) -> Vec<u32> {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Backbone class scores, or zero-shot similarities when embeddings are set.
pub fn classify(cfg: &RunConfig, image: &std::path::Path) -> CliResult<serde_json::Value> {
    use nsvt_core::numerics::Bound;
    let (img, h, w) = load_image(image)?;
    let emb = load_embeddings(cfg)?;
    let loaded = build_model(cfg)?;
    let (model, store) = (&loaded.model, &loaded.store);
    let opts = ForwardOptions { path: cfg.grouping_path()? };
    let out = backbone_forward(&model.backbone, store, &img, h, w, &opts)?;
    let mut g = Bound::<f64>::inference(store);
    let d = out.pooled.numel();
    let pooled = g.input(out.pooled.clone().reshape(vec![1, d])?)?;
    match emb {
        None => {
            let logits = model.backbone.classification_logits(&mut g, pooled)?;
            let scores = g.value(logits).data().to_vec();
            let probs = nsvt_core::numerics::ops::softmax_rows(&Tensor::new(vec![1, scores.len()], scores.clone())?)?.into_data();
            Ok(serde_json::json!({ "class": argmax(&scores), "probability": probs[argmax(&scores)], "logits": scores }))
        }
        Some(e) => {
            let z = model.zero_shot.proj.forward(&mut g, pooled)?;
            let z = g.value(z).data().to_vec();
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let sims: Vec<f64> = (0..e.len()).map(|c| e.vectors.row(c).iter().zip(&z).map(|(a, b)| a * b / norm).sum()).collect();
            let best = argmax(&sims);
            Ok(serde_json::json!({ "class": best, "name": e.names[best], "names": e.names, "similarity": sims }))
        }
    }
}
