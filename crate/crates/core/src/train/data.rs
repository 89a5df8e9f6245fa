//! Deterministic synthetic shapes with exact annotations.

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

use super::losses::GtInstance;

/// Background plus three shape classes.
pub const N_CLASSES: usize = 4;
pub const PATCH_STRIDE: usize = 4;

const CLASS_COLORS: [[f64; 3]; 6] = [
    [0.88, 0.22, 0.20],
    [0.20, 0.74, 0.28],
    [0.22, 0.32, 0.88],
    [0.92, 0.82, 0.18],
    [0.70, 0.25, 0.80],
    [0.15, 0.78, 0.80],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Circle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class: usize,
    pub kind: ShapeKind,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub h: usize,
    pub w: usize,
    /// `[h, w, 3]` in `[0, 1]`.
    pub image: Tensor<f64>,
    /// Per-pixel class, 0 for background.
    pub semantic: Vec<u8>,
    pub instances: Vec<Instance>,
}

/// Four-class shapes: 1–`max_shapes` instances.
pub fn synth_shapes(seed: u64, h: usize, w: usize, max_shapes: usize) -> Result<SynthSample> {
    synth_shapes_with(seed, h, w, max_shapes, N_CLASSES)
}

/// Rectangles and circles in per-class flat colors over a textured
/// background; later shapes occlude earlier ones and fully hidden shapes are
/// dropped.
pub fn synth_shapes_with(seed: u64, h: usize, w: usize, max_shapes: usize, n_classes: usize) -> Result<SynthSample> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Config(format!("synthetic images need sides divisible by 32, got {h}x{w}")));
    }
    if !(2..=CLASS_COLORS.len() + 1).contains(&n_classes) || max_shapes == 0 {
        return Err(Error::Config(format!("need 2..={} classes and at least one shape", CLASS_COLORS.len() + 1)));
    }
    let mut rng = Rng::new(seed);
    let mut img = vec![0.0; h * w * 3];
    let (fr, fc, ph) = (rng.range(0.15, 0.45), rng.range(0.15, 0.45), rng.range(0.0, 6.3));
    for r in 0..h {
        for c in 0..w {
            let base = 0.45 + 0.06 * ((fr * r as f64 + ph).sin() * (fc * c as f64).cos());
            for ch in 0..3 {
                img[(r * w + c) * 3 + ch] = (base + 0.03 * rng.normal()).clamp(0.0, 1.0);
            }
        }
    }
    let n = 1 + rng.below(max_shapes);
    let mut owner = vec![usize::MAX; h * w];
    let mut shapes = Vec::with_capacity(n);
    let side = h.min(w) as f64;
    for s in 0..n {
        let class = 1 + rng.below(n_classes - 1);
        let kind = if rng.uniform() < 0.5 { ShapeKind::Rect } else { ShapeKind::Circle };
        let color: Vec<f64> = CLASS_COLORS[class - 1].iter().map(|v| (v + rng.range(-0.04, 0.04)).clamp(0.0, 1.0)).collect();
        let cy = rng.range(0.15, 0.85) * h as f64;
        let cx = rng.range(0.15, 0.85) * w as f64;
        let (ry, rx) = (rng.range(0.1, 0.22) * side, rng.range(0.1, 0.22) * side);
        for r in 0..h {
            for c in 0..w {
                let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                let inside = match kind {
                    ShapeKind::Rect => dy.abs() <= ry && dx.abs() <= rx,
                    ShapeKind::Circle => (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0,
                };
                if inside {
                    owner[r * w + c] = s;
                    img[(r * w + c) * 3..(r * w + c) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
        shapes.push((class, kind));
    }
    let semantic = owner.iter().map(|&o| if o == usize::MAX { 0 } else { shapes[o].0 as u8 }).collect();
    let instances = shapes
        .iter()
        .enumerate()
        .map(|(s, &(class, kind))| Instance { class, kind, mask: owner.iter().map(|&o| o == s).collect() })
        .filter(|i| i.mask.iter().any(|&b| b))
        .collect();
    Ok(SynthSample { h, w, image: Tensor::new(vec![h, w, 3], img)?, semantic, instances })
}

/// Majority label of every `stride × stride` block, ties toward the lower label.
pub fn patch_labels(labels: &[u8], h: usize, w: usize, stride: usize, n_classes: usize) -> Vec<usize> {
    let (ph, pw) = (h / stride, w / stride);
    let mut out = Vec::with_capacity(ph * pw);
    let mut count = vec![0usize; n_classes.max(1)];
    for pr in 0..ph {
        for pc in 0..pw {
            count.iter_mut().for_each(|c| *c = 0);
            for r in pr * stride..(pr + 1) * stride {
                for c in pc * stride..(pc + 1) * stride {
                    count[labels[r * w + c] as usize] += 1;
                }
            }
            let mut best = 0;
            for (k, &c) in count.iter().enumerate() {
                if c > count[best] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Fraction of each block covered by `mask`.
pub fn patch_coverage(mask: &[bool], h: usize, w: usize, stride: usize) -> Vec<f64> {
    let (ph, pw) = (h / stride, w / stride);
    let area = (stride * stride) as f64;
    (0..ph * pw)
        .map(|p| {
            let (pr, pc) = (p / pw, p % pw);
            let mut n = 0;
            for r in pr * stride..(pr + 1) * stride {
                for c in pc * stride..(pc + 1) * stride {
                    n += mask[r * w + c] as usize;
                }
            }
            n as f64 / area
        })
        .collect()
}

/// Training view of one image at the stride-4 patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub h: usize,
    pub w: usize,
    /// `[h*w, 3]`.
    pub image: Tensor<f64>,
    pub patch_labels: Vec<Option<usize>>,
    /// Full-resolution labels; empty when only patch labels are known.
    pub pixel_labels: Vec<u8>,
    pub instances: Vec<GtInstance>,
    pub class_label: Option<usize>,
}

impl Example {
    /// `thing_classes[t]` is the semantic label of thing class `t`; other
    /// shapes are not instances.
    pub fn from_sample(s: &SynthSample, n_classes: usize, thing_classes: &[usize]) -> Result<Self> {
        let labels = patch_labels(&s.semantic, s.h, s.w, PATCH_STRIDE, n_classes);
        let instances = s
            .instances
            .iter()
            .filter_map(|i| {
                thing_classes.iter().position(|&c| c == i.class).map(|t| GtInstance { thing: t, mask: patch_coverage(&i.mask, s.h, s.w, PATCH_STRIDE) })
            })
            .collect();
        Ok(Example {
            h: s.h,
            w: s.w,
            image: s.image.clone().reshape(vec![s.h * s.w, 3])?,
            patch_labels: labels.into_iter().map(Some).collect(),
            pixel_labels: s.semantic.clone(),
            instances,
            class_label: None,
        })
    }

    pub fn classification(image: Tensor<f64>, h: usize, w: usize, label: usize) -> Result<Self> {
        Ok(Example { h, w, image: image.reshape(vec![h * w, 3])?, patch_labels: Vec::new(), pixel_labels: Vec::new(), instances: Vec::new(), class_label: Some(label) })
    }
}

/// `n` shape images with their stride-4 annotations.
pub fn synth_dataset(seed: u64, n: usize, h: usize, w: usize, max_shapes: usize, n_classes: usize, thing_classes: &[usize]) -> Result<Vec<Example>> {
    use rayon::prelude::*;
    (0..n as u64)
        .into_par_iter()
        .map(|i| Example::from_sample(&synth_shapes_with(Rng::new(seed).stream(i).next_u64(), h, w, max_shapes, n_classes)?, n_classes, thing_classes))
        .collect()
}
