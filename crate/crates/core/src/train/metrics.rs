//! Pixel accuracy, mIoU and panoptic quality.

use std::collections::HashMap;

/// Row = ground truth, column = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub n: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(n: usize) -> Self {
        Confusion { n, counts: vec![0; n * n] }
    }

    pub fn add(&mut self, gt: usize, pred: usize) {
        self.counts[gt * self.n + pred] += 1;
    }

    pub fn add_all(&mut self, gt: &[Option<usize>], pred: &[usize]) {
        for (g, &p) in gt.iter().zip(pred) {
            if let Some(g) = g {
                self.add(*g, p);
            }
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let hit: u64 = (0..self.n).map(|c| self.counts[c * self.n + c]).sum();
        hit as f64 / self.total().max(1) as f64
    }

    /// IoU per class; `None` where the class is absent from both sides.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.counts[c * self.n + c];
                let gt: u64 = (0..self.n).map(|p| self.counts[c * self.n + p]).sum();
                let pr: u64 = (0..self.n).map(|g| self.counts[g * self.n + c]).sum();
                let union = gt + pr - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let v: Vec<f64> = self.iou().into_iter().flatten().collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// Running panoptic quality over `(class, instance)` maps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PqAccumulator {
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl PqAccumulator {
    /// Segments are `(class, instance)` keys; a prediction and a ground-truth
    /// segment of the same class match when their IoU exceeds 0.5.
    pub fn add(&mut self, gt: &[(u16, u16)], pred: &[(u16, u16)]) {
        let mut inter: HashMap<((u16, u16), (u16, u16)), usize> = HashMap::new();
        let mut ga: HashMap<(u16, u16), usize> = HashMap::new();
        let mut pa: HashMap<(u16, u16), usize> = HashMap::new();
        for (g, p) in gt.iter().zip(pred) {
            *ga.entry(*g).or_default() += 1;
            *pa.entry(*p).or_default() += 1;
            if g.0 == p.0 {
                *inter.entry((*g, *p)).or_default() += 1;
            }
        }
        let mut matched_g = Vec::new();
        let mut matched_p = Vec::new();
        let mut keys: Vec<_> = inter.keys().copied().collect();
        keys.sort_unstable();
        for (g, p) in keys {
            let i = inter[&(g, p)];
            let u = ga[&g] + pa[&p] - i;
            let iou = i as f64 / u as f64;
            if iou > 0.5 {
                self.iou_sum += iou;
                self.tp += 1;
                matched_g.push(g);
                matched_p.push(p);
            }
        }
        self.fn_ += ga.keys().filter(|k| !matched_g.contains(k)).count();
        self.fp += pa.keys().filter(|k| !matched_p.contains(k)).count();
    }

    pub fn pq(&self) -> f64 {
        let d = self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64;
        if d == 0.0 {
            0.0
        } else {
            self.iou_sum / d
        }
    }
}
