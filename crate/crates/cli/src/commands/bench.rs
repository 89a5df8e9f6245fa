//! Wall time of one local grouping layer on sparse and reference paths.

use std::time::Instant;

use serde::Serialize;

use nsvt_core::grid::TokenGrid;
use nsvt_core::grouping::{grouping_forward, GroupingConfig, GroupingLayer, GroupingMode, Path};
use nsvt_core::numerics::gradcheck::randomize;
use nsvt_core::numerics::{ParamStore, Rng};
use nsvt_core::{Error, Result};

use crate::config::{BenchSettings, PathKind};

/// Largest dense assignment the reference path will materialize: a 96²
/// input grid against its 48² output grid.
pub const ENTRY_CEILING: usize = 96 * 96 * 48 * 48;
pub const CSV_HEADER: &str = "geometry,path,median_ms,entries";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub side: usize,
    pub geometry: String,
    pub path: PathKind,
    pub median_ms: f64,
    pub entries: usize,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        let p = match self.path {
            PathKind::Sparse => "sparse",
            PathKind::Reference => "reference",
        };
        format!("{},{p},{:.3},{}", self.geometry, self.median_ms, self.entries)
    }
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Stored assignment entries for one `side × side` input grid.
pub fn entries(side: usize, path: PathKind) -> Result<usize> {
    let n_in = side * side;
    let n_out = side.div_ceil(2).pow(2);
    match path {
        PathKind::Reference => Ok(n_in * n_out),
        PathKind::Sparse => Ok((0..n_in).map(|i| window(i / side, i % side, side.div_ceil(2))).sum()),
    }
}

fn window(r: usize, c: usize, out: usize) -> usize {
    let span = |p: usize| (p / 2 + 1).min(out - 1) + 1 - (p / 2).saturating_sub(1);
    span(r) * span(c)
}

pub fn bench_one(side: usize, path: PathKind, eps: f64, s: &BenchSettings, seed: u64) -> Result<BenchRow> {
    if side < 2 || side % 2 != 0 {
        return Err(Error::Config(format!("bench side {side} must be even and at least 2")));
    }
    let n = entries(side, path)?;
    if n > ENTRY_CEILING {
        return Err(Error::Config(format!("{side}x{side} on the {path:?} path needs {n} assignment entries, above the ceiling of {ENTRY_CEILING}")));
    }
    if s.runs == 0 || s.d_in == 0 || s.iterations == 0 {
        return Err(Error::Config("bench runs, d_in and iterations must be positive".into()));
    }
    let mut store = ParamStore::new(seed);
    let cfg = GroupingConfig { d_in: s.d_in, d_out: 2 * s.d_in, mlp_ratio: 2.0, iterations: s.iterations, mode: GroupingMode::Local, table: (side / 2, side / 2) };
    let layer = GroupingLayer::new(&mut store, "bench", cfg);
    let mut rng = Rng::new(seed ^ 0xb3);
    randomize(&mut store, &mut rng, 0.2);
    let x = TokenGrid::new(side, side, s.d_in, rng.normal_vec(side * side * s.d_in, 1.0))?;
    let gp = match path {
        PathKind::Sparse => Path::Sparse { eps },
        PathKind::Reference => Path::Reference,
    };
    let x32 = TokenGrid::<f32>::from_tensor(side, side, x.tokens.cast())?;
    let run = || -> Result<f64> {
        let t = Instant::now();
        if s.f32 {
            std::hint::black_box(grouping_forward(&layer, &store, &x32, gp)?);
        } else {
            std::hint::black_box(grouping_forward(&layer, &store, &x, gp)?);
        }
        Ok(t.elapsed().as_secs_f64() * 1e3)
    };
    run()?;
    let mut times = (0..s.runs).map(|_| run()).collect::<Result<Vec<_>>>()?;
    let out = side / 2;
    Ok(BenchRow { side, geometry: format!("{side}x{side}->{out}x{out}"), path, median_ms: median(&mut times), entries: n })
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Reference sizes left out because they exceed the entry ceiling.
    pub skipped: Vec<String>,
    /// Sparse median at 128² over 64², when both sides were run.
    pub ratio_128_64: Option<f64>,
}

/// Runs every side on every requested path. With both paths requested,
/// over-ceiling reference sizes are skipped; alone, they are an error.
pub fn run(s: &BenchSettings, paths: &[PathKind], eps: f64, seed: u64, mut on_row: impl FnMut(&BenchRow)) -> Result<BenchReport> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &side in &s.sides {
        for &p in paths {
            if paths.len() > 1 && p == PathKind::Reference && entries(side, p)? > ENTRY_CEILING {
                skipped.push(format!("{side}x{side} reference: {} entries exceed {ENTRY_CEILING}", entries(side, p)?));
                continue;
            }
            let row = bench_one(side, p, eps, s, seed)?;
            on_row(&row);
            rows.push(row);
        }
    }
    let find = |side: usize| rows.iter().find(|r| r.side == side && r.path == PathKind::Sparse).map(|r| r.median_ms);
    let ratio_128_64 = find(128).zip(find(64)).map(|(a, b)| a / b);
    Ok(BenchReport { rows, skipped, ratio_128_64 })
}
