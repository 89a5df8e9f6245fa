#![allow(dead_code)]

use nsvt_core::grid::TokenGrid;
use nsvt_core::grouping::{GroupingConfig, GroupingLayer, GroupingMode};
use nsvt_core::numerics::{ParamStore, Rng, Tensor};

#[allow(unused_imports)]
pub use nsvt_core::numerics::gradcheck::{probe, randomize};

pub fn rand_grid(rng: &mut Rng, h: usize, w: usize, c: usize) -> TokenGrid<f64> {
    TokenGrid::new(h, w, c, rng.normal_vec(h * w * c, 1.0)).unwrap()
}

pub fn layer(mode: GroupingMode, d_in: usize, d_out: usize, iterations: usize, table: (usize, usize), seed: u64) -> (GroupingLayer, ParamStore) {
    let mut store = ParamStore::new(seed);
    let cfg = GroupingConfig { d_in, d_out, mlp_ratio: 2.0, iterations, mode, table };
    let l = GroupingLayer::new(&mut store, "g", cfg);
    (l, store)
}

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    store.get(store.find(name).unwrap_or_else(|| panic!("missing {name}"))).data()
}

fn affine(x: &[f64], n: usize, din: usize, w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * dout];
    for i in 0..n {
        for o in 0..dout {
            let mut s = b[o];
            for k in 0..din {
                s += x[i * din + k] * w[k * dout + o];
            }
            y[i * dout + o] = s;
        }
    }
    y
}

fn ln(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (r, row) in x.chunks(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for j in 0..d {
            y[r * d + j] = (row[j] - mean) / (var + 1e-5).sqrt() * g[j] + b[j];
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub struct OracleOut {
    pub x_out: Vec<f64>,
    pub ups: Vec<f64>,
    pub down: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Straight-line conv (3×3, stride 2, pad 1) followed by LN.
pub fn oracle_init(store: &ParamStore, x: &TokenGrid<f64>, d: usize) -> (Vec<f64>, usize, usize) {
    let (h, w, c) = (x.h, x.w, x.c);
    let (ho, wo) = ((h + 1) / 2, (w + 1) / 2);
    let wt = p(store, "g.conv.weight");
    let bs = p(store, "g.conv.bias");
    let mut y = vec![0.0; ho * wo * d];
    for oy in 0..ho {
        for ox in 0..wo {
            for o in 0..d {
                let mut s = bs[o];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        let ix = (2 * ox + kx) as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ch in 0..c {
                            s += x.tokens.data()[(iy as usize * w + ix as usize) * c + ch] * wt[((ky * 3 + kx) * c + ch) * d + o];
                        }
                    }
                }
                y[(oy * wo + ox) * d + o] = s;
            }
        }
    }
    (ln(&y, d, p(store, "g.ln_init.gamma"), p(store, "g.ln_init.beta")), ho, wo)
}

/// Straight-line iteration with an explicit `-inf` mask.
pub fn oracle_iteration(
    store: &ParamStore,
    mode: GroupingMode,
    table: (usize, usize),
    x_in: &TokenGrid<f64>,
    x_out: &[f64],
    ho: usize,
    wo: usize,
    d: usize,
) -> OracleOut {
    let (h, w, c) = (x_in.h, x_in.w, x_in.c);
    let (ni, no) = (h * w, ho * wo);
    let k = affine(x_in.tokens.data(), ni, c, p(store, "g.k.weight"), p(store, "g.k.bias"), d);
    let v = affine(x_in.tokens.data(), ni, c, p(store, "g.v.weight"), p(store, "g.v.bias"), d);
    let q = affine(x_out, no, d, p(store, "g.q.weight"), p(store, "g.q.bias"), d);
    let tau = p(store, "g.log_tau")[0].exp();
    let bias = p(store, "g.rel_bias");
    let mut logits = vec![f64::NEG_INFINITY; ni * no];
    for i in 0..ni {
        let (pr, pc) = ((i / w) as isize / 2, (i % w) as isize / 2);
        for j in 0..no {
            let (rr, cc) = ((j / wo) as isize, (j % wo) as isize);
            let (dr, dc) = (rr - pr, cc - pc);
            let bidx = match mode {
                GroupingMode::Local => {
                    if dr.abs() > 1 || dc.abs() > 1 {
                        continue;
                    }
                    ((dr + 1) * 3 + dc + 1) as usize
                }
                GroupingMode::Dense => {
                    let (th, tw) = (table.0 as isize, table.1 as isize);
                    ((dr + th - 1) * (2 * tw - 1) + dc + tw - 1) as usize
                }
            };
            let dot: f64 = (0..d).map(|t| k[i * d + t] * q[j * d + t]).sum();
            logits[i * no + j] = tau * dot + bias[bidx];
        }
    }
    let mut ups = vec![0.0; ni * no];
    for i in 0..ni {
        let row = &logits[i * no..(i + 1) * no];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for j in 0..no {
            ups[i * no + j] = (row[j] - mx).exp() / z;
        }
    }
    let mut down = vec![0.0; ni * no];
    for j in 0..no {
        let s: f64 = (0..ni).map(|i| ups[i * no + j]).sum();
        for i in 0..ni {
            down[i * no + j] = ups[i * no + j] / s;
        }
    }
    let mut upd = vec![0.0; no * d];
    for j in 0..no {
        for i in 0..ni {
            for t in 0..d {
                upd[j * d + t] += down[i * no + j] * v[i * d + t];
            }
        }
    }
    let upd = ln(&upd, d, p(store, "g.ln_update.gamma"), p(store, "g.ln_update.beta"));
    let x1: Vec<f64> = x_out.iter().zip(&upd).map(|(a, b)| a + b).collect();
    let hidden = p(store, "g.mlp.fc1.bias").len();
    let hmid: Vec<f64> = affine(&x1, no, d, p(store, "g.mlp.fc1.weight"), p(store, "g.mlp.fc1.bias"), hidden).into_iter().map(gelu).collect();
    let m = affine(&hmid, no, hidden, p(store, "g.mlp.fc2.weight"), p(store, "g.mlp.fc2.bias"), d);
    let m = ln(&m, d, p(store, "g.ln_mlp.gamma"), p(store, "g.ln_mlp.beta"));
    let x2 = x1.iter().zip(&m).map(|(a, b)| a + b).collect();
    OracleOut { x_out: x2, ups, down, logits }
}

pub fn oracle_forward(store: &ParamStore, mode: GroupingMode, table: (usize, usize), x: &TokenGrid<f64>, d: usize, iterations: usize) -> OracleOut {
    let (mut xo, ho, wo) = oracle_init(store, x, d);
    let mut last = None;
    for _ in 0..iterations {
        let o = oracle_iteration(store, mode, table, x, &xo, ho, wo, d);
        xo = o.x_out.clone();
        last = Some(o);
    }
    last.unwrap()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn tensor_diff(a: &Tensor<f64>, b: &[f64]) -> f64 {
    max_diff(a.data(), b)
}
