use std::sync::Arc;

use nsvt_core::assignment::CsrMatrix;
use nsvt_core::numerics::gradcheck::probe;
use nsvt_core::numerics::kernels::ConvGeom;
use nsvt_core::numerics::{check_inputs, Bound, ParamStore, Pattern, Rng, Tensor, Var};
use nsvt_core::Result;
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const SHAPES: u64 = 24;

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n, 1.0)).unwrap()
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.range(0.3, 2.0)).collect()).unwrap()
}

fn dim(rng: &mut Rng) -> usize {
    1 + rng.below(5)
}

fn mat(rng: &mut Rng) -> Tensor<f64> {
    let s = [dim(rng), dim(rng)];
    normal(rng, &s)
}

fn pos_mat(rng: &mut Rng) -> Tensor<f64> {
    let s = [dim(rng), dim(rng)];
    positive(rng, &s)
}

/// Runs `f` on `SHAPES` random draws; each draw builds its inputs and
/// a graph whose output is reduced to a scalar by a random probe.
fn sweep(name: &str, mut make: impl FnMut(&mut Rng) -> (Vec<Tensor<f64>>, Graph)) {
    let mut worst = 0.0f64;
    for s in 0..SHAPES {
        let mut rng = Rng::new(1000 + s);
        let (inputs, f) = make(&mut rng);
        let err = check_inputs(&inputs, H, |g, v| {
            let out = f(g, v)?;
            probe(g, out, 77 + s)
        })
        .unwrap_or_else(|e| panic!("{name} draw {s}: {e}"));
        worst = worst.max(err);
    }
    assert!(worst < TOL, "{name}: max rel err {worst:e}");
}

type Graph = Box<dyn Fn(&mut Bound<f64>, &[Var]) -> Result<Var>>;

fn graph(f: impl Fn(&mut Bound<f64>, &[Var]) -> Result<Var> + 'static) -> Graph {
    Box::new(f)
}

#[test]
fn matmul_and_transpose() {
    sweep("matmul", |r| {
        let (n, k, m) = (dim(r), dim(r), dim(r));
        (vec![normal(r, &[n, k]), normal(r, &[k, m])], graph(|g, v| g.tape.matmul(v[0], v[1])))
    });
    sweep("transpose", |r| {
        let (n, m) = (dim(r), dim(r));
        (vec![normal(r, &[n, m])], graph(|g, v| g.tape.transpose(v[0])))
    });
}

#[test]
fn elementwise_binary() {
    sweep("add", |r| {
        let s = [dim(r), dim(r)];
        (vec![normal(r, &s), normal(r, &s)], graph(|g, v| g.tape.add(v[0], v[1])))
    });
    sweep("sub", |r| {
        let s = [dim(r), dim(r)];
        (vec![normal(r, &s), normal(r, &s)], graph(|g, v| g.tape.sub(v[0], v[1])))
    });
    sweep("mul", |r| {
        let s = [dim(r), dim(r)];
        (vec![normal(r, &s), normal(r, &s)], graph(|g, v| g.tape.mul(v[0], v[1])))
    });
    sweep("div", |r| {
        let s = [dim(r), dim(r)];
        let mut b = positive(r, &s);
        for v in b.data_mut() {
            if r.uniform() < 0.5 {
                *v = -*v;
            }
        }
        (vec![normal(r, &s), b], graph(|g, v| g.tape.div(v[0], v[1])))
    });
    sweep("add_row", |r| {
        let (n, m) = (dim(r), dim(r));
        (vec![normal(r, &[n, m]), normal(r, &[m])], graph(|g, v| g.tape.add_row(v[0], v[1])))
    });
}

#[test]
fn scaling() {
    sweep("affine", |r| {
        let (a, b) = (r.range(-2.0, 2.0), r.range(-1.0, 1.0));
        (vec![mat(r)], graph(move |g, v| g.tape.affine(v[0], a, b)))
    });
    sweep("scale_var", |r| {
        (vec![mat(r), normal(r, &[1])], graph(|g, v| g.tape.scale_var(v[0], v[1])))
    });
}

#[test]
fn elementwise_unary() {
    sweep("exp", |r| (vec![mat(r)], graph(|g, v| g.tape.exp(v[0]))));
    sweep("ln", |r| (vec![pos_mat(r)], graph(|g, v| g.tape.ln(v[0]))));
    sweep("gelu", |r| {
        let mut x = mat(r);
        for v in x.data_mut() {
            *v *= 2.0;
        }
        (vec![x], graph(|g, v| g.tape.gelu(v[0])))
    });
    sweep("clamp", |r| {
        let mut x = mat(r);
        // keep every entry clear of the kinks at ±0.5
        for v in x.data_mut() {
            if (v.abs() - 0.5).abs() < 0.05 {
                *v += 0.2 * v.signum();
            }
        }
        (vec![x], graph(|g, v| g.tape.clamp(v[0], -0.5, 0.5)))
    });
}

#[test]
fn layer_norm() {
    sweep("layer_norm", |r| {
        let (n, d) = (dim(r), 2 + rng_d(r));
        (
            vec![normal(r, &[n, d]), normal(r, &[d]), normal(r, &[d])],
            graph(|g, v| g.tape.layer_norm(v[0], v[1], v[2], 1e-5)),
        )
    });
}

fn rng_d(r: &mut Rng) -> usize {
    r.below(6)
}

#[test]
fn softmax_and_renorm() {
    sweep("softmax_rows", |r| (vec![mat(r)], graph(|g, v| g.tape.softmax_rows(v[0]))));
    sweep("softmax_rows_masked", |r| {
        let (n, m) = (dim(r), 1 + dim(r));
        let mut mask: Vec<bool> = (0..n * m).map(|_| r.uniform() < 0.6).collect();
        for i in 0..n {
            mask[i * m + r.below(m)] = true;
        }
        let mask = Arc::new(mask);
        (vec![normal(r, &[n, m])], graph(move |g, v| g.tape.softmax_rows_masked(v[0], Some(mask.as_slice()))))
    });
    sweep("col_renorm", |r| (vec![pos_mat(r)], graph(|g, v| g.tape.col_renorm(v[0]))));
}

#[test]
fn unfold() {
    sweep("unfold", |r| {
        let (h, w, c) = (2 + r.below(4), 2 + r.below(4), 1 + r.below(3));
        let k = [1, 2, 3][r.below(3)];
        let stride = 1 + r.below(2);
        let geom = ConvGeom::new(h, w, c, k, stride, k / 2).unwrap();
        (vec![normal(r, &[h * w, c])], graph(move |g, v| g.tape.unfold(v[0], geom)))
    });
}

#[test]
fn gathers_and_slices() {
    sweep("gather_rows", |r| {
        let (n, c) = (dim(r), dim(r));
        // repeated indices exercise gradient accumulation
        let idx = Arc::new((0..n + 3).map(|_| r.below(n)).collect::<Vec<_>>());
        (vec![normal(r, &[n, c])], graph(move |g, v| g.tape.gather_rows(v[0], idx.clone())))
    });
    sweep("gather_table", |r| {
        let len = dim(r);
        let shape = vec![dim(r), dim(r)];
        let idx = Arc::new((0..shape[0] * shape[1]).map(|_| r.below(len)).collect::<Vec<_>>());
        (vec![normal(r, &[len])], graph(move |g, v| g.tape.gather_table(v[0], idx.clone(), shape.clone())))
    });
    sweep("concat_cols", |r| {
        let n = dim(r);
        let (ca, cb) = (dim(r), dim(r));
        (vec![normal(r, &[n, ca]), normal(r, &[n, cb])], graph(|g, v| g.tape.concat_cols(v[0], v[1])))
    });
    sweep("slice_cols", |r| {
        let (n, c) = (dim(r), 1 + dim(r));
        let start = r.below(c);
        let len = 1 + r.below(c - start);
        (vec![normal(r, &[n, c])], graph(move |g, v| g.tape.slice_cols(v[0], start, len)))
    });
    sweep("slice_rows", |r| {
        let (n, c) = (1 + dim(r), dim(r));
        let start = r.below(n);
        let len = 1 + r.below(n - start);
        (vec![normal(r, &[n, c])], graph(move |g, v| g.tape.slice_rows(v[0], start, len)))
    });
    sweep("reshape", |r| {
        let (n, c) = (dim(r), dim(r));
        (vec![normal(r, &[n, c])], graph(move |g, v| g.tape.reshape(v[0], vec![c, n])))
    });
}

#[test]
fn reductions() {
    sweep("sum_all", |r| (vec![mat(r)], graph(|g, v| g.tape.sum_all(v[0]))));
    sweep("mean_all", |r| (vec![mat(r)], graph(|g, v| g.tape.mean_all(v[0]))));
    sweep("mean_rows", |r| (vec![mat(r)], graph(|g, v| g.tape.mean_rows(v[0]))));
}

/// Random sparse pattern with at least one entry per row and column.
fn random_pattern(r: &mut Rng, n: usize, m: usize, bias_len: usize) -> Arc<Pattern> {
    let mut rows: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (i, row) in rows.iter_mut().enumerate() {
        for j in 0..m {
            if r.uniform() < 0.4 || j == i % m {
                row.push((j, r.below(bias_len.max(1))));
            }
        }
    }
    for j in 0..m {
        let i = j % n;
        if !rows[i].iter().any(|e| e.0 == j) {
            rows[i].push((j, r.below(bias_len.max(1))));
            rows[i].sort();
        }
    }
    Arc::new(Pattern::from_rows(m, rows, bias_len).unwrap())
}

#[test]
fn pattern_ops() {
    sweep("pattern_qk", |r| {
        let (n, m, d, bl) = (dim(r), dim(r), dim(r), dim(r));
        let p = random_pattern(r, n, m, bl);
        (
            vec![normal(r, &[n, d]), normal(r, &[m, d]), normal(r, &[bl]), normal(r, &[1])],
            graph(move |g, v| g.tape.pattern_qk(v[0], v[1], v[2], v[3], p.clone())),
        )
    });
    sweep("pattern_softmax", |r| {
        let (n, m) = (dim(r), dim(r));
        let p = random_pattern(r, n, m, 1);
        (vec![normal(r, &[p.nnz()])], graph(move |g, v| g.tape.pattern_softmax(v[0], p.clone())))
    });
    sweep("pattern_col_renorm", |r| {
        let (n, m) = (dim(r), dim(r));
        let p = random_pattern(r, n, m, 1);
        let eps = [0.0, 1e-3, 0.1][r.below(3)];
        (vec![positive(r, &[p.nnz()])], graph(move |g, v| g.tape.pattern_col_renorm(v[0], p.clone(), eps)))
    });
    sweep("pattern_apply", |r| {
        let (n, m, d) = (dim(r), dim(r), dim(r));
        let p = random_pattern(r, n, m, 1);
        (vec![normal(r, &[p.nnz()]), normal(r, &[m, d])], graph(move |g, v| g.tape.pattern_apply(v[0], v[1], p.clone())))
    });
    sweep("pattern_apply_t", |r| {
        let (n, m, d) = (dim(r), dim(r), dim(r));
        let p = random_pattern(r, n, m, 1);
        (vec![normal(r, &[p.nnz()]), normal(r, &[n, d])], graph(move |g, v| g.tape.pattern_apply_t(v[0], v[1], p.clone())))
    });
}

#[test]
fn cross_entropy() {
    sweep("cross_entropy", |r| {
        let (n, c) = (dim(r), 1 + dim(r));
        let mut t: Vec<Option<usize>> = (0..n).map(|_| if r.uniform() < 0.25 { None } else { Some(r.below(c)) }).collect();
        t[0] = Some(r.below(c));
        let t = Arc::new(t);
        (vec![normal(r, &[n, c])], graph(move |g, v| g.tape.cross_entropy(v[0], t.clone())))
    });
}

#[test]
fn composite_graph_with_fan_out() {
    sweep("composite", |r| {
        let (n, d) = (dim(r), 2 + dim(r));
        (
            vec![normal(r, &[n, d]), normal(r, &[d, d]), normal(r, &[d])],
            graph(|g, v| {
                let h = g.tape.matmul(v[0], v[1])?;
                let h = g.tape.add_row(h, v[2])?;
                let a = g.tape.gelu(h)?;
                let s = g.tape.softmax_rows(h)?;
                let m = g.tape.mul(a, s)?;
                g.tape.add(m, v[0])
            }),
        )
    });
}

fn softmax(xs: &[f64], n: usize, m: usize) -> Vec<f64> {
    let store = ParamStore::new(0);
    let mut g = Bound::<f64>::inference(&store);
    let x = g.input(Tensor::new(vec![n, m], xs.to_vec()).unwrap()).unwrap();
    let y = g.tape.softmax_rows(x).unwrap();
    g.value(y).data().to_vec()
}

fn matrix(max: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max, 1..=max).prop_flat_map(|(n, m)| (Just(n), Just(m), prop::collection::vec(-30.0f64..30.0, n * m)))
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one((n, m, xs) in matrix(8)) {
        let y = softmax(&xs, n, m);
        for row in y.chunks(m) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant((n, m, xs) in matrix(8), shift in -100.0f64..100.0) {
        let a = softmax(&xs, n, m);
        let shifted: Vec<f64> = xs.iter().map(|v| v + shift).collect();
        let b = softmax(&shifted, n, m);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes(n in 1usize..6, d in 2usize..16, seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let xs: Vec<f64> = (0..n * d).map(|_| rng.normal() * 4.0 + 3.0).collect();
        let store = ParamStore::new(0);
        let mut g = Bound::<f64>::inference(&store);
        let x = g.input(Tensor::new(vec![n, d], xs.clone()).unwrap()).unwrap();
        let gamma = g.input(Tensor::ones(vec![d])).unwrap();
        let beta = g.input(Tensor::zeros(vec![d])).unwrap();
        let y = g.tape.layer_norm(x, gamma, beta, 1e-9).unwrap();
        for (row, src) in g.value(y).data().chunks(d).zip(xs.chunks(d)) {
            let spread = src.iter().cloned().fold(f64::MIN, f64::max) - src.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn csr_products_match_dense(n in 1usize..7, k in 1usize..7, m in 1usize..7, seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let sparse = |r: usize, c: usize, rng: &mut Rng| {
            Tensor::from_fn(vec![r, c], |_| if rng.uniform() < 0.5 { 0.0 } else { rng.normal() })
        };
        let a = sparse(n, k, &mut rng);
        let b = sparse(k, m, &mut rng);
        let (ca, cb) = (CsrMatrix::from_dense(&a), CsrMatrix::from_dense(&b));
        let want = a.matmul(&b).unwrap();
        prop_assert!(ca.matmul(&cb).unwrap().to_dense().max_abs_diff(&want) < 1e-12);
        prop_assert!(ca.matmul_dense(&b).unwrap().max_abs_diff(&want) < 1e-12);
        prop_assert!(ca.transpose().to_dense().max_abs_diff(&a.transpose2()) == 0.0);
    }
}
