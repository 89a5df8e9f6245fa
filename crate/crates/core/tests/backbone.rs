mod common;

use std::sync::Arc;

use common::{probe, randomize};
use nsvt_core::assignment::compose_ups;
use nsvt_core::backbone::{backbone_forward, count_params, neighborhood_pattern, Backbone, BackboneConfig, EncoderBlock, ForwardOptions, GroupingKind};
use nsvt_core::grouping::Path;
use nsvt_core::numerics::gradcheck::check_params;
use nsvt_core::numerics::{Bound, ParamStore, Rng, Tensor};
use nsvt_core::Error;

fn image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
    Tensor::new(vec![h, w, 3], Rng::new(seed).normal_vec(h * w * 3, 1.0)).unwrap()
}

fn model(cfg: &BackboneConfig, seed: u64, std: f64) -> (Backbone, ParamStore) {
    let mut store = ParamStore::new(seed);
    let m = Backbone::new(&mut store, cfg).unwrap();
    randomize(&mut store, &mut Rng::new(seed + 1), std);
    (m, store)
}

fn zero(store: &mut ParamStore, name: &str) {
    let id = store.find(name).unwrap_or_else(|| panic!("missing {name}"));
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
}

/// Parameter total from closed-form per-module sizes.
fn enumerate(cfg: &BackboneConfig) -> usize {
    let lin = |i: usize, o: usize| i * o + o;
    let ln = |d: usize| 2 * d;
    let hid = |d: usize, r: f64| ((d as f64) * r).round() as usize;
    let mut n = 16 * cfg.in_chans * cfg.stages[0].dim + cfg.stages[0].dim + ln(cfg.stages[0].dim);
    for (s, st) in cfg.stages.iter().enumerate() {
        let d = st.dim;
        let h = hid(d, st.mlp_ratio);
        let side = 2 * st.attn_window - 1;
        let block = ln(d) + lin(d, 3 * d) + st.heads() * side * side + lin(d, d) + ln(d) + lin(d, h) + lin(h, d);
        n += st.depth * block;
        if s < 3 {
            let (di, dout) = (d, cfg.stages[s + 1].dim);
            let conv = 9 * di * dout + dout;
            n += match cfg.grouping[s] {
                GroupingKind::Off => conv + ln(dout),
                kind => {
                    let t = (cfg.image_size / 32) << (2 - s);
                    let bias = if kind == GroupingKind::Dense { (2 * t - 1) * (2 * t - 1) } else { 9 };
                    let h = hid(dout, cfg.stages[s + 1].mlp_ratio);
                    conv + ln(dout) + lin(dout, dout) + 2 * lin(di, dout) + bias + 1 + ln(dout) + lin(dout, h) + lin(h, dout) + ln(dout)
                }
            };
        }
    }
    n + lin(cfg.stages[3].dim, cfg.num_classes)
}

#[test]
fn toy_count_matches_enumeration() {
    let mut cfg = BackboneConfig::toy();
    assert_eq!(count_params(&cfg).unwrap().total, enumerate(&cfg));
    cfg.grouping = [GroupingKind::Off, GroupingKind::Local, GroupingKind::Off];
    assert_eq!(count_params(&cfg).unwrap().total, enumerate(&cfg));
    let mut store = ParamStore::new(0);
    Backbone::new(&mut store, &cfg).unwrap();
    assert_eq!(store.num_scalars(), enumerate(&cfg));
}

#[test]
fn named_variant_counts() {
    for (name, target) in [("tiny", 29.0e6), ("base", 94.0e6)] {
        let cfg = BackboneConfig::variant(name).unwrap();
        let c = count_params(&cfg).unwrap();
        assert_eq!(c.total, enumerate(&cfg));
        let rel = (c.total as f64 - target).abs() / target;
        assert!(rel <= 0.15, "{name}: {} ({:?})", c.total, c.breakdown);
        assert_eq!(c.breakdown.iter().map(|(_, n)| n).sum::<usize>(), c.total);
    }
}

#[test]
fn geometry_at_224() {
    let mut cfg = BackboneConfig::toy();
    cfg.image_size = 224;
    let (m, store) = model(&cfg, 5, 0.05);
    let out = backbone_forward(&m, &store, &image(1, 224, 224), 224, 224, &ForwardOptions::default()).unwrap();
    let sides: Vec<(usize, usize)> = out.stage_tokens.iter().map(|t| (t.h, t.w)).collect();
    assert_eq!(sides, vec![(56, 56), (28, 28), (14, 14), (7, 7)]);
    let links: Vec<(usize, usize)> = out.chain.links().iter().map(|l| (l.n_in(), l.n_out())).collect();
    assert_eq!(links, vec![(3136, 784), (784, 196), (196, 49)]);
    let a = compose_ups(&out.chain, 4, 1).unwrap();
    assert_eq!(a.shape(), &[3136, 49]);
    for s in a.row_sums() {
        assert!((s - 1.0).abs() < 1e-9);
    }
    assert_eq!(out.pooled.shape(), &[64]);
}

#[test]
fn stage_resolution_law() {
    let mut cfg = BackboneConfig::toy();
    cfg.image_size = 128;
    let (m, store) = model(&cfg, 2, 0.05);
    for (h, w) in [(32, 32), (64, 32), (96, 128)] {
        let out = backbone_forward(&m, &store, &image(3, h, w), h, w, &ForwardOptions::default()).unwrap();
        for (i, t) in out.stage_tokens.iter().enumerate() {
            assert_eq!((t.h, t.w), (h >> (i + 2), w >> (i + 2)));
        }
    }
}

#[test]
fn indivisible_input_is_config_error() {
    let (m, store) = model(&BackboneConfig::toy(), 0, 0.02);
    let err = backbone_forward(&m, &store, &image(0, 48, 64), 48, 64, &ForwardOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn zero_patch_weights_give_beta_tokens() {
    let (m, mut store) = model(&BackboneConfig::toy(), 4, 0.3);
    zero(&mut store, "patch_embed.conv.weight");
    zero(&mut store, "patch_embed.conv.bias");
    let beta = store.get(store.find("patch_embed.ln.beta").unwrap()).data().to_vec();
    let mut g = Bound::<f64>::inference(&store);
    let x = g.input(image(9, 64, 64).reshape(vec![4096, 3]).unwrap()).unwrap();
    let (y, h, w) = m.patch_embed(&mut g, x, 64, 64).unwrap();
    assert_eq!((h, w), (16, 16));
    let t = g.value(y);
    for r in 0..256 {
        assert_eq!(t.row(r), &beta[..]);
    }
}

fn block_setup(dim: usize, heads: usize, seed: u64) -> (EncoderBlock, ParamStore) {
    let mut store = ParamStore::new(seed);
    let b = EncoderBlock::new(&mut store, "blk", dim, heads, 3, 2.0);
    randomize(&mut store, &mut Rng::new(seed), 0.3);
    (b, store)
}

#[test]
fn zero_residual_branches_are_identity() {
    let (blk, mut store) = block_setup(8, 2, 1);
    for n in ["blk.proj.weight", "blk.proj.bias", "blk.mlp.fc2.weight", "blk.mlp.fc2.bias"] {
        zero(&mut store, n);
    }
    let pat = Arc::new(neighborhood_pattern(5, 6, 3).unwrap());
    let x = Tensor::new(vec![30, 8], Rng::new(2).normal_vec(240, 1.0)).unwrap();
    let mut g = Bound::<f64>::inference(&store);
    let xv = g.input(x.clone()).unwrap();
    let y = blk.forward(&mut g, xv, &pat).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn block_preserves_shape_and_falls_back_to_full_attention() {
    for (h, w) in [(2, 2), (3, 9), (8, 8)] {
        let (blk, store) = block_setup(8, 2, 3);
        let pat = Arc::new(neighborhood_pattern(h, w, 3).unwrap());
        for i in 0..h * w {
            let expect = h.min(3) * w.min(3);
            assert_eq!(pat.row_cols(i).len(), expect);
        }
        let mut g = Bound::<f64>::inference(&store);
        let xv = g.input(Tensor::new(vec![h * w, 8], Rng::new(4).normal_vec(h * w * 8, 1.0)).unwrap()).unwrap();
        let y = blk.forward(&mut g, xv, &pat).unwrap();
        assert_eq!(g.value(y).shape(), &[h * w, 8]);
    }
}

#[test]
fn gradcheck_encoder_block() {
    let (blk, store) = block_setup(8, 2, 7);
    let pat = Arc::new(neighborhood_pattern(5, 5, 3).unwrap());
    let x = Tensor::new(vec![25, 8], Rng::new(8).normal_vec(200, 1.0)).unwrap();
    let report = check_params(&store, 10, 1e-5, 1, |g| {
        let xv = g.input(x.clone())?;
        let y = blk.forward(g, xv, &pat)?;
        probe(g, y, 11)
    })
    .unwrap();
    assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
}

fn toy_gradcheck(cfg: &BackboneConfig, path: Path) -> f64 {
    let (m, store) = model(cfg, 21, 0.2);
    let img = image(22, 64, 64).reshape(vec![4096, 3]).unwrap();
    let report = check_params(&store, 3, 1e-5, 2, |g| {
        let x = g.input(img.clone())?;
        let v = m.forward(g, x, 64, 64, &ForwardOptions { path })?;
        let logits = m.classification_logits(g, v.pooled)?;
        let a = probe(g, logits, 1)?;
        let b = probe(g, v.stages[1], 2)?;
        g.tape.add(a, b)
    })
    .unwrap();
    report.max_rel_err()
}

#[test]
fn gradcheck_toy_backbone_sparse() {
    let e = toy_gradcheck(&BackboneConfig::toy(), Path::Sparse { eps: 1e-6 });
    assert!(e < 1e-4, "{e}");
}

#[test]
fn gradcheck_toy_backbone_conv_baseline() {
    let mut cfg = BackboneConfig::toy();
    cfg.grouping = [GroupingKind::Off; 3];
    let e = toy_gradcheck(&cfg, Path::Reference);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn zero_head_is_uniform() {
    let (m, mut store) = model(&BackboneConfig::toy(), 6, 0.1);
    zero(&mut store, "head.weight");
    zero(&mut store, "head.bias");
    let mut g = Bound::<f64>::inference(&store);
    let x = g.input(image(1, 64, 64).reshape(vec![4096, 3]).unwrap()).unwrap();
    let v = m.forward(&mut g, x, 64, 64, &ForwardOptions::default()).unwrap();
    let l = m.classification_logits(&mut g, v.pooled).unwrap();
    let p = g.tape.softmax_rows(l).unwrap();
    assert!(g.value(p).data().iter().all(|&q| (q - 0.25).abs() < 1e-15));
}

#[test]
fn forward_is_deterministic() {
    let cfg = BackboneConfig::toy();
    let run = || {
        let (m, store) = model(&cfg, 13, 0.1);
        backbone_forward(&m, &store, &image(2, 64, 64), 64, 64, &ForwardOptions::default()).unwrap()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.stage_tokens.iter().zip(&b.stage_tokens) {
        assert_eq!(x.tokens.data(), y.tokens.data());
    }
    for (x, y) in a.chain.links().iter().zip(b.chain.links()) {
        assert_eq!(x.ups, y.ups);
        assert_eq!(x.down, y.down);
    }
    assert_eq!(a.pooled.data(), b.pooled.data());
}

#[test]
fn conv_toggle_preserves_shapes() {
    let base = BackboneConfig::toy();
    let (m0, s0) = model(&base, 3, 0.1);
    let ref_out = backbone_forward(&m0, &s0, &image(5, 64, 64), 64, 64, &ForwardOptions::default()).unwrap();
    for mask in 0..8u32 {
        let mut cfg = base.clone();
        for k in 0..3 {
            if mask & (1 << k) != 0 {
                cfg.grouping[k] = GroupingKind::Off;
            }
        }
        let (m, s) = model(&cfg, 3, 0.1);
        let out = backbone_forward(&m, &s, &image(5, 64, 64), 64, 64, &ForwardOptions::default()).unwrap();
        for (a, b) in out.stage_tokens.iter().zip(&ref_out.stage_tokens) {
            assert_eq!((a.h, a.w, a.c), (b.h, b.w, b.c));
        }
        for l in out.chain.links() {
            assert!(l.ups_row_error() < 1e-12);
            assert!(l.down_col_error() < 1e-9);
        }
    }
}

#[test]
fn reference_and_sparse_backbones_agree() {
    let (m, store) = model(&BackboneConfig::toy(), 8, 0.2);
    let img = image(4, 64, 64);
    let a = backbone_forward(&m, &store, &img, 64, 64, &ForwardOptions { path: Path::Reference }).unwrap();
    let b = backbone_forward(&m, &store, &img, 64, 64, &ForwardOptions { path: Path::Sparse { eps: 0.0 } }).unwrap();
    assert!(a.pooled.max_abs_diff(&b.pooled) < 1e-9);
}
