use std::collections::HashSet;

use nsvt_core::heads::PanopticVars;
use nsvt_core::model::{Model, ModelConfig};
use nsvt_core::numerics::{check_inputs, Bound, ParamStore, Rng, Tensor, Var};
use nsvt_core::train::data::{patch_coverage, patch_labels};
use nsvt_core::train::fit::example_grads;
use nsvt_core::train::losses::{canonical_sum, cross_entropy, mask_loss_value, matching_cost};
use nsvt_core::train::*;
use nsvt_core::Error;

fn scalar(g: &Bound<f64>, v: Var) -> f64 {
    g.value(v).data()[0]
}

#[test]
fn cross_entropy_limits_and_gradient() {
    let store = ParamStore::new(0);
    let mut g = Bound::<f64>::inference(&store);
    let sharp = g.input(Tensor::from_rows(&[vec![60.0, -60.0, -60.0], vec![-60.0, -60.0, 60.0]]).unwrap()).unwrap();
    let l = cross_entropy(&mut g, sharp, &[Some(0), Some(2)]).unwrap();
    assert!(scalar(&g, l) < 1e-40);
    let flat = g.input(Tensor::zeros([3, 5])).unwrap();
    let l = cross_entropy(&mut g, flat, &[Some(1), None, Some(4)]).unwrap();
    assert!((scalar(&g, l) - 5f64.ln()).abs() < 1e-15);
    let l = cross_entropy(&mut g, flat, &[None, None, None]).unwrap();
    assert_eq!(scalar(&g, l), 0.0);

    let mut rng = Rng::new(1);
    let x = Tensor::new(vec![6, 4], rng.normal_vec(24, 2.0)).unwrap();
    let t = vec![Some(0), Some(3), None, Some(1), Some(1), Some(2)];
    let e = check_inputs(&[x], 1e-5, |g, v| cross_entropy(g, v[0], &t)).unwrap();
    assert!(e < 1e-5, "{e}");
}

#[test]
fn mask_loss_limits_and_gradient() {
    let store = ParamStore::new(0);
    let gt = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let mut g = Bound::<f64>::inference(&store);
    let same = g.input(Tensor::new(vec![6], gt.clone()).unwrap()).unwrap();
    let l = mask_loss(&mut g, same, &gt).unwrap();
    assert!(scalar(&g, l) < 1e-5);
    let inv: Vec<f64> = gt.iter().map(|v| 1.0 - v).collect();
    let opp = g.input(Tensor::new(vec![6], inv.clone()).unwrap()).unwrap();
    let l = mask_loss(&mut g, opp, &gt).unwrap();
    assert!(scalar(&g, l) > 10.0);
    assert!((mask_loss_value(&inv, &gt) - scalar(&g, l)).abs() < 1e-12);
    let empty = vec![0.0; 6];
    let p = g.input(Tensor::full([6], 0.3)).unwrap();
    let l = mask_loss(&mut g, p, &empty).unwrap();
    assert!(scalar(&g, l).is_finite());

    let mut rng = Rng::new(2);
    for _ in 0..5 {
        let p = Tensor::new(vec![10, 1], (0..10).map(|_| rng.range(0.05, 0.95)).collect()).unwrap();
        let t: Vec<f64> = (0..10).map(|_| rng.uniform()).collect();
        let e = check_inputs(&[p], 1e-6, |g, v| mask_loss(g, v[0], &t)).unwrap();
        assert!(e < 1e-5, "{e}");
    }
}

fn rand_cost(rng: &mut Rng, n: usize, m: usize) -> Tensor<f64> {
    Tensor::new(vec![n, m], (0..n * m).map(|_| rng.range(0.0, 10.0)).collect()).unwrap()
}

#[test]
fn hungarian_matches_brute_force() {
    let mut rng = Rng::new(3);
    for _ in 0..50 {
        let c = rand_cost(&mut rng, 6, 6);
        assert_eq!(hungarian(&c).unwrap(), brute_force(&c).unwrap());
    }
    for n in 1..=7 {
        for m in 1..=7 {
            for _ in 0..3 {
                let c = rand_cost(&mut rng, n, m);
                let (a, b) = (hungarian(&c).unwrap(), brute_force(&c).unwrap());
                assert_eq!(a, b, "{n}x{m}");
                assert_eq!(a.pairs.len(), n.min(m));
                let preds: HashSet<_> = a.pairs.iter().map(|p| p.0).collect();
                let gts: HashSet<_> = a.pairs.iter().map(|p| p.1).collect();
                assert_eq!((preds.len(), gts.len()), (n.min(m), n.min(m)));
            }
        }
    }
}

#[test]
fn hungarian_with_ties_is_optimal() {
    let mut rng = Rng::new(4);
    for _ in 0..30 {
        let c = Tensor::new(vec![5, 4], (0..20).map(|_| rng.below(3) as f64).collect()).unwrap();
        assert_eq!(hungarian(&c).unwrap().total, brute_force(&c).unwrap().total);
    }
}

fn leaf(g: &mut Bound<f64>, t: &Tensor<f64>) -> Var {
    g.tape.param(t.clone()).unwrap()
}

struct PanCase {
    logits: Tensor<f64>,
    masks: Tensor<f64>,
    gt: Vec<GtInstance>,
}

fn pan_case(rng: &mut Rng, k: usize, n_gt: usize, n: usize, n_thing: usize) -> PanCase {
    let logits = Tensor::new(vec![k, n_thing + 1], rng.normal_vec(k * (n_thing + 1), 1.5)).unwrap();
    let raw = Tensor::new(vec![n, k], rng.normal_vec(n * k, 1.0)).unwrap();
    let masks = nsvt_core::numerics::ops::softmax_rows(&raw).unwrap();
    let gt = (0..n_gt).map(|_| GtInstance { thing: rng.below(n_thing), mask: (0..n).map(|_| (rng.uniform() < 0.4) as u8 as f64).collect() }).collect();
    PanCase { logits, masks, gt }
}

fn pan_value(c: &PanCase) -> f64 {
    let store = ParamStore::new(0);
    let mut g = Bound::<f64>::inference(&store);
    let (cl, m) = (g.input(c.logits.clone()).unwrap(), g.input(c.masks.clone()).unwrap());
    let out = PanopticVars { class_logits: cl, masks3: m, masks: m };
    let (l, _) = panoptic_loss(&mut g, &out, &c.gt).unwrap();
    scalar(&g, l)
}

fn permute_cols(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    Tensor::from_fn([t.rows(), t.cols()], |e| t.get2(e / t.cols(), perm[e % t.cols()]))
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    Tensor::from_fn([t.rows(), t.cols()], |e| t.get2(perm[e / t.cols()], e % t.cols()))
}

#[test]
fn panoptic_loss_is_permutation_invariant() {
    let mut rng = Rng::new(5);
    for trial in 0..40 {
        let k = 2 + rng.below(5);
        let n_gt = rng.below(k + 2);
        let c = pan_case(&mut rng, k, n_gt, 12, 3);
        let base = pan_value(&c);
        let mut perm: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut perm);
        let p = PanCase { logits: permute_rows(&c.logits, &perm), masks: permute_cols(&c.masks, &perm), gt: c.gt.clone() };
        assert_eq!(pan_value(&p), base, "trial {trial}");
        let mut gt = c.gt.clone();
        rng.shuffle(&mut gt);
        let q = PanCase { logits: c.logits.clone(), masks: c.masks.clone(), gt };
        assert_eq!(pan_value(&q), base, "trial {trial}");
    }
}

#[test]
fn panoptic_loss_equals_brute_force_recomputation() {
    let mut rng = Rng::new(6);
    for _ in 0..30 {
        let k = 1 + rng.below(5);
        let n_gt = rng.below(6);
        let c = pan_case(&mut rng, k, n_gt, 10, 2);
        let cost = matching_cost(&c.logits, &c.masks, &c.gt).unwrap();
        let m = brute_force(&cost).unwrap();
        let probs = nsvt_core::numerics::ops::softmax_rows(&c.logits).unwrap();
        let gt_of = m.gt_of(k);
        let mut total = 0.0;
        for (i, g) in gt_of.iter().enumerate() {
            total += match g {
                Some(j) => cost.get2(i, *j),
                None => -probs.get2(i, 2).ln(),
            };
        }
        assert!((pan_value(&c) - total / k as f64).abs() < 1e-10);
    }
}

#[test]
fn perfect_predictions_leave_only_no_object_terms() {
    let n = 16;
    let gt = vec![
        GtInstance { thing: 0, mask: (0..n).map(|i| (i < 5) as u8 as f64).collect() },
        GtInstance { thing: 1, mask: (0..n).map(|i| (i >= 9) as u8 as f64).collect() },
    ];
    let masks = Tensor::from_fn([n, 3], |e| {
        let (i, k) = (e / 3, e % 3);
        let owner = if i < 5 { 0 } else if i >= 9 { 1 } else { 2 };
        if k == owner { 1.0 } else { 0.0 }
    });
    let logits = Tensor::from_rows(&[vec![40.0, 0.0, 0.0], vec![0.0, 40.0, 0.0], vec![0.0, 0.0, 40.0]]).unwrap();
    let v = pan_value(&PanCase { logits: logits.clone(), masks: masks.clone(), gt: gt.clone() });
    assert!(v < 1e-5, "{v}");
    let none = pan_value(&PanCase { logits, masks, gt: Vec::new() });
    assert!(none > 10.0);
}

#[test]
fn panoptic_loss_gradcheck_and_deep_average() {
    let mut rng = Rng::new(7);
    for _ in 0..4 {
        let c = pan_case(&mut rng, 4, 2, 9, 2);
        let raw = Tensor::new(vec![9, 4], rng.normal_vec(36, 1.0)).unwrap();
        let e = check_inputs(&[c.logits.clone(), raw], 1e-5, |g, v| {
            let m = g.tape.softmax_rows(v[1])?;
            let out = PanopticVars { class_logits: v[0], masks3: m, masks: m };
            panoptic_loss(g, &out, &c.gt).map(|p| p.0)
        })
        .unwrap();
        assert!(e < 1e-5, "{e}");
    }
    let c = pan_case(&mut rng, 3, 2, 8, 2);
    let store = ParamStore::new(0);
    let mut g = Bound::<f64>::inference(&store);
    let (cl, m) = (leaf(&mut g, &c.logits), leaf(&mut g, &c.masks));
    let out = PanopticVars { class_logits: cl, masks3: m, masks: m };
    let deep = panoptic_training_loss(&mut g, &[out.clone(), out.clone()], &c.gt).unwrap();
    let (one, _) = panoptic_loss(&mut g, &out, &c.gt).unwrap();
    assert!((scalar(&g, deep) - scalar(&g, one)).abs() < 1e-15);
    assert!(panoptic_training_loss(&mut g, &[], &c.gt).is_err());
}

#[test]
fn canonical_sum_ignores_order() {
    let store = ParamStore::new(0);
    let vals = [0.1, 1e-17, 0.7, 1e16, -3.0];
    let mut g = Bound::<f64>::inference(&store);
    let vs: Vec<Var> = vals.iter().map(|v| g.input(Tensor::scalar(*v)).unwrap()).collect();
    let a = canonical_sum(&mut g, vs.clone()).unwrap();
    let b = canonical_sum(&mut g, vs.into_iter().rev().collect()).unwrap();
    assert_eq!(scalar(&g, a).to_bits(), scalar(&g, b).to_bits());
}

#[test]
fn synth_is_deterministic() {
    let a = synth_shapes(42, 64, 64, 4).unwrap();
    let b = synth_shapes(42, 64, 64, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.image, synth_shapes(43, 64, 64, 4).unwrap().image);
    assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(matches!(synth_shapes(0, 48, 64, 3), Err(Error::Config(_))));
}

#[test]
fn synth_annotations_are_exact() {
    for seed in 0..1000 {
        let s = synth_shapes(seed, 32, 32, 5).unwrap();
        assert!(!s.instances.is_empty() && s.instances.len() <= 5);
        let mut cover = vec![0u8; 32 * 32];
        for inst in &s.instances {
            for (p, &m) in inst.mask.iter().enumerate() {
                if m {
                    cover[p] += 1;
                    assert_eq!(s.semantic[p] as usize, inst.class);
                }
            }
        }
        for p in 0..32 * 32 {
            assert!(cover[p] <= 1);
            assert_eq!(cover[p] == 1, s.semantic[p] != 0);
        }
    }
}

#[test]
fn synth_class_histogram_covers_all_classes() {
    let mut seen = [0usize; 4];
    for seed in 0..10_000 {
        let s = synth_shapes(seed, 32, 32, 3).unwrap();
        for inst in &s.instances {
            seen[inst.class] += 1;
        }
        seen[0] += s.semantic.contains(&0) as usize;
    }
    assert!(seen.iter().all(|&c| c > 1000), "{seen:?}");
}

#[test]
fn patch_targets_use_majority() {
    let mut labels = vec![0u8; 64];
    labels[..3].copy_from_slice(&[2, 2, 2]);
    labels[8..11].copy_from_slice(&[2, 2, 2]);
    labels[16] = 2;
    labels[24] = 1;
    labels[25] = 1;
    let p = patch_labels(&labels, 8, 8, 4, 3);
    assert_eq!(p[0], 0);
    labels[17] = 2;
    labels[18] = 2;
    let p = patch_labels(&labels, 8, 8, 4, 3);
    assert_eq!(p[0], 2);
    let mask: Vec<bool> = labels.iter().map(|&l| l == 2).collect();
    assert_eq!(patch_coverage(&mask, 8, 8, 4)[0], 9.0 / 16.0);
}

fn toy_model(seed: u64, n_classes: usize) -> (Model, ParamStore) {
    let mut cfg = ModelConfig::toy();
    cfg.semantic_classes = n_classes;
    cfg.thing_classes = (1..n_classes).collect();
    let mut store = ParamStore::new(seed);
    (Model::new(&mut store, &cfg).unwrap(), store)
}

fn semantic_data(n: usize, classes: usize) -> Vec<Example> {
    synth_dataset(11, n, 64, 64, 2, classes, &(1..classes).collect::<Vec<_>>()).unwrap()
}

#[test]
fn zero_lr_keeps_parameters() {
    let (m, mut store) = toy_model(1, 4);
    let before = store.clone();
    let data = semantic_data(4, 4);
    let opts = FitOptions { steps: 3, batch: 2, optim: AdamWConfig { lr: 0.0, ..Default::default() }, ..Default::default() };
    fit(&m, &mut store, &data, Task::Semantic, &opts, |_| {}).unwrap();
    for (a, b) in store.entries().iter().zip(before.entries()) {
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }
}

fn params_after(threads: usize, task: Task) -> Vec<f64> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let (m, mut store) = toy_model(2, 4);
        let data = semantic_data(6, 4);
        let opts = FitOptions { steps: 3, batch: 3, seed: 5, ..Default::default() };
        fit(&m, &mut store, &data, task, &opts, |_| {}).unwrap();
        store.entries().iter().flat_map(|e| e.value.data().to_vec()).collect()
    })
}

#[test]
fn fit_is_reproducible_across_thread_counts() {
    let a = params_after(1, Task::Semantic);
    assert_eq!(a, params_after(1, Task::Semantic));
    assert_eq!(a, params_after(3, Task::Semantic));
    let p = params_after(2, Task::Panoptic);
    assert_eq!(p, params_after(1, Task::Panoptic));
}

#[test]
fn fixed_batch_loss_decreases_for_most_seeds() {
    let data = semantic_data(2, 4);
    let mut ok = 0;
    for seed in 0..10 {
        let (m, mut store) = toy_model(100 + seed, 4);
        let opts = FitOptions { steps: 50, batch: 2, seed, ..Default::default() };
        let rep = fit(&m, &mut store, &data, Task::Semantic, &opts, |_| {}).unwrap();
        let first = rep.records[0].loss;
        let last = rep.records.last().unwrap().loss;
        ok += (last <= first) as usize;
    }
    assert!(ok >= 9, "{ok}/10");
}

#[test]
fn nan_parameters_abort_with_step() {
    let (m, mut store) = toy_model(3, 4);
    let id = store.find("head.weight").unwrap();
    store.get_mut(id).data_mut()[0] = f64::NAN;
    let id = store.find("sem.main.fc1.weight").unwrap();
    store.get_mut(id).data_mut()[0] = f64::NAN;
    let data = semantic_data(2, 4);
    let err = fit(&m, &mut store, &data, Task::Semantic, &FitOptions { steps: 2, batch: 1, ..Default::default() }, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
}

#[test]
fn report_lines_are_json() {
    let (m, mut store) = toy_model(4, 4);
    let data = semantic_data(2, 4);
    let rep = fit(&m, &mut store, &data, Task::Semantic, &FitOptions { steps: 2, batch: 1, ..Default::default() }, |_| {}).unwrap();
    let text = rep.to_jsonl();
    assert_eq!(text.lines().count(), 2);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, vec!["step", "loss", "metric", "wallclock_ms"]);
    }
    assert!(rep.final_metrics.miou.is_some());
}

#[test]
fn panoptic_training_step_runs() {
    let (m, store) = toy_model(5, 4);
    let data = semantic_data(2, 4);
    let (l, g) = example_grads(&m, &store, &data[0], Task::Panoptic, &FitOptions::default()).unwrap();
    assert!(l.is_finite() && g.global_norm() > 0.0);
    let met = evaluate(&m, &store, &data, Task::Panoptic, FitOptions::default().path).unwrap();
    assert!((0.0..=1.0).contains(&met.pq.unwrap()));
}

fn color_set(n: usize) -> Vec<Example> {
    let mut rng = Rng::new(9);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let base = if label == 0 { [0.8, 0.25, 0.2] } else { [0.2, 0.3, 0.8] };
            let img: Vec<f64> = (0..64 * 64 * 3).map(|e| (base[e % 3] + 0.1 * rng.normal()).clamp(0.0, 1.0)).collect();
            Example::classification(Tensor::new(vec![64, 64, 3], img).unwrap(), 64, 64, label).unwrap()
        })
        .collect()
}

#[test]
fn mean_color_classes_are_learned() {
    let mut cfg = ModelConfig::toy();
    cfg.backbone.num_classes = 2;
    let mut store = ParamStore::new(6);
    let m = Model::new(&mut store, &cfg).unwrap();
    let data = color_set(16);
    let mut steps = 0;
    let mut acc = 0.0;
    while steps < 500 {
        let opts = FitOptions { steps: 25, batch: 4, seed: steps as u64, ..Default::default() };
        let rep = fit(&m, &mut store, &data, Task::Classification, &opts, |_| {}).unwrap();
        steps += 25;
        acc = rep.final_metrics.accuracy.unwrap();
        if acc == 1.0 {
            break;
        }
    }
    assert_eq!(acc, 1.0, "after {steps} steps");
}

#[test]
fn two_color_semantic_task_is_learned() {
    let (m, mut store) = toy_model(7, 2);
    let data = semantic_data(64, 2);
    let mut best = 0.0;
    let mut steps = 0;
    while steps < 2000 {
        let opts = FitOptions { steps: 100, batch: 8, seed: steps as u64, ..Default::default() };
        let rep = fit(&m, &mut store, &data, Task::Semantic, &opts, |_| {}).unwrap();
        steps += 100;
        best = rep.final_metrics.pixel_accuracy.unwrap();
        if best >= 0.95 {
            break;
        }
    }
    assert!(best >= 0.95, "{best} after {steps} steps");
}
