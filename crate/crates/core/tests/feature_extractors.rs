mod common;

use common::{gradient_error, randn, rng, scalarize};
use ocnet_core::backbone::global_pool;
use ocnet_core::feature_extractors::{
    center_focus, center_window, converter, extract_all, split_parts, CenterFocus, Converter, FeatureExtractors,
    PartSplitSpec,
};
use ocnet_core::graph::{Graph, Mode};
use ocnet_core::{Error, FeatureMap, ParamStore, Tensor};
use proptest::prelude::*;

fn map_from(t: Tensor) -> FeatureMap {
    FeatureMap::new(t).unwrap()
}

fn at(t: &Tensor, n: usize, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((n * s[1] + c) * s[2] + y) * s[3] + x]
}

fn converter_with_random_params(c: usize, d: usize, groups: usize, seed: u64) -> (Converter, ParamStore) {
    let cm = Converter::new("cm", c, d, groups).unwrap();
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    cm.init_params(&mut store, &mut r);
    store.insert("cm.bias", randn(&[d], &mut r));
    (cm, store)
}

#[test]
fn single_group_matches_dense_projection_then_pool() {
    let (c, d, h, w) = (6, 4, 3, 2);
    let (cm, store) = converter_with_random_params(c, d, 1, 1);
    let map = randn(&[2, c, h, w], &mut rng(2));
    let out = converter(&map_from(map.clone()), &cm, &store).unwrap();
    let wt = store.get("cm.weight").unwrap();
    let b = store.get("cm.bias").unwrap();
    for n in 0..2 {
        for o in 0..d {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let mut z = b.data()[o];
                    for i in 0..c {
                        z += wt.data()[o * c + i] * at(&map, n, i, y, x);
                    }
                    acc += z;
                }
            }
            let expect = acc / (h * w) as f64;
            assert!((out.row(n)[o] - expect).abs() < 1e-6);
        }
    }
}

#[test]
fn identity_weights_reduce_to_global_pool() {
    let c = 5;
    let cm = Converter::new("cm", c, c, c).unwrap();
    let mut store = ParamStore::new();
    store.insert("cm.weight", Tensor::ones(&[c, 1, 1, 1]));
    store.insert("cm.bias", Tensor::zeros(&[c]));
    let map = map_from(randn(&[3, c, 4, 2], &mut rng(3)));
    let out = converter(&map, &cm, &store).unwrap();
    let pooled = global_pool(&map).unwrap();
    assert!(out.tensor().max_abs_diff(pooled.tensor()) < 1e-12);
}

#[test]
fn two_groups_match_per_group_dot_products() {
    // C=4, G=2, d=2: output 0 reads channels 0-1, output 1 reads channels 2-3.
    let cm = Converter::new("cm", 4, 2, 2).unwrap();
    let mut store = ParamStore::new();
    store.insert(
        "cm.weight",
        Tensor::new(&[2, 2, 1, 1], vec![0.5, -1.5, 2.0, 0.25]).unwrap(),
    );
    store.insert("cm.bias", Tensor::new(&[2], vec![0.1, -0.2]).unwrap());
    let map = Tensor::new(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = converter(&map_from(map), &cm, &store).unwrap();
    let expect = [0.5 * 1.0 - 1.5 * 2.0 + 0.1, 2.0 * 3.0 + 0.25 * 4.0 - 0.2];
    assert!((out.row(0)[0] - expect[0]).abs() < 1e-12);
    assert!((out.row(0)[1] - expect[1]).abs() < 1e-12);
    assert_eq!(cm.group_of_output(0), 0);
    assert_eq!(cm.group_of_output(1), 1);
}

#[test]
fn perturbing_a_channel_only_moves_its_group() {
    let (c, d, groups) = (8, 4, 4);
    let (cm, store) = converter_with_random_params(c, d, groups, 4);
    let base = randn(&[1, c, 2, 2], &mut rng(5));
    let before = converter(&map_from(base.clone()), &cm, &store).unwrap();
    for channel in 0..c {
        let mut bumped = base.clone();
        for cell in 0..4 {
            bumped.data_mut()[channel * 4 + cell] += 0.75;
        }
        let after = converter(&map_from(bumped), &cm, &store).unwrap();
        let group = channel / (c / groups);
        for o in 0..d {
            let moved = after.row(0)[o] != before.row(0)[o];
            assert_eq!(moved, cm.group_of_output(o) == group, "channel {channel} output {o}");
        }
    }
}

#[test]
fn converter_rejects_mismatched_channels() {
    assert!(matches!(Converter::new("cm", 6, 4, 4), Err(Error::Config(_))));
    let (cm, store) = converter_with_random_params(8, 4, 4, 0);
    let map = map_from(Tensor::zeros(&[1, 6, 2, 2]));
    assert!(matches!(converter(&map, &cm, &store), Err(Error::Config(_))));
}

#[test]
fn split_parts_index_arithmetic() {
    let map = map_from(randn(&[2, 3, 8, 4], &mut rng(6)));
    let one = split_parts(&map, PartSplitSpec { parts: 1 }).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].tensor(), map.tensor());

    let two = split_parts(&map, PartSplitSpec { parts: 2 }).unwrap();
    for (p, stripe) in two.iter().enumerate() {
        assert_eq!(stripe.tensor().shape(), &[2, 3, 4, 4]);
        for n in 0..2 {
            for c in 0..3 {
                for y in 0..4 {
                    for x in 0..4 {
                        assert_eq!(at(stripe.tensor(), n, c, y, x), at(map.tensor(), n, c, p * 4 + y, x));
                    }
                }
            }
        }
    }
    assert!(matches!(
        split_parts(&map, PartSplitSpec { parts: 3 }),
        Err(Error::Config(_))
    ));
}

fn concat_height(stripes: &[FeatureMap]) -> Tensor {
    let s = stripes[0].tensor().shape().to_vec();
    let h: usize = stripes.iter().map(|m| m.height()).sum();
    let mut out = Vec::with_capacity(s[0] * s[1] * h * s[3]);
    for n in 0..s[0] {
        for c in 0..s[1] {
            for m in stripes {
                let t = m.tensor();
                for y in 0..m.height() {
                    for x in 0..s[3] {
                        out.push(at(t, n, c, y, x));
                    }
                }
            }
        }
    }
    Tensor::new(&[s[0], s[1], h, s[3]], out).unwrap()
}

proptest! {
    #[test]
    fn stripes_reconstruct_the_map(seed in any::<u64>(), parts in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let map = map_from(randn(&[2, 3, 8, 2], &mut rng(seed)));
        let stripes = split_parts(&map, PartSplitSpec { parts }).unwrap();
        prop_assert_eq!(stripes.len(), parts);
        prop_assert_eq!(&concat_height(&stripes), map.tensor());
    }
}

fn center_focus_with(c: usize, size: usize, seed: u64) -> (CenterFocus, ParamStore) {
    let cf = CenterFocus::new("cfm", c, size, true).unwrap();
    let mut store = ParamStore::new();
    cf.init_params(&mut store, &mut rng(seed));
    (cf, store)
}

#[test]
fn center_focus_matches_brute_force_loop() {
    let (cf, store) = center_focus_with(2, 2, 7);
    let map = randn(&[1, 2, 4, 4], &mut rng(8));
    let out = center_focus(&map_from(map.clone()), &cf, &store).unwrap();
    let w = store.get("cfm.score.weight").unwrap().data().to_vec();

    // Window rows/cols 1..3 of a 4x4 map.
    let mut logits = Vec::new();
    for y in 1..3 {
        for x in 1..3 {
            logits.push(w[0] * at(&map, 0, 0, y, x) + w[1] * at(&map, 0, 1, y, x));
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let p: Vec<f64> = exps.iter().map(|e| e / total).collect();
    for c in 0..2 {
        let mut f = 0.0;
        let mut k = 0;
        for y in 1..3 {
            for x in 1..3 {
                f += p[k] * at(&map, 0, c, y, x);
                k += 1;
            }
        }
        assert!((out.feature.row(0)[c] - f).abs() < 1e-12);
    }
    for (k, &pk) in p.iter().enumerate() {
        assert!((out.prob.data()[k] - pk).abs() < 1e-12);
    }
}

#[test]
fn zero_scores_give_the_window_mean() {
    let (cf, mut store) = center_focus_with(3, 2, 9);
    store.insert("cfm.score.weight", Tensor::zeros(&[1, 3, 1, 1]));
    let map = randn(&[2, 3, 8, 4], &mut rng(10));
    let out = center_focus(&map_from(map.clone()), &cf, &store).unwrap();
    let (top, left) = center_window(8, 4, 2).unwrap();
    assert_eq!((top, left), (3, 1));
    for n in 0..2 {
        for c in 0..3 {
            let mean = (0..2)
                .flat_map(|dy| (0..2).map(move |dx| (dy, dx)))
                .map(|(dy, dx)| at(&map, n, c, top + dy, left + dx))
                .sum::<f64>()
                / 4.0;
            assert!((out.feature.row(n)[c] - mean).abs() < 1e-6);
        }
    }
    assert!(out.prob.data().iter().all(|&p| (p - 0.25).abs() < 1e-12));
}

#[test]
fn attention_off_is_the_plain_window_average() {
    let cf = CenterFocus::new("cfm", 3, 2, false).unwrap();
    let mut store = ParamStore::new();
    cf.init_params(&mut store, &mut rng(0));
    assert_eq!(store.num_scalars(), 0);
    let map = map_from(randn(&[1, 3, 8, 4], &mut rng(11)));
    let off = center_focus(&map, &cf, &store).unwrap();
    let (cf_on, mut store_on) = center_focus_with(3, 2, 0);
    store_on.insert("cfm.score.weight", Tensor::zeros(&[1, 3, 1, 1]));
    let on = center_focus(&map, &cf_on, &store_on).unwrap();
    assert!(off.feature.tensor().max_abs_diff(on.feature.tensor()) < 1e-12);
}

#[test]
fn full_window_attention_still_normalizes() {
    let (cf, store) = center_focus_with(2, 4, 12);
    let out = center_focus(&map_from(randn(&[3, 2, 4, 4], &mut rng(13))), &cf, &store).unwrap();
    assert_eq!(out.prob.shape(), &[3, 1, 4, 4]);
    for n in 0..3 {
        let s: f64 = out.prob.data()[n * 16..(n + 1) * 16].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn oversized_window_is_a_config_error() {
    let (cf, store) = center_focus_with(2, 5, 0);
    let map = map_from(Tensor::zeros(&[1, 2, 8, 4]));
    assert!(matches!(center_focus(&map, &cf, &store), Err(Error::Config(_))));
}

#[test]
fn softmax_is_shift_invariant() {
    let mut r = rng(14);
    let logits = randn(&[2, 1, 3, 3], &mut r);
    let mut g = Graph::new(Mode::Eval);
    let a = g.input(logits.clone());
    let b = g.input(logits.map(|v| v + 123.5));
    let pa = g.spatial_softmax(a).unwrap();
    let pb = g.spatial_softmax(b).unwrap();
    assert!(g.value(pa).max_abs_diff(g.value(pb)) < 1e-6);
}

proptest! {
    #[test]
    fn probability_map_is_a_distribution(seed in any::<u64>(), size in 1usize..5) {
        let (cf, store) = center_focus_with(4, size, seed);
        let map = map_from(randn(&[2, 4, 8, 4], &mut rng(seed ^ 1)).map(|v| v * 3.0));
        let out = center_focus(&map, &cf, &store).unwrap();
        let cells = size * size;
        for n in 0..2 {
            let p = &out.prob.data()[n * cells..(n + 1) * cells];
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn cells_outside_the_window_are_ignored(seed in any::<u64>(), size in 1usize..4, bump in -50.0f64..50.0) {
        let (cf, store) = center_focus_with(3, size, seed);
        let base = randn(&[1, 3, 8, 4], &mut rng(seed ^ 2));
        let before = center_focus(&map_from(base.clone()), &cf, &store).unwrap();
        let (top, left) = center_window(8, 4, size).unwrap();
        let mut perturbed = base.clone();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..4 {
                    let inside = y >= top && y < top + size && x >= left && x < left + size;
                    if !inside {
                        perturbed.data_mut()[(c * 8 + y) * 4 + x] += bump;
                    }
                }
            }
        }
        let after = center_focus(&map_from(perturbed), &cf, &store).unwrap();
        prop_assert_eq!(after.feature.tensor(), before.feature.tensor());
    }
}

#[test]
fn center_window_uses_floor_offsets() {
    assert_eq!(center_window(8, 4, 2).unwrap(), (3, 1));
    assert_eq!(center_window(7, 4, 2).unwrap(), (2, 1));
    assert_eq!(center_window(16, 8, 6).unwrap(), (5, 1));
    assert_eq!(center_window(4, 4, 4).unwrap(), (0, 0));
}

fn heads(seed: u64) -> (FeatureExtractors, ParamStore) {
    let fx = FeatureExtractors::new(8, 4, 2, PartSplitSpec { parts: 2 }, 2, true).unwrap();
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    fx.init_params(&mut store, &mut r);
    for name in ["cm_global.bias", "cm_part0.bias", "cm_part1.bias", "cfm.proj.bias"] {
        store.insert(name, randn(&[4], &mut r));
    }
    (fx, store)
}

#[test]
fn extract_all_composes_the_standalone_ops() {
    let (fx, store) = heads(15);
    let map = map_from(randn(&[3, 8, 8, 4], &mut rng(16)));
    let (fg, parts, fc) = extract_all(&map, &fx, &store).unwrap();
    for f in [&fg, &parts[0], &parts[1], &fc] {
        assert_eq!(f.tensor().shape(), &[3, 4]);
    }
    assert_eq!(fg, converter(&map, &fx.global, &store).unwrap());
    let stripes = split_parts(&map, fx.split).unwrap();
    assert_eq!(parts[0], converter(&stripes[0], &fx.parts[0], &store).unwrap());
    assert_eq!(parts[1], converter(&stripes[1], &fx.parts[1], &store).unwrap());

    let attended = center_focus(&map, &fx.center, &store).unwrap();
    let w = store.get("cfm.proj.weight").unwrap();
    let b = store.get("cfm.proj.bias").unwrap();
    for n in 0..3 {
        for o in 0..4 {
            let z: f64 = b.data()[o]
                + (0..8)
                    .map(|i| w.data()[o * 8 + i] * attended.feature.row(n)[i])
                    .sum::<f64>();
            assert!((fc.row(n)[o] - z).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_map_yields_biases_and_uniform_attention() {
    let (fx, store) = heads(17);
    let map = map_from(Tensor::zeros(&[2, 8, 8, 4]));
    let (fg, parts, fc) = extract_all(&map, &fx, &store).unwrap();
    for (f, bias) in [
        (&fg, "cm_global.bias"),
        (&parts[0], "cm_part0.bias"),
        (&parts[1], "cm_part1.bias"),
    ] {
        for n in 0..2 {
            let b = store.get(bias).unwrap().data();
            assert!(f.row(n).iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }
    let attended = center_focus(&map, &fx.center, &store).unwrap();
    assert!(attended.prob.data().iter().all(|&p| p == 0.25));
    let b = store.get("cfm.proj.bias").unwrap().data();
    assert!(fc.row(0).iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn extractor_errors_name_the_feature() {
    let (fx, store) = heads(0);
    let map = map_from(Tensor::zeros(&[1, 6, 8, 4]));
    let err = extract_all(&map, &fx, &store).unwrap_err().to_string();
    assert!(err.contains("f_g"), "{err}");
}

#[test]
fn converter_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (cm, store) = converter_with_random_params(4, 4, 2, seed);
        let map = randn(&[1, 4, 4, 4], &mut rng(100 + seed));
        let err = gradient_error(&store, &[map], |g, s, v| {
            let y = cm.forward(g, s, v[0])?;
            scalarize(g, y, 7)
        });
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn center_focus_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (cf, store) = center_focus_with(4, 2, seed);
        let map = randn(&[1, 4, 4, 4], &mut rng(200 + seed));
        let err = gradient_error(&store, &[map], |g, s, v| {
            let out = cf.attend(g, s, v[0])?;
            scalarize(g, out.feature, 8)
        });
        assert!(err < 1e-4, "relative error {err}");
    }
}
