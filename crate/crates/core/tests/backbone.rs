mod common;

use common::{randn, rng};
use ocnet_core::backbone::{extract_feature_map, global_pool, Backbone, BackboneConfig};
use ocnet_core::{FeatureMap, ImageBatch, ParamStore, Tensor};
use proptest::prelude::*;

#[test]
fn pooling_matches_hand_summation() {
    let t = randn(&[1, 4, 2, 2], &mut rng(1));
    let v = global_pool(&FeatureMap::new(t.clone()).unwrap()).unwrap();
    for c in 0..4 {
        let d = t.data();
        let expect = (d[c * 4] + d[c * 4 + 1] + d[c * 4 + 2] + d[c * 4 + 3]) / 4.0;
        assert!((v.row(0)[c] - expect).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn pooling_is_linear(seed in any::<u64>(), a in -10.0f64..10.0, b in -10.0f64..10.0) {
        let mut r = rng(seed);
        let (m1, m2) = (randn(&[2, 3, 4, 2], &mut r), randn(&[2, 3, 4, 2], &mut r));
        let mix = m1.zip_map(&m2, |x, y| a * x + b * y).unwrap();
        let pool = |t: Tensor| global_pool(&FeatureMap::new(t).unwrap()).unwrap().into_tensor();
        let lhs = pool(mix);
        let rhs = pool(m1).zip_map(&pool(m2), |x, y| a * x + b * y).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-6);
    }

    #[test]
    fn output_shape_follows_config(
        widths in prop::collection::vec(1usize..6, 1..4),
        stride_bits in prop::collection::vec(any::<bool>(), 3),
        hm in 1usize..4,
        wm in 1usize..3,
        seed in any::<u64>(),
    ) {
        let strides: Vec<usize> = widths.iter().zip(&stride_bits).map(|(_, &s)| if s { 2 } else { 1 }).collect();
        let config = BackboneConfig { widths: widths.clone(), strides: strides.clone() };
        let down: usize = strides.iter().product();
        let (h, w) = (2 * hm * down, 2 * wm * down);
        let backbone = Backbone::new(config.clone()).unwrap();
        let mut store = ParamStore::new();
        backbone.init_params(&mut store, &mut rng(seed));
        let images = ImageBatch::new(Tensor::uniform(&[2, 3, h, w], 1.0, &mut rng(seed ^ 3))).unwrap();
        let map = extract_feature_map(&images, &backbone, &store).unwrap();
        prop_assert_eq!(map.tensor().shape(), &[2, *widths.last().unwrap(), 2 * hm, 2 * wm]);
        prop_assert_eq!(config.output_size(h, w).unwrap(), (2 * hm, 2 * wm));
    }
}

#[test]
fn indivisible_inputs_are_config_errors() {
    let backbone = Backbone::new(BackboneConfig::default()).unwrap();
    let mut store = ParamStore::new();
    backbone.init_params(&mut store, &mut rng(0));
    let images = ImageBatch::new(Tensor::zeros(&[1, 3, 60, 32])).unwrap();
    assert!(matches!(
        extract_feature_map(&images, &backbone, &store),
        Err(ocnet_core::Error::Config(_))
    ));
}
