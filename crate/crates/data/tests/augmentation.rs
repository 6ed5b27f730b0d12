use image::RgbImage;
use ocnet_core::Tensor;
use ocnet_data::augment::{augment, hflip, AugmentConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_image(seed: u64, h: u32, w: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.gen(), rng.gen(), rng.gen()]))
}

#[test]
fn eval_path_is_deterministic_and_normalized() {
    let img = noise_image(1, 64, 32);
    let config = AugmentConfig::default();
    let a = augment(&img, &config, false, 1).unwrap();
    let b = augment(&img, &config, false, 99).unwrap();
    assert_eq!(a.tensor, b.tensor);
    assert_eq!(a.tensor.shape(), &[3, 64, 32]);
    let px = img.get_pixel(5, 7).0;
    for c in 0..3 {
        let expect = (px[c] as f64 / 255.0 - config.mean[c]) / config.std[c];
        assert!((a.tensor.data()[c * 64 * 32 + 7 * 32 + 5] - expect).abs() < 1e-12);
    }
}

#[test]
fn eval_path_resizes() {
    let img = noise_image(2, 128, 64);
    let a = augment(&img, &AugmentConfig::default(), false, 0).unwrap();
    assert_eq!(a.tensor.shape(), &[3, 64, 32]);
}

#[test]
fn training_path_is_seed_deterministic() {
    let img = noise_image(3, 64, 32);
    let config = AugmentConfig::default();
    for seed in 0..10 {
        let a = augment(&img, &config, true, seed).unwrap();
        let b = augment(&img, &config, true, seed).unwrap();
        assert_eq!(a.tensor, b.tensor);
    }
}

#[test]
fn forced_flip_matches_flipping_the_eval_tensor() {
    let img = noise_image(4, 64, 32);
    let config = AugmentConfig {
        flip_prob: 1.0,
        pad: 0,
        erase_prob: 0.0,
        ..AugmentConfig::default()
    };
    let flipped = augment(&img, &config, true, 0).unwrap();
    assert!(flipped.flipped);
    let plain = augment(&img, &config, false, 0).unwrap();
    assert_eq!(flipped.tensor, hflip(&plain.tensor));
}

proptest! {
    #[test]
    fn flip_is_an_involution(c in 1usize..4, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::randn(&[c, h, w], 1.0, &mut rng);
        prop_assert_eq!(hflip(&hflip(&t)), t.clone());
        if w > 1 {
            prop_assert_ne!(hflip(&t), t);
        }
    }

    #[test]
    fn erasing_changes_exactly_one_rectangle(seed in any::<u64>()) {
        let img = noise_image(seed, 64, 32);
        let config = AugmentConfig {
            flip_prob: 0.0,
            pad: 0,
            erase_prob: 1.0,
            ..AugmentConfig::default()
        };
        let clean = augment(&img, &config, false, seed).unwrap().tensor;
        let out = augment(&img, &config, true, seed).unwrap();
        let rect = out.erased.expect("erasing forced on");

        // Bounding box of every changed pixel, any channel.
        let (h, w) = (64, 32);
        let mut changed = vec![false; h * w];
        for (i, (a, b)) in clean.data().iter().zip(out.tensor.data()).enumerate() {
            if a != b {
                changed[i % (h * w)] = true;
            }
        }
        let hits: Vec<(usize, usize)> = (0..h * w).filter(|&p| changed[p]).map(|p| (p / w, p % w)).collect();
        prop_assert!(!hits.is_empty());
        let top = hits.iter().map(|p| p.0).min().unwrap();
        let bottom = hits.iter().map(|p| p.0).max().unwrap();
        let left = hits.iter().map(|p| p.1).min().unwrap();
        let right = hits.iter().map(|p| p.1).max().unwrap();
        prop_assert_eq!((top, left, bottom - top + 1, right - left + 1), (rect.top, rect.left, rect.height, rect.width));
        // The box is filled: every pixel inside it changed.
        prop_assert_eq!(hits.len(), rect.height * rect.width);
        let area = (rect.height * rect.width) as f64 / (h * w) as f64;
        prop_assert!(area > 0.0 && area < 0.5);
    }
}
