//! Image-to-tensor conversion and training augmentation.

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ocnet_core::Tensor;

use crate::error::{Error, Result};
use crate::synthetic::Rect;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub height: usize,
    pub width: usize,
    pub flip_prob: f64,
    /// Zero padding before the random crop; 0 disables the crop.
    pub pad: usize,
    pub erase_prob: f64,
    /// Erased area range as a fraction of the image.
    pub erase_area: (f64, f64),
    /// Lower aspect bound `r`; aspects are drawn from `[r, 1/r]`.
    pub erase_min_aspect: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 32,
            flip_prob: 0.5,
            pad: 10,
            erase_prob: 0.5,
            erase_area: (0.02, 0.4),
            erase_min_aspect: 0.3,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let p = |v: f64| (0.0..=1.0).contains(&v);
        let (lo, hi) = self.erase_area;
        if self.height == 0 || self.width == 0 {
            return Err(Error::Validation("augment target size must be positive".into()));
        }
        if !p(self.flip_prob) || !p(self.erase_prob) {
            return Err(Error::Validation("augment probabilities must lie in [0, 1]".into()));
        }
        if !(0.0 < lo && lo <= hi && hi < 1.0) || !(self.erase_min_aspect > 0.0 && self.erase_min_aspect <= 1.0) {
            return Err(Error::Validation("invalid random-erasing ranges".into()));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Validation("normalization std must be positive".into()));
        }
        Ok(())
    }
}

/// An augmented `[3, H, W]` tensor with the random choices that produced it.
#[derive(Clone, Debug)]
pub struct Augmented {
    pub tensor: Tensor,
    pub flipped: bool,
    /// Crop origin inside the padded image.
    pub crop: Option<(usize, usize)>,
    pub erased: Option<Rect>,
}

pub fn resize(img: &RgbImage, height: usize, width: usize) -> RgbImage {
    if img.height() as usize == height && img.width() as usize == width {
        img.clone()
    } else {
        imageops::resize(img, width as u32, height as u32, FilterType::Triangle)
    }
}

/// `[3, H, W]` tensor with values in `[0, 1]`.
pub fn to_unit_tensor(img: &RgbImage) -> Tensor {
    let (h, w) = (img.height() as usize, img.width() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    })
}

pub fn normalize(t: &mut Tensor, mean: &[f64; 3], std: &[f64; 3]) {
    let plane = t.numel() / 3;
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let c = i / plane;
        *v = (*v - mean[c]) / std[c];
    }
}

/// Horizontal flip of a `[C, H, W]` tensor.
pub fn hflip(t: &Tensor) -> Tensor {
    let (h, w) = (t.dim(1), t.dim(2));
    let src = t.data();
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (row, x) = (i / w, i % w);
        *v = src[row * w + (w - 1 - x)];
    }
    debug_assert_eq!(out.numel() % (h * w), 0);
    out
}

fn pad_crop<R: Rng>(t: &Tensor, pad: usize, rng: &mut R) -> (Tensor, (usize, usize)) {
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let top = rng.gen_range(0..=2 * pad);
    let left = rng.gen_range(0..=2 * pad);
    let src = t.data();
    let out = Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (sy, sx) = ((y + top) as isize - pad as isize, (x + left) as isize - pad as isize);
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            0.0
        } else {
            src[ch * h * w + sy as usize * w + sx as usize]
        }
    });
    (out, (top, left))
}

/// Samples an erasing rectangle; `None` if no candidate fits in 100 tries.
fn erase_rect<R: Rng>(h: usize, w: usize, config: &AugmentConfig, rng: &mut R) -> Option<Rect> {
    let area = (h * w) as f64;
    let r = config.erase_min_aspect;
    for _ in 0..100 {
        let target = rng.gen_range(config.erase_area.0..=config.erase_area.1) * area;
        let aspect = rng.gen_range(r..=1.0 / r);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh >= 1 && ew >= 1 && eh < h && ew < w {
            return Some(Rect {
                top: rng.gen_range(0..=h - eh),
                left: rng.gen_range(0..=w - ew),
                height: eh,
                width: ew,
            });
        }
    }
    None
}

/// Fills `rect` with zeros in every channel (the mean color after
/// normalization).
pub fn erase(t: &mut Tensor, rect: Rect) {
    let (h, w) = (t.dim(1), t.dim(2));
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        if rect.contains((i / w) % h, i % w) {
            *v = 0.0;
        }
    }
}

/// Resize and normalize, plus flip, pad-crop and random erasing when
/// `training`. Deterministic for a fixed `seed`.
pub fn augment(img: &RgbImage, config: &AugmentConfig, training: bool, seed: u64) -> Result<Augmented> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Validation("cannot augment an empty image".into()));
    }
    let mut t = to_unit_tensor(&resize(img, config.height, config.width));
    let mut out = Augmented {
        tensor: Tensor::scalar(0.0),
        flipped: false,
        crop: None,
        erased: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if training {
        if rng.gen_bool(config.flip_prob) {
            t = hflip(&t);
            out.flipped = true;
        }
        if config.pad > 0 {
            let (cropped, origin) = pad_crop(&t, config.pad, &mut rng);
            t = cropped;
            out.crop = Some(origin);
        }
    }
    normalize(&mut t, &config.mean, &config.std);
    if training && rng.gen_bool(config.erase_prob) {
        if let Some(rect) = erase_rect(config.height, config.width, config, &mut rng) {
            erase(&mut t, rect);
            out.erased = Some(rect);
        }
    }
    out.tensor = t;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: u32, w: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([(x * 7) as u8, (y * 3) as u8, ((x + y) * 5) as u8])
        })
    }

    #[test]
    fn unit_tensor_layout() {
        let img = gradient(4, 3);
        let t = to_unit_tensor(&img);
        assert_eq!(t.shape(), &[3, 4, 3]);
        // channel 1 at (y=2, x=1)
        assert!((t.data()[12 + 2 * 3 + 1] - 6.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn eval_path_has_no_augmentation() {
        let a = augment(&gradient(64, 32), &AugmentConfig::default(), false, 1).unwrap();
        assert!(!a.flipped && a.crop.is_none() && a.erased.is_none());
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            erase_area: (0.5, 0.2),
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
