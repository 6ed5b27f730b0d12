//! Procedural occluded-pedestrian datasets.
//!
//! Each identity is a figure with a fixed color/texture/geometry signature.
//! Every image renders the figure near the box center over a random
//! background, tinted by its camera. Occluded samples either get a textured
//! block over 20-50% of the figure box (object occlusion) or a second
//! identity drawn in front of the target, offset sideways (pedestrian
//! interference). Images are written as PNG in the `train/`, `query/` and
//! `gallery/` layout with an `index.tsv` manifest.

use std::fs;
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{DatasetIndex, OcclusionTag, SampleRecord, Split};
use crate::seeds::{derive_seed, STREAM_CAMERA, STREAM_IDENTITY, STREAM_IMAGE, STREAM_OCCLUSION_PLAN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Fraction of each identity's images that are occluded.
    pub occlusion_fraction: f64,
    /// Share of occluded images with object occlusion.
    pub object_share: f64,
    /// Share of occluded images with pedestrian interference.
    pub pedestrian_share: f64,
    pub num_cameras: u32,
    /// Leading fraction of identities used for training; the rest form the
    /// query/gallery split.
    pub train_identity_fraction: f64,
    /// Query images per evaluation identity and camera.
    pub queries_per_camera: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_identities: 20,
            images_per_identity: 40,
            image_height: 64,
            image_width: 32,
            occlusion_fraction: 0.3,
            object_share: 0.5,
            pedestrian_share: 0.5,
            num_cameras: 4,
            train_identity_fraction: 0.5,
            queries_per_camera: 2,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.num_identities == 0 || self.images_per_identity == 0 {
            return Err(Error::Validation(
                "synthetic data needs at least one identity and one image per identity".into(),
            ));
        }
        if !unit(self.occlusion_fraction) || !unit(self.object_share) || !unit(self.pedestrian_share) {
            return Err(Error::Validation(format!(
                "occlusion fraction {} and shares ({}, {}) must lie in [0, 1]",
                self.occlusion_fraction, self.object_share, self.pedestrian_share
            )));
        }
        if (self.object_share + self.pedestrian_share - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "occlusion shares {} + {} do not sum to 1",
                self.object_share, self.pedestrian_share
            )));
        }
        if !(self.train_identity_fraction > 0.0 && self.train_identity_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "train identity fraction {} must lie in (0, 1)",
                self.train_identity_fraction
            )));
        }
        if self.num_train_identities() < 2 || self.num_identities - self.num_train_identities() < 2 {
            return Err(Error::Validation(
                "need at least two training and two evaluation identities".into(),
            ));
        }
        if self.num_cameras < 2 {
            return Err(Error::Validation("cross-camera evaluation needs two cameras".into()));
        }
        if self.image_height < 16 || self.image_width < 8 {
            return Err(Error::Validation("images must be at least 16x8".into()));
        }
        if self.queries_per_camera == 0
            || self.queries_per_camera * self.num_cameras as usize >= self.images_per_identity
        {
            return Err(Error::Validation(
                "queries per camera must leave gallery images for every identity".into(),
            ));
        }
        Ok(())
    }

    pub fn num_train_identities(&self) -> usize {
        (self.num_identities as f64 * self.train_identity_fraction).round() as usize
    }

    /// Per-identity `(object, pedestrian)` occluded image counts.
    pub fn occlusion_counts(&self) -> (usize, usize) {
        let occluded = (self.images_per_identity as f64 * self.occlusion_fraction).round() as usize;
        let object = (occluded as f64 * self.object_share).round() as usize;
        (object, occluded - object)
    }

    /// Identities are numbered from 1; 0 and -1 are reserved.
    pub fn identity_label(&self, index: usize) -> i64 {
        index as i64 + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// Construction facts about a rendered sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub path: String,
    /// `(x, y)` pixel center of the target's figure box.
    pub target_center: (f64, f64),
    pub interferer_center: Option<(f64, f64)>,
    pub interferer_identity: Option<i64>,
    pub occluder: Option<Rect>,
    /// Occluder area over figure-box area.
    pub occluded_fraction: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub index: DatasetIndex,
    pub meta: Vec<SampleMeta>,
}

type Rgb = [f64; 3];

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Solid,
    HStripes(usize),
    VStripes(usize),
    Checker(usize),
}

#[derive(Clone, Debug)]
struct Signature {
    skin: Rgb,
    hair: Rgb,
    top: Rgb,
    top_alt: Rgb,
    top_pattern: Pattern,
    bottom: Rgb,
    bottom_alt: Rgb,
    bottom_pattern: Pattern,
    shoes: Rgb,
    width: f64,
    height: f64,
    bag: Option<(bool, Rgb)>,
}

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let c = v * s;
    let hp = (h.rem_euclid(1.0)) * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn random_color<R: Rng>(rng: &mut R) -> Rgb {
    hsv(rng.gen(), rng.gen_range(0.35..1.0), rng.gen_range(0.25..1.0))
}

fn figure_pattern<R: Rng>(rng: &mut R) -> Pattern {
    let period = rng.gen_range(2..5);
    match rng.gen_range(0..4) {
        0 => Pattern::Solid,
        1 => Pattern::HStripes(period),
        2 => Pattern::VStripes(period),
        _ => Pattern::Checker(period),
    }
}

impl Signature {
    fn for_identity(seed: u64, identity: i64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_IDENTITY, identity as u64));
        let skin_tones = [
            [0.95, 0.8, 0.68],
            [0.82, 0.62, 0.48],
            [0.55, 0.38, 0.26],
            [0.36, 0.24, 0.16],
        ];
        Self {
            skin: skin_tones[rng.gen_range(0..skin_tones.len())],
            hair: hsv(
                rng.gen_range(0.0..0.12),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.6),
            ),
            top: random_color(&mut rng),
            top_alt: random_color(&mut rng),
            top_pattern: figure_pattern(&mut rng),
            bottom: random_color(&mut rng),
            bottom_alt: random_color(&mut rng),
            bottom_pattern: if rng.gen_bool(0.3) {
                Pattern::HStripes(rng.gen_range(2..5))
            } else {
                Pattern::Solid
            },
            shoes: random_color(&mut rng),
            width: rng.gen_range(0.45..0.62),
            height: rng.gen_range(0.8..0.92),
            bag: rng.gen_bool(0.4).then(|| (rng.gen_bool(0.5), random_color(&mut rng))),
        }
    }
}

fn shade(p: Pattern, a: Rgb, b: Rgb, x: usize, y: usize) -> Rgb {
    let alt = match p {
        Pattern::Solid => false,
        Pattern::HStripes(k) => (y / k) % 2 == 1,
        Pattern::VStripes(k) => (x / k) % 2 == 1,
        Pattern::Checker(k) => (x / k + y / k) % 2 == 1,
    };
    if alt {
        b
    } else {
        a
    }
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            px: vec![[0.0; 3]; h * w],
        }
    }

    fn set(&mut self, y: usize, x: usize, c: Rgb) {
        self.px[y * self.w + x] = c;
    }

    fn to_image(&self) -> RgbImage {
        let mut img = RgbImage::new(self.w as u32, self.h as u32);
        for (i, p) in img.pixels_mut().enumerate() {
            let c = self.px[i];
            p.0 = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        img
    }
}

/// Draws a figure whose box is centered at `(cx, cy)`; returns the box as
/// `(left, top, width, height)` in pixels.
fn draw_figure(canvas: &mut Canvas, sig: &Signature, cx: f64, cy: f64, scale: f64) -> (f64, f64, f64, f64) {
    let fh = sig.height * canvas.h as f64 * scale;
    let fw = sig.width * canvas.w as f64 * scale;
    let (left, top) = (cx - fw / 2.0, cy - fh / 2.0);
    for y in 0..canvas.h {
        let v = (y as f64 + 0.5 - top) / fh;
        if !(0.0..1.0).contains(&v) {
            continue;
        }
        let ly = (y as f64 - top).max(0.0) as usize;
        for x in 0..canvas.w {
            let u = (x as f64 + 0.5 - left) / fw;
            let lx = (x as f64 - left).max(0.0) as usize;
            let in_leg = (0.12..0.46).contains(&u) || (0.54..0.88).contains(&u);
            let color = if ((u - 0.5) / 0.2).powi(2) + ((v - 0.085) / 0.085).powi(2) <= 1.0 {
                Some(if v < 0.055 { sig.hair } else { sig.skin })
            } else if (0.17..0.52).contains(&v) && (0.03..0.97).contains(&u) {
                Some(shade(sig.top_pattern, sig.top, sig.top_alt, lx, ly))
            } else if (0.17..0.48).contains(&v) && ((-0.08..0.03).contains(&u) || (0.97..1.08).contains(&u)) {
                Some(sig.skin)
            } else if (0.52..0.94).contains(&v) && in_leg {
                Some(shade(sig.bottom_pattern, sig.bottom, sig.bottom_alt, lx, ly))
            } else if v >= 0.94 && in_leg {
                Some(sig.shoes)
            } else {
                None
            };
            let color = match (color, sig.bag) {
                (None, Some((left_side, bag))) => {
                    let on_bag = (0.3..0.56).contains(&v)
                        && if left_side {
                            (-0.2..0.03).contains(&u)
                        } else {
                            (0.97..1.2).contains(&u)
                        };
                    on_bag.then_some(bag)
                }
                (c, _) => c,
            };
            if let Some(c) = color {
                canvas.set(y, x, c);
            }
        }
    }
    (left, top, fw, fh)
}

const OCCLUDER_PALETTE: [Rgb; 6] = [
    [0.45, 0.45, 0.45],
    [0.36, 0.26, 0.16],
    [0.22, 0.34, 0.2],
    [0.62, 0.58, 0.52],
    [0.16, 0.16, 0.2],
    [0.7, 0.7, 0.68],
];

/// Draws an occluding block over 20-50% of the figure box. Textures
/// (diagonal stripes, noise, solid) never appear on figures.
fn draw_occluder<R: Rng>(canvas: &mut Canvas, rng: &mut R, fig: (f64, f64, f64, f64)) -> (Rect, f64) {
    let (left, top, fw, fh) = fig;
    let frac: f64 = rng.gen_range(0.2..0.5);
    let (x0, y0, bw, bh) = match rng.gen_range(0..4) {
        0 => (left, top + fh * (1.0 - frac), fw, fh * frac),
        1 => (left, top + fh * (0.55 - frac / 2.0).max(0.0), fw, fh * frac),
        2 => (left, top, fw * frac, fh),
        _ => (left + fw * (1.0 - frac), top, fw * frac, fh),
    };
    let clamp_y = |v: f64| v.round().clamp(0.0, canvas.h as f64) as usize;
    let clamp_x = |v: f64| v.round().clamp(0.0, canvas.w as f64) as usize;
    let (r0, r1) = (clamp_y(y0), clamp_y(y0 + bh));
    let (c0, c1) = (clamp_x(x0), clamp_x(x0 + bw));
    let rect = Rect {
        top: r0,
        left: c0,
        height: r1.saturating_sub(r0).max(1).min(canvas.h - r0.min(canvas.h - 1)),
        width: c1.saturating_sub(c0).max(1).min(canvas.w - c0.min(canvas.w - 1)),
    };
    let a = OCCLUDER_PALETTE[rng.gen_range(0..OCCLUDER_PALETTE.len())];
    let b = OCCLUDER_PALETTE[rng.gen_range(0..OCCLUDER_PALETTE.len())];
    let texture = rng.gen_range(0..3);
    let period = rng.gen_range(2..5);
    for y in rect.top..rect.top + rect.height {
        for x in rect.left..rect.left + rect.width {
            let c = match texture {
                0 if ((x + y) / period) % 2 == 1 => b,
                1 => {
                    let n = rng.gen_range(-0.12..0.12);
                    a.map(|v| v + n)
                }
                _ => a,
            };
            canvas.set(y, x, c);
        }
    }
    let area = (rect.height * rect.width) as f64 / (fw * fh);
    (rect, area)
}

/// Renders image `image` of identity `identity_index`; `others` are the
/// identities eligible as interferers.
fn render(
    config: &SyntheticConfig,
    identity_index: usize,
    image: usize,
    camera: u32,
    tag: OcclusionTag,
    others: &[usize],
) -> (RgbImage, SampleMeta) {
    let (h, w) = (config.image_height, config.image_width);
    let identity = config.identity_label(identity_index);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        config.seed,
        STREAM_IMAGE,
        ((identity as u64) << 32) | image as u64,
    ));
    let mut cam_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_CAMERA, camera as u64));
    let gain: Rgb = std::array::from_fn(|_| cam_rng.gen_range(0.75..1.25));
    let offset: f64 = cam_rng.gen_range(-0.06..0.06);

    let mut canvas = Canvas::new(h, w);
    let base = hsv(rng.gen(), rng.gen_range(0.0..0.4), rng.gen_range(0.2..0.8));
    let slope: f64 = rng.gen_range(-0.2..0.2);
    for y in 0..h {
        for x in 0..w {
            let t = y as f64 / h as f64 - 0.5;
            let n: f64 = rng.gen_range(-0.05..0.05);
            canvas.set(y, x, base.map(|v| v + slope * t + n));
        }
    }

    let sig = Signature::for_identity(config.seed, identity);
    let cx = w as f64 / 2.0 + rng.gen_range(-1.5..1.5);
    let cy = h as f64 / 2.0 + rng.gen_range(-1.0..1.0);
    let scale = rng.gen_range(0.95..1.05);
    let fig = draw_figure(&mut canvas, &sig, cx, cy, scale);

    let mut meta = SampleMeta {
        path: String::new(),
        target_center: (cx, cy),
        interferer_center: None,
        interferer_identity: None,
        occluder: None,
        occluded_fraction: None,
    };
    match tag {
        OcclusionTag::None => {}
        OcclusionTag::Object => {
            let (rect, frac) = draw_occluder(&mut canvas, &mut rng, fig);
            meta.occluder = Some(rect);
            meta.occluded_fraction = Some(frac);
        }
        OcclusionTag::Pedestrian => {
            let other = others[rng.gen_range(0..others.len())];
            let other_id = config.identity_label(other);
            let other_sig = Signature::for_identity(config.seed, other_id);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let ox = w as f64 / 2.0 + side * rng.gen_range(0.35..0.5) * w as f64;
            let oy = h as f64 / 2.0 + rng.gen_range(-2.0..2.0);
            draw_figure(&mut canvas, &other_sig, ox, oy, rng.gen_range(0.95..1.05));
            meta.interferer_center = Some((ox, oy));
            meta.interferer_identity = Some(other_id);
        }
    }

    for p in &mut canvas.px {
        for (v, g) in p.iter_mut().zip(gain) {
            *v = *v * g + offset + rng.gen_range(-0.02..0.02);
        }
    }
    (canvas.to_image(), meta)
}

/// `{id:04}_c{cam}s1_{frame:06}_00.png`.
pub fn file_name(identity: i64, camera: u32, frame: usize) -> String {
    format!("{identity:04}_c{camera}s1_{frame:06}_00.png")
}

/// Plans the dataset without rendering: every sample's descriptor, in
/// manifest order (split, then path).
pub fn plan(config: &SyntheticConfig) -> Result<DatasetIndex> {
    config.validate()?;
    let n_train = config.num_train_identities();
    let (n_obj, n_pi) = config.occlusion_counts();
    let mut samples = Vec::with_capacity(config.num_identities * config.images_per_identity);
    for idx in 0..config.num_identities {
        let identity = config.identity_label(idx);
        let mut order: Vec<usize> = (0..config.images_per_identity).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_OCCLUSION_PLAN, identity as u64));
        order.shuffle(&mut rng);
        let mut tags = vec![OcclusionTag::None; config.images_per_identity];
        for (rank, &i) in order.iter().enumerate() {
            if rank < n_obj {
                tags[i] = OcclusionTag::Object;
            } else if rank < n_obj + n_pi {
                tags[i] = OcclusionTag::Pedestrian;
            }
        }
        let mut per_camera = vec![0usize; config.num_cameras as usize];
        for (image, &occlusion) in tags.iter().enumerate() {
            let camera = (image % config.num_cameras as usize) as u32 + 1;
            let split = if idx < n_train {
                Split::Train
            } else {
                let seen = &mut per_camera[camera as usize - 1];
                *seen += 1;
                if *seen <= config.queries_per_camera {
                    Split::Query
                } else {
                    Split::Gallery
                }
            };
            samples.push(SampleRecord {
                path: format!("{}/{}", split.dir_name(), file_name(identity, camera, image)),
                identity,
                camera,
                split,
                occlusion,
            });
        }
    }
    samples.sort_by(|a, b| (a.split, &a.path).cmp(&(b.split, &b.path)));
    Ok(DatasetIndex { samples })
}

fn frame_of(path: &str) -> usize {
    let name = path.rsplit('/').next().unwrap_or(path);
    name.split('_').nth(2).and_then(|f| f.parse().ok()).unwrap_or(0)
}

/// Renders one planned sample.
pub fn render_sample(config: &SyntheticConfig, sample: &SampleRecord) -> Result<(RgbImage, SampleMeta)> {
    let n_train = config.num_train_identities();
    let idx = (sample.identity - 1) as usize;
    if sample.identity < 1 || idx >= config.num_identities {
        return Err(Error::Validation(format!(
            "identity {} not in the dataset",
            sample.identity
        )));
    }
    let group: Vec<usize> = if idx < n_train {
        (0..n_train).filter(|&i| i != idx).collect()
    } else {
        (n_train..config.num_identities).filter(|&i| i != idx).collect()
    };
    let (img, mut meta) = render(
        config,
        idx,
        frame_of(&sample.path),
        sample.camera,
        sample.occlusion,
        &group,
    );
    meta.path = sample.path.clone();
    Ok((img, meta))
}

/// Plans, renders and writes the dataset under `root`.
pub fn generate_synthetic(config: &SyntheticConfig, root: &Path) -> Result<GeneratedDataset> {
    let index = plan(config)?;
    for split in Split::ALL {
        fs::create_dir_all(root.join(split.dir_name()))?;
    }
    let mut meta = Vec::with_capacity(index.samples.len());
    for sample in &index.samples {
        let (img, m) = render_sample(config, sample)?;
        let path = root.join(&sample.path);
        img.save_with_format(&path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path, source })?;
        meta.push(m);
    }
    index.write_manifest(root)?;
    Ok(GeneratedDataset { index, meta })
}
