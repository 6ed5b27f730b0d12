//! Reading datasets in the standard Re-ID directory layout.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use image::RgbImage;
use log::warn;
use regex::Regex;

use crate::error::{Error, Result};
use crate::index::{DatasetIndex, OcclusionTag, SampleRecord, Split, MANIFEST};

/// Fields parsed from `{id}_c{cam}s{seq}_{frame}_{box}.{jpg,png}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParsedName {
    pub identity: i64,
    pub camera: u32,
    pub sequence: u32,
    pub frame: u64,
    pub bbox: u32,
}

fn name_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(-?\d+)_c(\d+)s(\d+)_(\d+)_(\d+)\.(?i:jpe?g|png)$").expect("valid pattern"))
}

pub fn parse_file_name(name: &str) -> Option<ParsedName> {
    let caps = name_pattern().captures(name)?;
    Some(ParsedName {
        identity: caps[1].parse().ok()?,
        camera: caps[2].parse().ok()?,
        sequence: caps[3].parse().ok()?,
        frame: caps[4].parse().ok()?,
        bbox: caps[5].parse().ok()?,
    })
}

/// Scans `train/`, `query/` and `gallery/` (or the `bounding_box_*`
/// aliases) under `root`. Files whose names do not parse are skipped with a
/// warning. Occlusion tags come from `index.tsv` when it exists.
pub fn load_reid_directory(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Validation(format!("{} is not a directory", root.display())));
    }
    let tags: HashMap<String, OcclusionTag> = if root.join(MANIFEST).is_file() {
        DatasetIndex::read_manifest(root)?
            .samples
            .into_iter()
            .map(|s| (s.path, s.occlusion))
            .collect()
    } else {
        HashMap::new()
    };

    let mut samples = Vec::new();
    for split in Split::ALL {
        let dir = split
            .dir_aliases()
            .iter()
            .find(|d| root.join(d).is_dir())
            .ok_or_else(|| Error::Validation(format!("{}: missing {split} directory", root.display())))?;
        let mut names: Vec<String> = fs::read_dir(root.join(dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();
        let before = samples.len();
        for name in names {
            let Some(parsed) = parse_file_name(&name) else {
                warn!("skipping {dir}/{name}: file name does not match the Re-ID pattern");
                continue;
            };
            let path = format!("{dir}/{name}");
            samples.push(SampleRecord {
                occlusion: tags.get(&path).copied().unwrap_or_default(),
                path,
                identity: parsed.identity,
                camera: parsed.camera,
                split,
            });
        }
        if samples.len() == before {
            return Err(Error::Validation(format!(
                "{split} split under {} is empty",
                root.display()
            )));
        }
    }
    Ok(DatasetIndex { samples })
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Loads the images of `samples`; unreadable files are skipped with a
/// warning.
pub fn load_images<'a>(
    root: &Path,
    samples: impl IntoIterator<Item = &'a SampleRecord>,
) -> Vec<(SampleRecord, RgbImage)> {
    samples
        .into_iter()
        .filter_map(|s| match load_image(&root.join(&s.path)) {
            Ok(img) => Some((s.clone(), img)),
            Err(e) => {
                warn!("skipping corrupt image: {e}");
                None
            }
        })
        .collect()
}
