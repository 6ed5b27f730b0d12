//! Dataset descriptors and the `index.tsv` manifest.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "index.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    /// Directory names accepted when loading, in preference order.
    pub fn dir_aliases(self) -> &'static [&'static str] {
        match self {
            Split::Train => &["train", "bounding_box_train"],
            Split::Query => &["query"],
            Split::Gallery => &["gallery", "bounding_box_test"],
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::Validation(format!("unknown split `{other}`"))),
        }
    }
}

/// Kind of occlusion rendered into a sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OcclusionTag {
    #[default]
    None,
    Object,
    /// Pedestrian interference: a second person inside the box.
    Pedestrian,
}

impl OcclusionTag {
    pub fn is_occluded(self) -> bool {
        self != OcclusionTag::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OcclusionTag::None => "none",
            OcclusionTag::Object => "object",
            OcclusionTag::Pedestrian => "pi",
        }
    }
}

impl fmt::Display for OcclusionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OcclusionTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(OcclusionTag::None),
            "object" => Ok(OcclusionTag::Object),
            "pi" => Ok(OcclusionTag::Pedestrian),
            other => Err(Error::Validation(format!("unknown occlusion tag `{other}`"))),
        }
    }
}

/// One image in a dataset. `path` is relative to the dataset root, with `/`
/// separators.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub path: String,
    pub identity: i64,
    pub camera: u32,
    pub split: Split,
    pub occlusion: OcclusionTag,
}

impl SampleRecord {
    /// Identity -1 marks a distractor.
    pub fn is_distractor(&self) -> bool {
        self.identity == -1
    }

    /// Identity 0 marks a junk image.
    pub fn is_junk(&self) -> bool {
        self.identity == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub samples: Vec<SampleRecord>,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("path\tidentity\tcamera\tsplit\tocclusion\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                s.path, s.identity, s.camera, s.split, s.occlusion
            ));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("path\tidentity\tcamera\tsplit\tocclusion") {
            return Err(Error::Validation("manifest header mismatch".into()));
        }
        let samples = lines
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, line)| {
                let f: Vec<&str> = line.split('\t').collect();
                let bad = || Error::Validation(format!("manifest line {}: `{line}`", i + 2));
                if f.len() != 5 {
                    return Err(bad());
                }
                Ok(SampleRecord {
                    path: f[0].to_string(),
                    identity: f[1].parse().map_err(|_| bad())?,
                    camera: f[2].parse().map_err(|_| bad())?,
                    split: f[3].parse()?,
                    occlusion: f[4].parse()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    pub fn write_manifest(&self, root: &Path) -> Result<()> {
        fs::write(root.join(MANIFEST), self.to_tsv())?;
        Ok(())
    }

    pub fn read_manifest(root: &Path) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(root.join(MANIFEST))?)
    }
}
