//! The run configuration: one flat TOML table. Every key is optional and
//! defaults to the values below; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ocnet_core::backbone::BackboneConfig;
use ocnet_core::objectives::LossWeights;
use ocnet_core::optim::OptimConfig;
use ocnet_core::relation_adaptive::Squash;
use ocnet_core::retrieval_eval::Protocol;
use ocnet_core::{ModelConfig, OcNet};
use ocnet_data::{AugmentConfig, SyntheticConfig};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset root; relative paths resolve against the config file.
    pub data_dir: PathBuf,
    /// Output directory for checkpoints, logs and reports.
    pub out_dir: PathBuf,

    pub num_identities: usize,
    pub images_per_identity: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub occlusion_fraction: f64,
    pub object_share: f64,
    pub pedestrian_share: f64,
    pub num_cameras: u32,
    pub train_identity_fraction: f64,
    pub queries_per_camera: usize,
    pub data_seed: u64,

    pub backbone_widths: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    /// `d`, width of every extracted feature.
    pub feature_dim: usize,
    /// `G`, converter groups.
    pub groups: usize,
    /// `h`, relation head hidden width.
    pub ram_hidden: usize,
    /// Relation head output: `sigmoid` or `identity`.
    pub ram_squash: Squash,
    /// `W_c`, side of the center window.
    pub center_size: usize,
    /// `P`, number of horizontal stripes.
    pub num_parts: usize,
    pub concat: bool,
    pub cfm: bool,
    pub sl: bool,
    pub ram: bool,
    pub triplet_on_normalized: bool,

    pub lambda_final: f64,
    pub lambda_backbone: f64,
    pub lambda_global: f64,
    pub lambda_center: f64,
    pub gamma: f64,
    pub margin: f64,
    pub smoothing: f64,

    pub alpha: f64,
    pub normalize_features: bool,
    pub exclude_same_camera: bool,

    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub warmup_factor: f64,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub batch_p: usize,
    pub batch_k: usize,
    pub flip_prob: f64,
    pub pad: usize,
    pub erase_prob: f64,
    /// Seeds parameter init, batch sampling and augmentation.
    pub seed: u64,
    pub eval_batch_size: usize,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = SyntheticConfig::default();
        let model = ModelConfig::default();
        let loss = LossWeights::default();
        let optim = OptimConfig::default();
        let aug = AugmentConfig::default();
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            num_identities: data.num_identities,
            images_per_identity: data.images_per_identity,
            image_height: data.image_height,
            image_width: data.image_width,
            occlusion_fraction: data.occlusion_fraction,
            object_share: data.object_share,
            pedestrian_share: data.pedestrian_share,
            num_cameras: data.num_cameras,
            train_identity_fraction: data.train_identity_fraction,
            queries_per_camera: data.queries_per_camera,
            data_seed: data.seed,
            backbone_widths: model.backbone.widths,
            backbone_strides: model.backbone.strides,
            feature_dim: model.feature_dim,
            groups: model.groups,
            ram_hidden: model.ram_hidden,
            ram_squash: model.ram_squash,
            center_size: model.center_size,
            num_parts: model.num_parts,
            concat: model.concat,
            cfm: model.cfm,
            sl: true,
            ram: model.ram,
            triplet_on_normalized: model.triplet_on_normalized,
            lambda_final: loss.lambdas[0],
            lambda_backbone: loss.lambdas[1],
            lambda_global: loss.lambdas[2],
            lambda_center: loss.lambdas[3],
            gamma: loss.gamma,
            margin: loss.margin,
            smoothing: loss.smoothing,
            alpha: 1.0,
            normalize_features: false,
            exclude_same_camera: true,
            steps: 100,
            lr: optim.lr,
            weight_decay: optim.weight_decay,
            warmup_steps: optim.warmup_steps,
            warmup_factor: optim.warmup_factor,
            milestones: optim.milestones,
            decay_factor: optim.decay_factor,
            batch_p: 4,
            batch_k: 4,
            flip_prob: aug.flip_prob,
            pad: aug.pad,
            erase_prob: aug.erase_prob,
            seed: 0,
            eval_batch_size: 64,
            log_every: 10,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).context("invalid run config")?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` and resolves relative directories against its parent.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for dir in [&mut config.data_dir, &mut config.out_dir] {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED_CONFIG), self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic().validate()?;
        self.loss_weights().validate()?;
        self.augment().validate()?;
        OcNet::new(self.model(1))?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            bail!("alpha {} must be finite and >= 0", self.alpha);
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!("learning rate {} must be positive", self.lr);
        }
        if self.batch_p < 2 || self.batch_k < 2 {
            bail!("batches need at least two identities with two images each");
        }
        if self.eval_batch_size == 0 {
            bail!("eval_batch_size must be positive");
        }
        Ok(())
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            num_identities: self.num_identities,
            images_per_identity: self.images_per_identity,
            image_height: self.image_height,
            image_width: self.image_width,
            occlusion_fraction: self.occlusion_fraction,
            object_share: self.object_share,
            pedestrian_share: self.pedestrian_share,
            num_cameras: self.num_cameras,
            train_identity_fraction: self.train_identity_fraction,
            queries_per_camera: self.queries_per_camera,
            seed: self.data_seed,
        }
    }

    pub fn model(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                widths: self.backbone_widths.clone(),
                strides: self.backbone_strides.clone(),
            },
            input_height: self.image_height,
            input_width: self.image_width,
            feature_dim: self.feature_dim,
            groups: self.groups,
            ram_hidden: self.ram_hidden,
            ram_squash: self.ram_squash,
            center_size: self.center_size,
            num_parts: self.num_parts,
            num_classes,
            concat: self.concat,
            cfm: self.cfm,
            ram: self.ram,
            triplet_on_normalized: self.triplet_on_normalized,
        }
    }

    /// Loss weights with the separation term switched off when `sl` is.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambdas: [
                self.lambda_final,
                self.lambda_backbone,
                self.lambda_global,
                self.lambda_center,
            ],
            gamma: if self.sl { self.gamma } else { 0.0 },
            margin: self.margin,
            smoothing: self.smoothing,
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            warmup_factor: self.warmup_factor,
            milestones: self.milestones.clone(),
            decay_factor: self.decay_factor,
            ..OptimConfig::default()
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            height: self.image_height,
            width: self.image_width,
            flip_prob: self.flip_prob,
            pad: self.pad,
            erase_prob: self.erase_prob,
            ..AugmentConfig::default()
        }
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            exclude_same_camera: self.exclude_same_camera,
        }
    }
}
