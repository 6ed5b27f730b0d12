//! The assembled network: trunk, feature extractors, relation-adaptive
//! correction and the four classifier heads, plus the training objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::feature_extractors::{FeatureExtractors, FeatureVars, PartSplitSpec};
use crate::graph::{Graph, Mode, Var};
use crate::objectives::{separation_loss_var, ClassifierHead, LossWeights};
use crate::params::ParamStore;
use crate::relation_adaptive::{RelationAdaptive, Squash};
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub input_height: usize,
    pub input_width: usize,
    /// Width `d` of every extracted feature.
    pub feature_dim: usize,
    /// Converter group count.
    pub groups: usize,
    /// Hidden width of the relation head.
    pub ram_hidden: usize,
    /// Output nonlinearity of the relation head.
    #[serde(default)]
    pub ram_squash: Squash,
    /// Side of the centered attention window.
    pub center_size: usize,
    /// Number of horizontal stripes.
    pub num_parts: usize,
    pub num_classes: usize,
    /// Off: the backbone-only baseline, where the pooled map is the sole
    /// embedding.
    pub concat: bool,
    /// Off: the center feature is a plain window average.
    pub cfm: bool,
    /// Off: relation weights are fixed at one, so `F_final = F_concat`.
    pub ram: bool,
    /// Feed the triplet loss with post-normalization embeddings.
    pub triplet_on_normalized: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            input_height: 64,
            input_width: 32,
            feature_dim: 32,
            groups: 4,
            ram_hidden: 32,
            ram_squash: Squash::Sigmoid,
            center_size: 2,
            num_parts: 2,
            num_classes: 10,
            concat: true,
            cfm: true,
            ram: true,
            triplet_on_normalized: false,
        }
    }
}

impl ModelConfig {
    /// Map shape `(C, H, W)`.
    pub fn map_shape(&self) -> Result<(usize, usize, usize)> {
        let (h, w) = self.backbone.output_size(self.input_height, self.input_width)?;
        Ok((self.backbone.channels(), h, w))
    }

    /// Width of the corrected feature (zero for the baseline).
    pub fn final_dim(&self) -> usize {
        if self.concat {
            (self.num_parts + 2) * self.feature_dim
        } else {
            0
        }
    }
}

#[derive(Clone, Debug)]
struct Heads {
    final_: ClassifierHead,
    backbone: ClassifierHead,
    global: ClassifierHead,
    center: ClassifierHead,
}

#[derive(Clone, Debug)]
pub struct OcNet {
    config: ModelConfig,
    backbone: Backbone,
    extractors: Option<FeatureExtractors>,
    ram: Option<RelationAdaptive>,
    bb_head: ClassifierHead,
    heads: Option<Heads>,
}

/// Everything a forward pass produces on the graph.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub map: Var,
    pub pooled: Var,
    pub features: Option<FeatureVars>,
    pub concat: Option<Var>,
    pub weights: Option<Var>,
    pub final_: Option<Var>,
}

/// Scalar loss nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub id: Var,
    pub tri: Var,
    pub sl: Var,
    pub total: Var,
}

/// Retrieval features for a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    /// `[N, final_dim]`.
    pub final_: Tensor,
    /// `[N, final_dim]`, the uncorrected concatenation.
    pub concat: Tensor,
    /// `[N, C]`.
    pub backbone: Tensor,
    /// `[N, d]` global and stripe features (empty width for the baseline).
    pub global: Tensor,
    pub parts: Vec<Tensor>,
}

impl OcNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let backbone = Backbone::new(config.backbone.clone())?;
        let (c, h, w) = config.map_shape()?;
        let d = config.feature_dim;
        let k = config.num_classes;
        if k == 0 {
            return Err(Error::Config("at least one training identity is required".into()));
        }
        let bb_head = ClassifierHead::new("head_backbone", c, k)?;
        let (extractors, ram, heads) = if config.concat {
            let split = PartSplitSpec {
                parts: config.num_parts,
            };
            split.validate(h)?;
            crate::feature_extractors::center_window(h, w, config.center_size)?;
            let extractors = FeatureExtractors::new(c, d, config.groups, split, config.center_size, config.cfm)?;
            let ram = if config.ram {
                Some(RelationAdaptive::new(config.final_dim(), config.ram_hidden)?.with_squash(config.ram_squash))
            } else {
                None
            };
            let heads = Heads {
                final_: ClassifierHead::new("head_final", config.final_dim(), k)?,
                backbone: bb_head.clone(),
                global: ClassifierHead::new("head_global", d, k)?,
                center: ClassifierHead::new("head_center", d, k)?,
            };
            (Some(extractors), ram, Some(heads))
        } else {
            (None, None, None)
        };
        Ok(Self {
            config,
            backbone,
            extractors,
            ram,
            bb_head,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn extractors(&self) -> Option<&FeatureExtractors> {
        self.extractors.as_ref()
    }

    pub fn relation_head(&self) -> Option<&RelationAdaptive> {
        self.ram.as_ref()
    }

    /// Fresh parameters; modules draw from one stream in a fixed order.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.backbone.init_params(&mut store, &mut rng);
        if let Some(ex) = &self.extractors {
            ex.init_params(&mut store, &mut rng);
        }
        if let Some(ram) = &self.ram {
            ram.init_params(&mut store, &mut rng);
        }
        self.bb_head.init_params(&mut store, &mut rng);
        if let Some(h) = &self.heads {
            for head in [&h.final_, &h.global, &h.center] {
                head.init_params(&mut store, &mut rng);
            }
        }
        store
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Result<ForwardVars> {
        let map = self.backbone.forward(g, store, images)?;
        let pooled = g.avg_pool(map)?;
        let Some(ex) = &self.extractors else {
            return Ok(ForwardVars {
                map,
                pooled,
                features: None,
                concat: None,
                weights: None,
                final_: None,
            });
        };
        let features = ex.forward(g, store, map)?;
        let mut slots = vec![features.global];
        slots.extend(&features.parts);
        slots.push(features.center);
        let concat = g.concat_cols(&slots)?;
        let (weights, final_) = match &self.ram {
            Some(ram) => {
                let w = ram.weights(g, store, concat)?;
                (Some(w), g.mul(concat, w)?)
            }
            None => (None, concat),
        };
        Ok(ForwardVars {
            map,
            pooled,
            features: Some(features),
            concat: Some(concat),
            weights,
            final_: Some(final_),
        })
    }

    /// Builds the training objective on top of a forward pass.
    ///
    /// Full model: ID and triplet terms over `(F_final, F_BB, f_g, f_c)`
    /// weighted by the lambdas, plus `gamma` times the separation loss.
    /// Baseline: unweighted ID and triplet terms on the pooled map, and a
    /// zero separation term.
    pub fn losses(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fwd: &ForwardVars,
        labels: &[usize],
        weights: &LossWeights,
    ) -> Result<LossVars> {
        let embed_of = |g: &mut Graph, head: &ClassifierHead, emb: Var| -> Result<(Var, Var)> {
            let hv = head.forward(g, store, emb)?;
            let tri_in = if self.config.triplet_on_normalized {
                hv.normalized
            } else {
                emb
            };
            let ce = g.cross_entropy(hv.logits, labels, weights.smoothing)?;
            let tri = g.triplet_hard(tri_in, labels, weights.margin)?;
            Ok((ce, tri))
        };
        let (Some(heads), Some(feats), Some(final_)) = (&self.heads, &fwd.features, fwd.final_) else {
            let (ce, tri) = embed_of(g, &self.bb_head, fwd.pooled)?;
            let zero = g.input(Tensor::scalar(0.0));
            let total = g.weighted_sum(&[(ce, 1.0), (tri, 1.0)])?;
            return Ok(LossVars {
                id: ce,
                tri,
                sl: zero,
                total,
            });
        };
        let supervised = [
            (&heads.final_, final_),
            (&heads.backbone, fwd.pooled),
            (&heads.global, feats.global),
            (&heads.center, feats.center),
        ];
        let mut ce_terms = Vec::with_capacity(4);
        let mut tri_terms = Vec::with_capacity(4);
        for ((head, emb), &lambda) in supervised.into_iter().zip(&weights.lambdas) {
            let (ce, tri) = embed_of(g, head, emb)?;
            ce_terms.push((ce, lambda));
            tri_terms.push((tri, lambda));
        }
        let id = g.weighted_sum(&ce_terms)?;
        let tri = g.weighted_sum(&tri_terms)?;
        let sl = separation_loss_var(g, feats.global, &feats.parts)?;
        let total = g.weighted_sum(&[(id, 1.0), (tri, 1.0), (sl, weights.gamma)])?;
        Ok(LossVars { id, tri, sl, total })
    }

    /// Evaluation-mode features, computed in chunks of `batch_size` images.
    pub fn embed(&self, store: &ParamStore, images: &Tensor, batch_size: usize) -> Result<Embeddings> {
        if images.rank() != 4 {
            return Err(Error::Validation(format!("images {:?} are not rank 4", images.shape())));
        }
        let n = images.dim(0);
        let mut finals = Vec::new();
        let mut concats = Vec::new();
        let mut pooled = Vec::new();
        let mut globals = Vec::new();
        let mut parts: Vec<Vec<Tensor>> = vec![Vec::new(); self.config.num_parts];
        let step = batch_size.max(1);
        for start in (0..n).step_by(step) {
            let rows: Vec<usize> = (start..(start + step).min(n)).collect();
            let mut g = Graph::new(Mode::Eval);
            let x = g.input(images.select_rows(&rows));
            let fwd = self.forward(&mut g, store, x)?;
            pooled.push(g.value(fwd.pooled).clone());
            let empty = Tensor::zeros(&[rows.len(), 0]);
            let get = |v: Option<Var>| v.map_or_else(|| empty.clone(), |v| g.value(v).clone());
            finals.push(get(fwd.final_));
            concats.push(get(fwd.concat));
            globals.push(get(fwd.features.as_ref().map(|f| f.global)));
            for (p, out) in parts.iter_mut().enumerate() {
                out.push(get(fwd.features.as_ref().map(|f| f.parts[p])));
            }
        }
        Ok(Embeddings {
            final_: Tensor::cat_rows(&finals)?,
            concat: Tensor::cat_rows(&concats)?,
            backbone: Tensor::cat_rows(&pooled)?,
            global: Tensor::cat_rows(&globals)?,
            parts: parts.iter().map(|p| Tensor::cat_rows(p)).collect::<Result<_>>()?,
        })
    }
}
