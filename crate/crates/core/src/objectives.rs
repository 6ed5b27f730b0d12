//! Classification heads and the training objective: label-smoothed cross
//! entropy, batch-hard triplet loss, the separation loss between the global
//! and stripe features, and their weighted aggregation.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::types::FeatureVector;

/// Guard added to each norm inside the cosine.
pub const COSINE_EPS: f64 = 1e-12;

/// Loss weights. `lambdas` weight the supervised features in the order
/// `(F_final, F_BB, f_g, f_c)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambdas: [f64; 4],
    pub gamma: f64,
    pub margin: f64,
    pub smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambdas: [0.8, 0.5, 0.25, 0.25],
            gamma: 1.0,
            margin: 0.3,
            smoothing: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !self.lambdas.iter().all(|&l| ok(l)) || !ok(self.gamma) || !ok(self.margin) {
            return Err(Error::Validation(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Validation(format!(
                "label smoothing {} outside [0, 1)",
                self.smoothing
            )));
        }
        Ok(())
    }
}

/// Normalization (scale only) followed by a bias-free linear classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifierHead {
    pub prefix: String,
    pub in_dim: usize,
    pub num_classes: usize,
}

/// The embedding after normalization and the class logits.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub normalized: Var,
    pub logits: Var,
}

impl ClassifierHead {
    pub fn new(prefix: &str, in_dim: usize, num_classes: usize) -> Result<Self> {
        if in_dim == 0 || num_classes == 0 {
            return Err(Error::Config(format!("head `{prefix}` needs positive dims")));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            in_dim,
            num_classes,
        })
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.init_batch_norm(&format!("{}.bn", self.prefix), self.in_dim, false);
        let w = Tensor::randn(&[self.num_classes, self.in_dim], 0.001, rng);
        store.insert(format!("{}.fc.weight", self.prefix), w);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, emb: Var) -> Result<HeadVars> {
        let normalized = store.apply_batch_norm(g, &format!("{}.bn", self.prefix), emb)?;
        let (w, _) = store.bind_weight_bias(g, &format!("{}.fc", self.prefix))?;
        let logits = g.linear(normalized, w, None)?;
        Ok(HeadVars { normalized, logits })
    }
}

/// Sum over stripes of `1 + mean_batch cos(f_g, stripe)`; for two stripes
/// this is `(1 + cos(f_g, f_t)) + (1 + cos(f_g, f_b))`.
pub fn separation_loss_var(g: &mut Graph, global: Var, parts: &[Var]) -> Result<Var> {
    let one = g.input(Tensor::scalar(1.0));
    let mut terms = vec![(one, parts.len() as f64)];
    for &p in parts {
        let cos = g.cosine_rows(global, p, COSINE_EPS)?;
        terms.push((g.mean(cos), 1.0));
    }
    g.weighted_sum(&terms)
}

pub fn cross_entropy_label_smooth(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<f64> {
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(logits.clone());
    let l = g.cross_entropy(x, labels, smoothing)?;
    Ok(g.value(l).item())
}

/// Batch-hard triplet loss. Every identity present must have at least two
/// samples and at least two identities must be present.
pub fn triplet_margin(embeddings: &FeatureVector, labels: &[usize], margin: f64) -> Result<f64> {
    check_pk_composition(labels)?;
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(embeddings.tensor().clone());
    let l = g.triplet_hard(x, labels, margin)?;
    Ok(g.value(l).item())
}

/// Checks the batch composition batch-hard mining needs.
pub fn check_pk_composition(labels: &[usize]) -> Result<()> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((id, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Validation(format!(
            "identity {id} has a single sample; triplet mining needs a positive"
        )));
    }
    if counts.len() < 2 {
        return Err(Error::Validation("triplet mining needs at least two identities".into()));
    }
    Ok(())
}

/// Separation loss of `f_g` against the stripe features, averaged over the
/// batch. Zero-norm rows are rejected.
pub fn separation_loss(global: &FeatureVector, parts: &[&FeatureVector]) -> Result<f64> {
    for (name, f) in std::iter::once(("f_g".to_string(), global))
        .chain(parts.iter().enumerate().map(|(i, f)| (format!("part {i}"), *f)))
    {
        if f.tensor().shape() != global.tensor().shape() {
            return Err(Error::Validation(format!("{name} shape mismatch")));
        }
        if (0..f.batch()).any(|r| f.row(r).iter().all(|&v| v == 0.0)) {
            return Err(Error::Numeric(format!("{name} has a zero-norm row")));
        }
    }
    let mut g = Graph::new(Mode::Eval);
    let gv = g.input(global.tensor().clone());
    let pv: Vec<Var> = parts.iter().map(|p| g.input(p.tensor().clone())).collect();
    let l = separation_loss_var(&mut g, gv, &pv)?;
    Ok(g.value(l).item())
}

/// `sum_i lambda_i * loss_i` for the ID and triplet terms, each given in the
/// order `(F_final, F_BB, f_g, f_c)`.
pub fn aggregate_id_tri(ce: &[f64], tri: &[f64], weights: &LossWeights) -> Result<(f64, f64)> {
    if ce.len() != 4 || tri.len() != 4 {
        return Err(Error::Validation(format!(
            "expected four per-feature losses each, got {} and {}",
            ce.len(),
            tri.len()
        )));
    }
    let dot = |v: &[f64]| -> f64 { weights.lambdas.iter().zip(v).map(|(l, x)| l * x).sum() };
    Ok((dot(ce), dot(tri)))
}

pub fn total_loss(id: f64, tri: f64, sl: f64, gamma: f64) -> f64 {
    id + tri + gamma * sl
}
