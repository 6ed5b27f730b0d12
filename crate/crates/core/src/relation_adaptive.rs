//! Relation-adaptive correction: a two-layer MLP over the concatenated
//! features predicts one weight in (0, 1) per coordinate, and the
//! concatenation is rescaled by those weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::types::FeatureVector;

/// `[batch, slots * d]` with the fixed slot layout
/// `[f_g | stripe_0 .. stripe_{P-1} | f_c]` (for two stripes:
/// `[f_g | f_t | f_b | f_c]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ConcatFeature {
    values: Tensor,
    slot_dim: usize,
}

impl ConcatFeature {
    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn slot_dim(&self) -> usize {
        self.slot_dim
    }

    pub fn slots(&self) -> usize {
        self.values.dim(1) / self.slot_dim
    }

    /// Copies slot `k` back out as a `[batch, d]` vector.
    pub fn slot(&self, k: usize) -> Result<FeatureVector> {
        if k >= self.slots() {
            return Err(Error::Validation(format!("slot {k} of {}", self.slots())));
        }
        let n = self.values.dim(0);
        let mut data = Vec::with_capacity(n * self.slot_dim);
        for r in 0..n {
            data.extend_from_slice(&self.values.row(r)[k * self.slot_dim..(k + 1) * self.slot_dim]);
        }
        FeatureVector::new(Tensor::new(&[n, self.slot_dim], data)?)
    }
}

/// Concatenates named features in slot order. Every feature must share the
/// first feature's shape.
pub fn concat_features(features: &[(&str, &FeatureVector)]) -> Result<ConcatFeature> {
    let (_, first) = features
        .first()
        .ok_or_else(|| Error::Validation("no features to concatenate".into()))?;
    for (name, f) in features {
        if f.tensor().shape() != first.tensor().shape() {
            return Err(Error::Validation(format!(
                "feature `{name}` has shape {:?}, expected {:?}",
                f.tensor().shape(),
                first.tensor().shape()
            )));
        }
    }
    let mut g = Graph::new(Mode::Eval);
    let vars: Vec<Var> = features.iter().map(|(_, f)| g.input(f.tensor().clone())).collect();
    let c = g.concat_cols(&vars)?;
    Ok(ConcatFeature {
        values: g.value(c).clone(),
        slot_dim: first.dim(),
    })
}

/// Output nonlinearity of the weight head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Squash {
    /// Weights in (0, 1).
    #[default]
    Sigmoid,
    /// Raw second-layer output, unbounded.
    Identity,
}

/// The shared two-layer weight head:
/// `F_w = squash(W2 relu(W1 x + b1) + b2)`, sigmoid by default.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationAdaptive {
    pub prefix: String,
    pub width: usize,
    pub hidden: usize,
    pub squash: Squash,
}

impl RelationAdaptive {
    pub fn new(width: usize, hidden: usize) -> Result<Self> {
        if width == 0 || hidden == 0 {
            return Err(Error::Config("relation head widths must be positive".into()));
        }
        Ok(Self {
            prefix: "ram".into(),
            width,
            hidden,
            squash: Squash::Sigmoid,
        })
    }

    pub fn with_squash(mut self, squash: Squash) -> Self {
        self.squash = squash;
        self
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.init_linear(&format!("{}.fc1", self.prefix), self.hidden, self.width, true, rng);
        store.init_linear(&format!("{}.fc2", self.prefix), self.width, self.hidden, true, rng);
    }

    pub fn weights(&self, g: &mut Graph, store: &ParamStore, concat: Var) -> Result<Var> {
        let shape = g.value(concat).shape();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::Validation(format!(
                "relation head expects width {}, got {shape:?}",
                self.width
            )));
        }
        let (w1, b1) = store.bind_weight_bias(g, &format!("{}.fc1", self.prefix))?;
        let h = g.linear(concat, w1, b1)?;
        if !g.value(h).is_finite() {
            return Err(Error::Numeric(
                "relation head layer 1 produced non-finite values".into(),
            ));
        }
        let h = g.relu(h);
        let (w2, b2) = store.bind_weight_bias(g, &format!("{}.fc2", self.prefix))?;
        let z = g.linear(h, w2, b2)?;
        if !g.value(z).is_finite() {
            return Err(Error::Numeric(
                "relation head layer 2 produced non-finite values".into(),
            ));
        }
        Ok(match self.squash {
            Squash::Sigmoid => g.sigmoid(z),
            Squash::Identity => z,
        })
    }
}

pub fn ram_weights(concat: &ConcatFeature, ram: &RelationAdaptive, store: &ParamStore) -> Result<FeatureVector> {
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(concat.tensor().clone());
    let w = ram.weights(&mut g, store, x)?;
    FeatureVector::new(g.value(w).clone())
}

/// Elementwise `F_final = F_w * F_concat`.
pub fn correct(concat: &ConcatFeature, weights: &FeatureVector) -> Result<FeatureVector> {
    let product = concat
        .tensor()
        .zip_map(weights.tensor(), |x, w| x * w)
        .map_err(|e| e.context("relation weights"))?;
    FeatureVector::new(product)
}
