//! One-batch training steps.

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::model::OcNet;
use crate::objectives::LossWeights;
use crate::optim::{Adam, OptimConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Running-statistics momentum of the normalization layers.
pub const BN_MOMENTUM: f64 = 0.1;

/// Loss values logged for one step (1-based).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub step: usize,
    pub id: f64,
    pub tri: f64,
    pub sl: f64,
    pub total: f64,
}

pub struct Trainer {
    model: OcNet,
    store: ParamStore,
    optimizer: Adam,
    weights: LossWeights,
}

impl Trainer {
    pub fn new(model: OcNet, store: ParamStore, optim: OptimConfig, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        model.init_params(0).check_compatible(&store)?;
        Ok(Self {
            model,
            store,
            optimizer: Adam::new(optim),
            weights,
        })
    }

    pub fn model(&self) -> &OcNet {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    /// Forward, backward and one optimizer update on `images [N, 3, H, W]`.
    pub fn step(&mut self, images: &Tensor, labels: &[usize]) -> Result<StepLosses> {
        let step = self.optimizer.steps() + 1;
        let mut g = Graph::new(Mode::Train);
        let x = g.input(images.clone());
        let fwd = self.model.forward(&mut g, &self.store, x)?;
        let loss = self.model.losses(&mut g, &self.store, &fwd, labels, &self.weights)?;
        let out = StepLosses {
            step,
            id: g.value(loss.id).item(),
            tri: g.value(loss.tri).item(),
            sl: g.value(loss.sl).item(),
            total: g.value(loss.total).item(),
        };
        if ![out.id, out.tri, out.sl, out.total].iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        let grads = g.backward(loss.total)?.param_grads(&g);
        self.optimizer.step(&mut self.store, &grads)?;
        let stats = g.take_batch_stats();
        self.store.apply_batch_stats(&stats, BN_MOMENTUM)?;
        Ok(out)
    }
}
