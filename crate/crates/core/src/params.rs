//! Named parameter and buffer storage shared by every module.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Trainable tensors plus non-trainable buffers (normalization running
/// statistics), both keyed by dotted path names such as `backbone.0.conv`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Checks that `other` holds the same names with the same shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        let describe = |m: &BTreeMap<String, Tensor>| -> Vec<(String, Vec<usize>)> {
            m.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
        };
        for (mine, theirs, what) in [
            (describe(&self.params), describe(&other.params), "parameter"),
            (describe(&self.buffers), describe(&other.buffers), "buffer"),
        ] {
            if mine.len() != theirs.len() {
                return Err(Error::Config(format!(
                    "{what} count differs: {} vs {}",
                    mine.len(),
                    theirs.len()
                )));
            }
            for ((n1, s1), (n2, s2)) in mine.iter().zip(&theirs) {
                if n1 != n2 || s1 != s2 {
                    return Err(Error::Config(format!(
                        "{what} `{n1}` {s1:?} does not match `{n2}` {s2:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Folds batch statistics into the running buffers:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats], momentum: f64) -> Result<()> {
        for s in stats {
            for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("{}.{suffix}", s.layer);
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| Error::Config(format!("missing buffer `{name}`")))?;
                for (r, v) in buf.data_mut().iter_mut().zip(values.iter()) {
                    *r = (1.0 - momentum) * *r + momentum * v;
                }
            }
        }
        Ok(())
    }

    /// Registers a convolution kernel `[out, in_per_group, kh, kw]` with
    /// He-uniform initialization and an optional zero bias.
    pub fn init_conv<R: Rng + ?Sized>(&mut self, prefix: &str, shape: [usize; 4], bias: bool, rng: &mut R) {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let bound = (6.0 / fan_in).sqrt();
        self.insert(format!("{prefix}.weight"), Tensor::uniform(&shape, bound, rng));
        if bias {
            self.insert(format!("{prefix}.bias"), Tensor::zeros(&[shape[0]]));
        }
    }

    /// Registers a dense layer `[out, in]`.
    pub fn init_linear<R: Rng + ?Sized>(&mut self, prefix: &str, out: usize, inp: usize, bias: bool, rng: &mut R) {
        let bound = (3.0 / inp as f64).sqrt();
        self.insert(format!("{prefix}.weight"), Tensor::uniform(&[out, inp], bound, rng));
        if bias {
            self.insert(format!("{prefix}.bias"), Tensor::zeros(&[out]));
        }
    }

    /// Registers a normalization layer: unit scale, optional zero shift,
    /// zero/unit running statistics.
    pub fn init_batch_norm(&mut self, prefix: &str, channels: usize, shift: bool) {
        self.insert(format!("{prefix}.gamma"), Tensor::ones(&[channels]));
        if shift {
            self.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
        }
        self.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]));
        self.insert_buffer(format!("{prefix}.running_var"), Tensor::ones(&[channels]));
    }

    /// Binds `{prefix}.weight` and, if present, `{prefix}.bias`.
    pub fn bind_weight_bias(&self, g: &mut Graph, prefix: &str) -> Result<(Var, Option<Var>)> {
        let w = g.param(self, &format!("{prefix}.weight"))?;
        let bias_name = format!("{prefix}.bias");
        let b = if self.params.contains_key(&bias_name) {
            Some(g.param(self, &bias_name)?)
        } else {
            None
        };
        Ok((w, b))
    }

    /// Applies the normalization layer registered under `prefix`.
    pub fn apply_batch_norm(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let gamma = g.param(self, &format!("{prefix}.gamma"))?;
        let beta_name = format!("{prefix}.beta");
        let beta = if self.params.contains_key(&beta_name) {
            Some(g.param(self, &beta_name)?)
        } else {
            None
        };
        let missing = |n: &str| Error::Config(format!("missing buffer `{prefix}.{n}`"));
        let mean = self
            .buffer(&format!("{prefix}.running_mean"))
            .ok_or_else(|| missing("running_mean"))?;
        let var = self
            .buffer(&format!("{prefix}.running_var"))
            .ok_or_else(|| missing("running_var"))?;
        g.batch_norm(x, gamma, beta, (mean.data(), var.data()), BN_EPS, prefix)
    }
}
