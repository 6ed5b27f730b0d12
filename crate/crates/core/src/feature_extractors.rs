//! Heads that turn the backbone map into aligned features: the grouped
//! Converter for the global and stripe features, and the Center-Focus
//! attention for the center feature.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Graph, Mode, Var};
use crate::params::ParamStore;
use crate::types::{FeatureMap, FeatureVector};

/// Grouped 1x1 convolution from `in_channels` to `out_channels` followed by
/// global average pooling. Output channel `c` reads only input group
/// `c * groups / out_channels`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Converter {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
}

impl Converter {
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, groups: usize) -> Result<Self> {
        if groups == 0
            || !in_channels.is_multiple_of(groups)
            || !out_channels.is_multiple_of(groups)
            || out_channels == 0
        {
            return Err(Error::Config(format!(
                "converter `{prefix}`: {in_channels} -> {out_channels} channels do not split into {groups} groups"
            )));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            in_channels,
            out_channels,
            groups,
        })
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.init_conv(
            &self.prefix,
            [self.out_channels, self.in_channels / self.groups, 1, 1],
            true,
            rng,
        );
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, map: Var) -> Result<Var> {
        let shape = g.value(map).shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::Config(format!(
                "converter `{}` expects {} channels, got map {shape:?}",
                self.prefix, self.in_channels
            )));
        }
        let (w, b) = store.bind_weight_bias(g, &self.prefix)?;
        let y = g.conv2d(map, w, b, ConvSpec::new(1, 0, self.groups))?;
        g.avg_pool(y)
    }

    /// Input group feeding output channel `c`.
    pub fn group_of_output(&self, c: usize) -> usize {
        c * self.groups / self.out_channels
    }
}

/// Top-to-bottom horizontal stripes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartSplitSpec {
    pub parts: usize,
}

impl PartSplitSpec {
    pub fn validate(&self, height: usize) -> Result<()> {
        if self.parts == 0 || !height.is_multiple_of(self.parts) {
            return Err(Error::Config(format!(
                "map height {height} does not split into {} parts",
                self.parts
            )));
        }
        Ok(())
    }
}

/// Splits a `[N, C, H, W]` map into `parts` row-contiguous stripes ordered
/// top to bottom.
pub fn split_parts_var(g: &mut Graph, map: Var, spec: PartSplitSpec) -> Result<Vec<Var>> {
    let shape = g.value(map).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Validation(format!("cannot split {shape:?}")));
    }
    spec.validate(shape[2])?;
    let rows = shape[2] / spec.parts;
    (0..spec.parts)
        .map(|p| g.crop(map, p * rows, 0, rows, shape[3]))
        .collect()
}

/// Offsets of the centered `size x size` window, flooring when the slack is odd.
pub fn center_window(height: usize, width: usize, size: usize) -> Result<(usize, usize)> {
    if size == 0 || size > height.min(width) {
        return Err(Error::Config(format!(
            "center window {size} does not fit a {height}x{width} map"
        )));
    }
    Ok(((height - size) / 2, (width - size) / 2))
}

/// Spatial softmax attention restricted to the centered window. With
/// `attention` off the window is averaged uniformly and no scoring weights
/// exist.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CenterFocus {
    pub prefix: String,
    pub channels: usize,
    pub center_size: usize,
    pub attention: bool,
}

/// Output of [`CenterFocus::attend`]: the attended `[N, C]` feature and, with
/// attention on, the `[N, 1, Wc, Wc]` probability map.
#[derive(Clone, Copy, Debug)]
pub struct CenterFocusVars {
    pub feature: Var,
    pub prob: Option<Var>,
}

impl CenterFocus {
    pub fn new(prefix: &str, channels: usize, center_size: usize, attention: bool) -> Result<Self> {
        if center_size == 0 || channels == 0 {
            return Err(Error::Config("center size and channels must be positive".into()));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            channels,
            center_size,
            attention,
        })
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        if self.attention {
            store.init_conv(&format!("{}.score", self.prefix), [1, self.channels, 1, 1], false, rng);
        }
    }

    pub fn attend(&self, g: &mut Graph, store: &ParamStore, map: Var) -> Result<CenterFocusVars> {
        let shape = g.value(map).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Config(format!(
                "center focus expects {} channels, got map {shape:?}",
                self.channels
            )));
        }
        let (top, left) = center_window(shape[2], shape[3], self.center_size)?;
        let window = g.crop(map, top, left, self.center_size, self.center_size)?;
        if !self.attention {
            let feature = g.avg_pool(window)?;
            return Ok(CenterFocusVars { feature, prob: None });
        }
        let (w, _) = store.bind_weight_bias(g, &format!("{}.score", self.prefix))?;
        let logits = g.conv2d(window, w, None, ConvSpec::new(1, 0, 1))?;
        let prob = g.spatial_softmax(logits)?;
        let feature = g.attention_pool(window, prob)?;
        Ok(CenterFocusVars {
            feature,
            prob: Some(prob),
        })
    }
}

/// The global, stripe and center extractors sharing one backbone map. The
/// center feature is projected from `C` to `d` so all features share a width.
#[derive(Clone, Debug)]
pub struct FeatureExtractors {
    pub global: Converter,
    pub parts: Vec<Converter>,
    pub center: CenterFocus,
    pub center_proj: String,
    pub split: PartSplitSpec,
    pub feature_dim: usize,
}

/// Per-image features on a graph; `parts` holds the stripes top to bottom.
#[derive(Clone, Debug)]
pub struct FeatureVars {
    pub global: Var,
    pub parts: Vec<Var>,
    pub center: Var,
    pub center_prob: Option<Var>,
}

impl FeatureExtractors {
    pub fn new(
        channels: usize,
        feature_dim: usize,
        groups: usize,
        split: PartSplitSpec,
        center_size: usize,
        attention: bool,
    ) -> Result<Self> {
        if split.parts == 0 {
            return Err(Error::Config("at least one part is required".into()));
        }
        let parts = (0..split.parts)
            .map(|p| Converter::new(&format!("cm_part{p}"), channels, feature_dim, groups))
            .collect::<Result<_>>()?;
        Ok(Self {
            global: Converter::new("cm_global", channels, feature_dim, groups)?,
            parts,
            center: CenterFocus::new("cfm", channels, center_size, attention)?,
            center_proj: "cfm.proj".into(),
            split,
            feature_dim,
        })
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.global.init_params(store, rng);
        for p in &self.parts {
            p.init_params(store, rng);
        }
        self.center.init_params(store, rng);
        store.init_linear(&self.center_proj, self.feature_dim, self.center.channels, true, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, map: Var) -> Result<FeatureVars> {
        let global = self.global.forward(g, store, map).map_err(|e| e.context("f_g"))?;
        let stripes = split_parts_var(g, map, self.split)?;
        let parts = self
            .parts
            .iter()
            .zip(stripes)
            .enumerate()
            .map(|(i, (cm, stripe))| {
                cm.forward(g, store, stripe)
                    .map_err(|e| e.context(&format!("part {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let cf = self.center.attend(g, store, map).map_err(|e| e.context("f_c"))?;
        let (w, b) = store.bind_weight_bias(g, &self.center_proj)?;
        let center = g.linear(cf.feature, w, b).map_err(|e| e.context("f_c"))?;
        Ok(FeatureVars {
            global,
            parts,
            center,
            center_prob: cf.prob,
        })
    }
}

pub fn converter(map: &FeatureMap, cm: &Converter, store: &ParamStore) -> Result<FeatureVector> {
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(map.tensor().clone());
    let y = cm.forward(&mut g, store, x)?;
    FeatureVector::new(g.value(y).clone())
}

pub fn split_parts(map: &FeatureMap, spec: PartSplitSpec) -> Result<Vec<FeatureMap>> {
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(map.tensor().clone());
    split_parts_var(&mut g, x, spec)?
        .into_iter()
        .map(|v| FeatureMap::new(g.value(v).clone()))
        .collect()
}

/// Center-focus output before the width projection.
#[derive(Clone, Debug)]
pub struct CenterFocusOutput {
    pub feature: FeatureVector,
    /// `[N, 1, Wc, Wc]`; uniform when attention is off.
    pub prob: crate::tensor::Tensor,
}

pub fn center_focus(map: &FeatureMap, cf: &CenterFocus, store: &ParamStore) -> Result<CenterFocusOutput> {
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(map.tensor().clone());
    let out = cf.attend(&mut g, store, x)?;
    let n = map.tensor().dim(0);
    let cells = cf.center_size * cf.center_size;
    let prob = match out.prob {
        Some(p) => g.value(p).clone(),
        None => crate::tensor::Tensor::full(&[n, 1, cf.center_size, cf.center_size], 1.0 / cells as f64),
    };
    Ok(CenterFocusOutput {
        feature: FeatureVector::new(g.value(out.feature).clone())?,
        prob,
    })
}

/// `(f_g, f_t, f_b, f_c)` for a two-part split; with more parts the stripes
/// are returned in order between the global and center features.
pub fn extract_all(
    map: &FeatureMap,
    heads: &FeatureExtractors,
    store: &ParamStore,
) -> Result<(FeatureVector, Vec<FeatureVector>, FeatureVector)> {
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(map.tensor().clone());
    let out = heads.forward(&mut g, store, x)?;
    let parts = out
        .parts
        .iter()
        .map(|&v| FeatureVector::new(g.value(v).clone()))
        .collect::<Result<_>>()?;
    Ok((
        FeatureVector::new(g.value(out.global).clone())?,
        parts,
        FeatureVector::new(g.value(out.center).clone())?,
    ))
}
