//! Desk-scale convolutional trunk producing the backbone feature map and its
//! pooled vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Graph, Mode, Var};
use crate::params::ParamStore;
use crate::types::{FeatureMap, FeatureVector, ImageBatch};

/// A plain stack of `conv3x3 -> norm -> relu` stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels of each stage; the last entry is the map's channel count.
    pub widths: Vec<usize>,
    /// Stride of each stage.
    pub strides: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128],
            strides: vec![2, 2, 2],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "{} stage widths for {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("stage widths and strides must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn downsampling(&self) -> usize {
        self.strides.iter().product()
    }

    /// Spatial size of the map for a given input size. The input must be
    /// divisible by the total downsampling, and the map must have an even
    /// height of at least 2 and a width of at least 2.
    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let f = self.downsampling();
        if !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "input {height}x{width} is not divisible by the total downsampling {f}"
            )));
        }
        let (h, w) = (height / f, width / f);
        if h < 2 || h % 2 != 0 || w < 2 {
            return Err(Error::Config(format!(
                "feature map {h}x{w} needs an even height >= 2 and width >= 2"
            )));
        }
        Ok((h, w))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    prefix: String,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            prefix: "backbone".into(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let mut cin = 3;
        for (i, &cout) in self.config.widths.iter().enumerate() {
            store.init_conv(&format!("{}.{i}.conv", self.prefix), [cout, cin, 3, 3], false, rng);
            store.init_batch_norm(&format!("{}.{i}.bn", self.prefix), cout, true);
            cin = cout;
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Result<Var> {
        let shape = g.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Validation(format!(
                "backbone input {shape:?} is not [N, 3, H, W]"
            )));
        }
        self.config.output_size(shape[2], shape[3])?;
        let mut x = images;
        for (i, &stride) in self.config.strides.iter().enumerate() {
            let (w, _) = store.bind_weight_bias(g, &format!("{}.{i}.conv", self.prefix))?;
            x = g.conv2d(x, w, None, ConvSpec::new(stride, 1, 1))?;
            x = store.apply_batch_norm(g, &format!("{}.{i}.bn", self.prefix), x)?;
            x = g.relu(x);
        }
        Ok(x)
    }
}

/// Runs the trunk in evaluation mode.
pub fn extract_feature_map(images: &ImageBatch, backbone: &Backbone, store: &ParamStore) -> Result<FeatureMap> {
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(images.tensor().clone());
    let y = backbone.forward(&mut g, store, x)?;
    FeatureMap::new(g.value(y).clone())
}

/// Channel-wise spatial average.
pub fn global_pool(map: &FeatureMap) -> Result<FeatureVector> {
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(map.tensor().clone());
    let y = g.avg_pool(x)?;
    FeatureVector::new(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn trunk(config: BackboneConfig) -> (Backbone, ParamStore) {
        let b = Backbone::new(config).unwrap();
        let mut store = ParamStore::new();
        b.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        (b, store)
    }

    #[test]
    fn desk_scale_map_is_8_by_4() {
        let (b, store) = trunk(BackboneConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let images = ImageBatch::new(Tensor::uniform(&[1, 3, 64, 32], 1.0, &mut rng)).unwrap();
        let map = extract_feature_map(&images, &b, &store).unwrap();
        assert_eq!(map.tensor().shape(), &[1, 128, 8, 4]);
    }

    #[test]
    fn full_scale_with_four_stages_is_16_by_8() {
        let config = BackboneConfig {
            widths: vec![4, 4, 4, 8],
            strides: vec![2, 2, 2, 2],
        };
        assert_eq!(config.output_size(256, 128).unwrap(), (16, 8));
        let (b, store) = trunk(config);
        let images = ImageBatch::new(Tensor::full(&[1, 3, 256, 128], 0.5)).unwrap();
        let map = extract_feature_map(&images, &b, &store).unwrap();
        assert_eq!(map.tensor().shape(), &[1, 8, 16, 8]);
    }

    #[test]
    fn identical_images_give_identical_maps() {
        let (b, store) = trunk(BackboneConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let one = Tensor::uniform(&[1, 3, 64, 32], 1.0, &mut rng);
        let img = one.reshape(&[3, 64, 32]).unwrap();
        let two = Tensor::stack(&[img.clone(), img]).unwrap();
        let map = extract_feature_map(&ImageBatch::new(two).unwrap(), &b, &store).unwrap();
        let half = map.tensor().numel() / 2;
        assert_eq!(map.tensor().data()[..half], map.tensor().data()[half..]);
    }

    #[test]
    fn non_divisible_input_is_a_config_error() {
        let (b, store) = trunk(BackboneConfig::default());
        let images = ImageBatch::new(Tensor::zeros(&[1, 3, 60, 32])).unwrap();
        assert!(matches!(
            extract_feature_map(&images, &b, &store),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn odd_map_height_is_rejected() {
        let config = BackboneConfig {
            widths: vec![8],
            strides: vec![8],
        };
        assert!(config.output_size(24, 16).is_err());
    }

    #[test]
    fn non_finite_pixels_are_rejected() {
        let mut t = Tensor::zeros(&[1, 3, 8, 8]);
        t.data_mut()[5] = f64::NAN;
        assert!(matches!(ImageBatch::new(t), Err(Error::Validation(_))));
        assert!(ImageBatch::new(Tensor::zeros(&[1, 4, 8, 8])).is_err());
    }

    #[test]
    fn pooling_constant_and_indexed_maps() {
        let ones = FeatureMap::new(Tensor::ones(&[2, 3, 4, 2])).unwrap();
        assert!(global_pool(&ones).unwrap().tensor().data().iter().all(|&v| v == 1.0));

        let indexed = Tensor::from_fn(&[1, 5, 2, 2], |i| (i / 4) as f64);
        let pooled = global_pool(&FeatureMap::new(indexed).unwrap()).unwrap();
        assert_eq!(pooled.tensor().data(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pooling_matches_hand_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let t = Tensor::uniform(&[1, 4, 2, 2], 2.0, &mut rng);
        let pooled = global_pool(&FeatureMap::new(t.clone()).unwrap()).unwrap();
        for c in 0..4 {
            let d = t.data();
            let want = (d[4 * c] + d[4 * c + 1] + d[4 * c + 2] + d[4 * c + 3]) / 4.0;
            assert!((pooled.tensor().data()[c] - want).abs() < 1e-15);
        }
    }
}
