//! Occlusion-correcting person re-identification.
//!
//! A convolutional trunk produces a feature map; grouped converters pool a
//! global feature and one feature per horizontal stripe; a center-focused
//! spatial softmax pools a feature from the middle of the box; a two-layer
//! relation head reweights their concatenation. Retrieval fuses the
//! corrected feature with the pooled trunk feature.
//!
//! Everything runs on a small `f64` reverse-mode tape ([`graph`]) so that
//! every gradient can be checked against finite differences.

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod feature_extractors;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod relation_adaptive;
pub mod retrieval_eval;
pub mod tensor;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use model::{Embeddings, ModelConfig, OcNet};
pub use params::ParamStore;
pub use tensor::Tensor;
pub use types::{FeatureMap, FeatureVector, ImageBatch};
