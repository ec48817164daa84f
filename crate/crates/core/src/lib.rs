//! Semi-supervised hyperspectral image classification with context-aware
//! dynamic graph convolution.
//!
//! Pixels are softly assigned to superpixel regions whose anchors are
//! learned, region features are refined by graph convolutions over an
//! adjacency rebuilt at each layer from a learned Mahalanobis metric, and
//! region outputs are interpolated back onto pixels for a cross-entropy
//! loss on the few labeled pixels. Everything runs on the in-crate
//! reverse-mode tape in [`autodiff`].

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pca;
pub mod projection;
pub mod render;
pub mod segmentation;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{SparsePattern, Tensor};
