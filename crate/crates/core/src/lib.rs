//! Region-based detection head.
//!
//! The crate covers the pieces that sit on top of a shared convolutional
//! feature map: RoI max pooling with argmax backpropagation, the
//! classification + smooth-L1 multi-task loss, image-centric minibatch
//! sampling, a small fully connected head trained with momentum SGD,
//! truncated-SVD compression of fully connected layers, and the test-time
//! pipeline (scale selection, scoring, per-class NMS, PASCAL-style AP).
//!
//! A synthetic scene generator stands in for backbone features and object
//! proposals so the whole pipeline can be trained and evaluated on a laptop.

pub mod ablation;
pub mod boxfile;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod net;
pub mod roipool;
pub mod sampler;
pub mod svd;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{BBox, BoxTransform, TargetNormalizer};
pub use roipool::{FeatureMap, PoolResult, RoiRect};
