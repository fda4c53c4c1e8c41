//! Query-based Gaussian splatting pre-training at desk scale.
//!
//! A small convolutional encoder and a sparse query decoder predict 3D
//! Gaussians from multi-view images; a tile-based differentiable splatting
//! renderer turns them into RGB and depth for self-supervised training. The
//! pre-trained queries are then transferred into a toy occupancy task through
//! k-nearest-neighbor local attention.

pub mod autodiff;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod pretrain;
pub mod render;
pub mod sampling;
pub mod scene;
pub mod verify;

pub use autodiff::{Array, Graph, NodeId};
pub use decoder::{DecoderConfig, GaussianQuerySet};
pub use encoder::{EncoderConfig, FeaturePyramid};
pub use error::{Error, Result};
pub use finetune::{InteractionConfig, IouReport, TaskConfig, TaskModel, TaskQuerySet};
pub use geometry::{Camera, GaussianPrimitive};
pub use model::{ModelConfig, SqsModel};
pub use nn::ParamStore;
pub use pretrain::{AdamWConfig, LossWeights, OptimizerState, PretrainConfig};
pub use render::{RenderOutput, RenderSettings};
pub use scene::{Bounds, Scene, SceneSample, SceneSpec};
