//! Core library for voxel-size independent slice segmentation.
//!
//! The crate is organized around a small reverse-mode autodiff engine over
//! rank-4 feature maps (`autograd`), a differentiable resampling layer that
//! maps native-resolution feature maps onto a fixed inner grid (`resnorm`),
//! competitive dense blocks and the network zoo built from them (`blocks`,
//! `model`), the composite segmentation loss with boundary-refinement weight
//! maps (`loss`), scale augmentation (`augment`), procedural multi-resolution
//! phantom volumes plus on-disk formats (`data`), segmentation metrics and
//! paired statistics (`eval`), and the optimizer/training loop (`opt`,
//! `trainer`).

pub mod augment;
pub mod autograd;
pub mod blocks;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod opt;
pub mod params;
pub mod resnorm;
pub mod tensor;
pub mod trainer;

pub use tensor::{FeatureMap, Real};
