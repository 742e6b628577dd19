//! Deep-unfolding underwater image enhancement.
//!
//! A color prior block feeds `S` unrolled proximal-gradient stages. Each
//! stage takes a learned gradient step, refines it with a U-Net proximal
//! map and hands transformer-refined features to the next stage.

mod conv_kernel;
mod fused;
pub mod checkpoint;
pub mod config;
pub mod cpgb;
pub mod data;
pub mod error;
pub mod feature_net;
pub mod isf_former;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nagdm;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
pub use model::{AblationFlags, ForwardResult, Model, ModelConfig};
