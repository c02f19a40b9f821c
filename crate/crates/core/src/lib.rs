//! Ultrasound sweep image-quality assessment at desk scale.
//!
//! A frozen ViT encoder with low-rank adapters drives either a one-layer
//! binary classification head or a small U-shaped segmentation decoder
//! whose predicted masks are thresholded into quality labels. The crate
//! also ships the synthetic blind-sweep phantom generator, preprocessing
//! and augmentation, the AdamW training loop with checkpoint selection,
//! and the evaluation / embedding-export tooling that goes with them.

pub mod eval;
pub mod heads;
pub mod lora;
pub mod losses;
pub mod model;
pub mod data;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod vit;

pub use params::{ParamId, ParamStore};
pub use tensor::{Graph, Scalar, TensorError, TensorId};
