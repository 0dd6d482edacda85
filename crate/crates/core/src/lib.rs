//! Occlusion-consistency and transformation-consistency training for a small
//! iterative optical flow estimator.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: a dense tensor type and a tape-based reverse-mode autodiff
//!   graph with the primitives the model and the losses need.
//! * [`flow`]: flow fields, occlusion masks, exact geometric transforms with
//!   their restoration, and evaluation metrics.
//! * [`cowmask`]: random, locally connected occlusion masks.
//! * [`losses`]: sequence, zero-forcing, mask-match and gated transformation
//!   consistency losses, plus their weighted aggregate.
//! * [`model`]: a toy recurrent flow estimator with an occlusion channel and
//!   its checkpoint format.
//! * [`data`]: synthetic scenes with exact ground truth, frame-hop sampling,
//!   occlusion pairs, and `.flo` / PPM IO.

mod bytes;
pub mod cowmask;
pub mod data;
mod error;
pub mod flow;
pub mod image;
pub mod losses;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use image::Image;
