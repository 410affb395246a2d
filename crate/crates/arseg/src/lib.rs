//! Next-scale autoregressive mask segmentation at desk scale.
//!
//! The pipeline: a multi-scale residual vector-quantized mask autoencoder
//! turns a binary mask into a coarse-to-fine pyramid of token maps; a
//! block-causal transformer predicts each scale's token map from all earlier
//! scales, a target class and an image embedding; sampling several pyramids
//! and averaging the decoded masks yields a consensus segmentation.
//!
//! See `book/` for a guided tour with runnable snippets (mirrored as
//! doc-tests kept alongside the book chapters).

pub mod arsg;
pub mod autograd;
pub mod error;
pub mod nn;

pub use error::{ArsegError, Result};
