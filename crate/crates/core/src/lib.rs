//! Zero-shot node anomaly detection on attributed graphs.
//!
//! Raw features are aligned into a fixed-width multi-curvature space, encoded
//! by a shared hop-residual backbone, and reconstructed by a mixture of
//! constant-curvature experts chosen through per-expert memory banks. The
//! reconstruction residual is the anomaly score.

// `!(x > 0.0)` is how config checks reject NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod backbone;
pub mod error;
pub mod experts;
pub mod geometry;
pub mod graph;
pub mod inference;
pub mod model;
pub mod nn;
pub mod router;
pub mod sweep;
pub mod synth;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
