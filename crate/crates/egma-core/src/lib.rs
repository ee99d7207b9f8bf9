//! Gaze-guided multi-modal alignment at desk scale.
//!
//! The pipeline turns synchronized fixation/transcript sessions into
//! per-sentence attention heatmaps and gaze supervision matrices, trains
//! small image/text encoders with a fine-grained contrastive loss family
//! plus a gaze-weighted cross-modal mapping loss, and evaluates the result
//! with zero-shot classification and bidirectional retrieval.

pub mod alignment;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heatmap;
pub mod mapping;
pub mod numeric;
pub mod session;
pub mod synthetic;
pub mod trainer;

pub use error::{EgmaError, Result};
pub use numeric::Matrix;
