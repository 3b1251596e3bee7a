//! Weakly supervised video question grounding.
//!
//! A model answers a multiple-choice question about a video and returns the
//! time interval that supports the answer, trained from answer labels only.
//! The pieces:
//!
//! - [`dataset`]: synthetic confounded benchmarks and a manifest format for
//!   precomputed features.
//! - [`encoders`]: temporal self-attention over frames and the answer head.
//! - [`grounding`]: frame attention with adaptive Gaussian smoothing and
//!   interval extraction.
//! - [`alignment`]: contrastive alignment of grounded segments and questions.
//! - [`causal`]: confounder dictionaries with back-door and front-door
//!   interventions.
//! - [`evalmetrics`]: grounded QA metrics.
//! - [`harness`]: training, ablations and the whole-video baseline.

pub mod alignment;
pub mod autograd;
pub mod causal;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evalmetrics;
pub mod grounding;
pub mod harness;
pub mod model;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
