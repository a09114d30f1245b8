//! Causal debiasing for aspect-based sentiment analysis at toy scale.
//!
//! Three encoder branches (aspect only, review only, aspect and review
//! fused) are trained jointly; at inference the aspect-only natural direct
//! effect is subtracted from the fused score and the review logits are
//! backdoor-adjusted against a dictionary of per-aspect context prototypes.

pub mod causal;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod evaluation;
pub mod model;
mod error;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
