//! Sequential recommendation with stochastic (diagonal Gaussian) embeddings,
//! a Wasserstein self-attention encoder, and a contrastive objective whose
//! similarity kernel is the negative squared 2-Wasserstein distance.
//!
//! The crate is organised bottom-up:
//!
//! * [`corpus`]: interaction logs, k-core filtering, leave-one-out splits
//! * [`augment`]: crop / mask / reorder / substitute / insert views
//! * [`wasserstein`]: the closed-form distance kernel and its gradient
//! * [`tape`]: reverse-mode differentiation used for training
//! * [`encoder`]: stochastic embeddings and the Wasserstein attention stack
//! * [`objectives`]: recommendation, hinge, contrastive losses and diagnostics
//! * [`trainer`], [`checkpoint`]: optimisation loop and persistence
//! * [`evaluation`]: full-catalogue ranking metrics and group reports

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod objectives;
pub mod synthetic;
pub mod tape;
pub mod trainer;
pub mod wasserstein;

pub use error::{Error, Result};

/// `⌊fraction · len⌋`, robust to representation error in `fraction`
/// (`0.7 · 10` must give 7, not 6).
pub fn fraction_count(fraction: f64, len: usize) -> usize {
    ((fraction * len as f64) + 1e-9).floor().max(0.0) as usize
}
