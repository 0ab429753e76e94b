//! Sparse attention for video diffusion transformers, at desk scale.
//!
//! The crate reorders `(f, h, w)` video tokens into spatial tiles
//! ([`layout`]), models each head's sparse region as frame-grouped dual
//! windows ([`masks`]), searches those windows offline against attention
//! maps under recall and cost thresholds ([`search`]), and runs the resulting
//! block mask through a blockwise online-softmax kernel checked against a
//! dense oracle ([`attention`]). [`synth`] plants known patterns for
//! experiments, [`metrics`] measures maps and masks, and [`io`] holds the
//! on-disk formats.

pub mod attention;
pub mod cli;
pub mod error;
pub mod io;
pub mod layout;
pub mod masks;
pub mod metrics;
pub mod search;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
