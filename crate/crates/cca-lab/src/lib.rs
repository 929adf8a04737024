//! Exact laboratory for contrastive alignment of discrete autoregressive
//! sequence models.
//!
//! Everything here runs on fully enumerable sequence spaces, so every
//! quantity that large-scale systems can only estimate — likelihoods,
//! marginals, guided sampling policies, alignment targets — is computed
//! exactly and checked against brute-force enumeration.

pub mod alignment;
pub mod config;
pub mod dist;
pub mod error;
pub mod eval;
pub mod grad;
pub mod guidance;
pub mod model;
pub mod numeric;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod space;
pub mod verify;

pub use error::{Error, Result};
