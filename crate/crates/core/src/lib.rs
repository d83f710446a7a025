//! Sign-bit lesion toolkit for small convolutional classifiers.
//!
//! The crate is organised bottom-up:
//!
//! * [`bitkit`] – raw IEEE-754 single-precision word manipulation.
//! * [`tensorstore`] – safetensors-layout weight archives and the model manifest.
//! * [`nnengine`] – deterministic forward/backward passes with traversal counters.
//! * [`scoring`] – per-parameter saliency (magnitude, hybrid, pruning ablations).
//! * [`lesion`] – flip planners (pass-free, single-pass, random) and the flip applicator.
//! * [`shield`] – selective sign-bit protection with replication or SEC-DED codes.
//! * [`bench`] – synthetic victims, trainer, AR/mAR metrics, experiments and oracles.
//!
//! All randomness flows through the counter-based generator in [`rng`].

pub mod bench;
pub mod bitkit;
pub mod cli;
pub mod error;
pub mod lesion;
pub mod nnengine;
pub mod rng;
pub mod scoring;
pub mod shield;
pub mod tensorstore;

pub use error::{Error, ErrorClass, Result};
