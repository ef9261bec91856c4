//! Zero-shot IoT device fingerprinting.
//!
//! Packet traces are turned into fixed-length feature sequences
//! ([`ingest`]), a self-attention encoder is trained on the devices seen at
//! training time ([`sane`]), per-device attribute vectors are derived from
//! its narrow latent ([`attributes`]), a conditional VAE turns attributes
//! into labeled pseudo latents for every device ([`cvae`]), and a linear SVM
//! trained on those pseudo latents classifies real traffic of seen and
//! unseen devices ([`classifier`]). [`baselines`] holds the clustering
//! comparisons and [`synth`] the synthetic traffic generator.

pub mod attributes;
pub mod baselines;
pub mod classifier;
pub mod cvae;
pub mod digest;
pub mod error;
pub mod experiment;
pub mod ingest;
pub mod numerics;
pub mod sane;
pub mod synth;

pub use error::{Error, Result};
