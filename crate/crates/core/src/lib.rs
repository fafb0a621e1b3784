//! Multimodal transformer networks for video-grounded dialogue.
//!
//! The crate is organized bottom-up: [`numerics`] provides tensors with
//! reverse-mode autodiff, [`attention`] the transformer primitives,
//! [`model`] the encoder/decoder/auto-encoder assembly, [`data`] corpus
//! handling, [`engine`] training and decoding, and [`metrics`] caption
//! evaluation. [`cli`] binds them into the `mtn` command.

pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;

pub use error::{MtnError, Result};
