//! Desk-scale workbench for attention prompt tuning on video transformers.
//!
//! The crate is organised around a small tape-based autodiff engine
//! ([`numerics`]), a pre-norm video ViT ([`model`]), the prompt machinery with
//! its clamped scale reparameterization ([`prompt`]), an analytic
//! parameter/FLOP cost model ([`costmodel`]), a synthetic motion dataset
//! ([`data`]), and an AdamW trainer ([`trainer`]). [`commands`] wires these
//! into the operations exposed by the `aptw` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod prompt;
pub mod trainer;

pub use error::AptError;
