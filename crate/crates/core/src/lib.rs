//! Singular-value tuning for promptable segmentation.
//!
//! The crate provides the spectral adapter itself ([`svd_adapter`]), a small
//! SAM-like promptable segmentation model ([`model`]), text prompts with a
//! trainable affine layer ([`text`]), LoRA / bias-only / full baselines with
//! exact parameter accounting ([`peft`]), blank-aware DICE evaluation
//! ([`metrics`]), a synthetic shapes corpus ([`data`]) and the training
//! workflow ([`train`], [`report`]).

pub mod data;
pub mod error;
pub mod linalg;
pub mod lora;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod peft;
pub mod report;
pub mod seed;
pub mod svd_adapter;
pub mod text;
pub mod train;

pub use candle_core as candle;
pub use error::{Error, ErrorKind, Result};
