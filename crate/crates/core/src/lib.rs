//! Mask embedding extraction with learned semantic activation maps.
//!
//! The crate trains a small convolutional adapter that turns a binary mask
//! and a feature map into `K` spatial weighting maps, aggregates features
//! under those maps into a mask embedding, and classifies the embedding by
//! cosine similarity against category prototypes. Everything runs on a
//! synthetic world ([`synthworld`]) in which prototype-plus-noise feature
//! maps stand in for a frozen vision-language backbone.

pub mod adapter;
pub mod cli;
pub mod error;
pub mod extractors;
pub mod losses;
pub mod masks;
pub mod matching;
pub mod pgm;
pub mod pipeline;
pub mod synthworld;

pub use error::{Error, Result};
