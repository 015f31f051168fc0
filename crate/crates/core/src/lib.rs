//! Self-supervised sound source localization with hard-positive mining.
//!
//! Small two-stream encoders map images to spatial feature maps and audio to
//! embeddings. Their cosine response maps drive a contrastive objective whose
//! positive set is extended with semantically similar pairs mined from a
//! baseline model's features. Localization is scored with cIoU and AUC
//! against ground-truth boxes.
//!
//! Modules, bottom-up:
//! - [`synthdata`]: synthetic datasets and file formats
//! - [`encoders`]: vision / audio encoders with gradients
//! - [`attention`]: response maps and pseudo masks
//! - [`mining`]: top-K positive sets and negatives
//! - [`objective`]: contrastive losses and their gradients
//! - [`trainer`]: the two-stage schedule
//! - [`metrics`]: cIoU / AUC evaluation and comparisons

pub mod attention;
pub mod encoders;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod mining;
pub mod objective;
pub mod synthdata;
mod textio;
pub mod trainer;

pub use error::{Error, Result};
