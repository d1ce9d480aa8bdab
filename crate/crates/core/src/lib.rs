//! Localized multi-label supervision for image classifiers.
//!
//! A *label map* is an `H x W x C` array of class scores for one image. This
//! crate turns classifier feature maps into label maps, stores them as
//! per-pixel top-k sparse records, and pools them over random-crop regions
//! to produce soft multi-label training targets.
//!
//! Module overview:
//! - [`label_map`], [`quant`], [`sparse`], [`store`], [`cost`]: domain types,
//!   value quantization, top-k encoding and the `.rlbl` store format.
//! - [`annotate`]: fully-convolutional conversion of a classifier head.
//! - [`augment`]: random-resized-crop sampling, CutMix boxes, IoU.
//! - [`pooling`]: regional pooling, label variants, mixing and soft cross-entropy.
//! - [`analysis`]: crop-overlap CDF and confidence-versus-overlap tables.
//! - [`traindemo`]: small synthetic experiments.

pub mod analysis;
pub mod annotate;
pub mod augment;
pub mod cost;
mod error;
pub mod label_map;
pub mod pooling;
pub mod quant;
pub mod sparse;
pub mod store;
pub mod traindemo;

pub use error::{Error, Result};
pub use label_map::{DenseLabelMap, ValueMode};
pub use quant::QuantFormat;
pub use sparse::SparseLabelMap;
pub use store::LabelStore;
