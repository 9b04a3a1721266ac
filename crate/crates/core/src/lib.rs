//! Solar panel surface-fault screening.
//!
//! The pipeline has three stages:
//!
//! 1. [`vit`]: a patch-based transformer classifies a panel image into one of
//!    nine [`DefectClass`] categories.
//! 2. [`features`]: the defect region is segmented and summarized as a
//!    seven-value [`FeatureVector`] (area, edges, color entropy, texture).
//! 3. [`severity`]: a random forest regresses a severity score from the
//!    features, which is discretized to a nil/minor/major [`SeverityGrade`].
//!
//! [`eval`] holds the splitting and metric code, [`dataset`] the on-disk layout
//! and the procedural generator, and [`container`] the binary model format.

pub mod cli;
pub mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod imaging;
pub mod rng;
pub mod severity;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use features::FeatureVector;
pub use imaging::RgbImage;
pub use rng::Rng;
pub use severity::SeverityGrade;
pub use tensor::Tensor;
pub use vit::DefectClass;
