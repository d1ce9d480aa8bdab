//! Crop sampling, CutMix boxes and box geometry.
//!
//! All geometry is in normalized image coordinates (`[0,1]` on both axes) so
//! the same region addresses the source image and any label-map grid.

pub mod crop;
pub mod cutmix;
pub mod geometry;
pub mod rng;

pub use crop::{sample_crop, sample_crop_detailed, CropParams, CropSample, CropSampler, ImageSize};
pub use cutmix::{cutmix_box, CutMix};
pub use geometry::{iou, BBox, CropRegion};
pub use rng::{seeded_stream, SeededRng};
