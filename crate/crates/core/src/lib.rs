//! Omni-supervised lesion detection at toy scale.
//!
//! A small anchor-based one-stage detector is trained from three kinds of
//! images at once: images with boxes, images with only image-level class
//! labels, and unlabeled images. Image labels reach the dense classification
//! head through attention-aligned pooling ([`daa`]) and a prototype metric
//! loss ([`gpa`]); unlabeled images are used through a mean-teacher soft
//! focal distillation ([`distill`]).

pub mod daa;
pub mod data;
pub mod detector;
pub mod distill;
pub mod error;
pub mod evaluation;
pub mod gpa;
pub mod nn;
pub mod numeric;
pub mod parallel;
pub mod plot;
pub mod tensor;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use parallel::Exec;
pub use tensor::Tensor3;
pub use types::{BoxF, Config, Detection, Granularity, GroundTruthBox, Sample};
