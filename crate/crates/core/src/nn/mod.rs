//! Layer primitives with explicit forward caches and hand-written backward passes.
//!
//! Parameters live in one flat `Vec<f64>`; layers only carry offsets into it.
//! That makes optimizer state, the EMA teacher and checkpoints plain vectors.

mod conv;
mod ops;
mod params;

pub use conv::{Conv2d, ConvCache};
pub use ops::{relu_backward, relu_inplace, upsample2_backward, upsample2_nearest, Resize};
pub use params::{ParamLayout, ParamSlot};
