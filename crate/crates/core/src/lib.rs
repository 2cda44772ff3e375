//! Structural analogies from a single pair of images.
//!
//! Two coupled stacks of per-scale patch GANs are trained coarse to fine on
//! images `A` and `B`. The same generator both super-resolves its own domain
//! and maps samples from the other domain into it, which is what ties the
//! two patch distributions together.

pub mod backend;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod generation;
pub mod image;
pub mod inference;
pub mod losses;
pub mod networks;
pub mod pyramid;
pub mod trainer;
pub mod video;

pub use error::{Error, Result};
pub use image::Image;
