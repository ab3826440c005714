//! Capture, canonicalize, splat.
//!
//! A desk-scale pipeline that turns a handful of loosely posed captures of a
//! subject into a 3D Gaussian splat scene:
//!
//! * [`datagen`] builds procedural ground-truth subjects and renders corpora of
//!   canonical multi-view sets and simulated phone captures.
//! * [`fit`] optimizes a splat scene against posed images (optionally refining
//!   the cameras) and re-renders it from a fixed [`camera::CanonicalRig`].
//! * [`lrm`] is a small transformer that lifts canonical views to one Gaussian
//!   per input pixel, trained end-to-end through the differentiable
//!   rasterizer in [`raster`] with the four-term objective in [`loss`].
//!
//! Conventions: right-handed world frame with +y up; camera frames look down
//! +z with +x right and +y down in the image. Pixel `(i, j)` is sampled at
//! image coordinate `(i, j)`.

pub mod ablation;
pub mod camera;
pub mod datagen;
mod error;
pub mod fit;
pub mod imageio;
pub mod loss;
pub mod lrm;
pub mod metrics;
pub mod optim;
pub mod raster;
mod real;
pub mod splat;
#[doc(hidden)]
pub mod testkit;

pub use error::{Error, Result};
pub use real::Real;
