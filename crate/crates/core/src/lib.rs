//! Dynamic neural signed-distance reconstruction: a canonical SDF plus a
//! per-frame bending field, trained from monocular images and masks through
//! unbiased volume rendering along bent rays.

pub mod autodiff;
pub mod camera;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod extract;
pub mod image;
pub mod losses;
pub mod nn;
pub mod proxy;
pub mod render;
pub mod scene;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Points and vectors in scene units.
pub type Vec3 = nalgebra::Vector3<f64>;
